import json
import os
from typing import Dict, List, Optional

from .metrics import Metrics


def generate_report(metrics: Metrics, split: str = "test", extra: Optional[Dict] = None) -> Dict:
    report = {"split": split}
    report.update(metrics.to_dict())
    if extra:
        report.update(extra)
    return report


def generate_summary(
    command: str,
    inputs: Dict,
    output_files: List[str],
    seed: int,
    errors: Optional[List[str]] = None,
    results: Optional[Dict] = None,
) -> Dict:
    file_details = []
    for f in output_files:
        if f and os.path.exists(f):
            file_details.append({
                "filename": os.path.basename(f),
                "path": f,
                "size_bytes": os.path.getsize(f),
            })

    errors_clean = errors or []
    status = "success" if not errors_clean else ("partial" if file_details else "failed")

    return {
        "command": command,
        "status": status,
        "seed": seed,
        "inputs": inputs,
        "output": {
            "n_files": len(file_details),
            "files": file_details,
        },
        "results": results or {},
        "errors": errors_clean,
    }


def save_summary(summary: Dict, output_dir: str, name: Optional[str] = None) -> str:
    # no timestamp in the name: reruns overwrite byte-identically
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, name or f"summary_{summary.get('command', 'run')}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    return path


def save_report(report: Dict, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def print_summary(summary: Dict) -> None:
    out = summary["output"]
    print(f"\nSummary | command: {summary['command']} | seed: {summary['seed']}")
    for key, value in sorted(summary["inputs"].items()):
        print(f"  {key:<10}: {value}")
    print(f"  files     : {out['n_files']}")
    res = summary.get("results") or {}
    if "macro_f1" in res:
        print(f"  macro f1  : {res['macro_f1']:.4f} (accuracy {res.get('accuracy', float('nan')):.4f})")
    if "mae" in res:
        print(f"  mae       : {res['mae']:.4f}")
    for e in summary["errors"]:
        print(f"  error     : {e}")
    print(f"  status    : {summary['status']}\n")
