import json
import os
from itertools import product

import numpy as np
import pandas as pd
import pytest

from neuropoints.checkpoint import load_checkpoint
from neuropoints.cli import main
from neuropoints.errors import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, NumericError
from neuropoints.formats import load_dataset, write_label_volume
from neuropoints.occlusion import importance_map
from neuropoints.service import ShapeAnalysisService, read_targets
from neuropoints.shapedata import LabelVolume, normalize_subject
from neuropoints.training import evaluate, prepare_samples

TOY_RUN = """\
seed: 0
model:
  tnet_mlp: [8, 16]
  tnet_fc: [8]
  feature_mlp: [8, 8]
  post_mlp: [8, 8]
  head: [32, 16]
train:
  epochs: 2
  batch_size: 4
"""


def _files(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            path = os.path.join(dirpath, name)
            out[os.path.relpath(path, root)] = open(path, "rb").read()
    return out


@pytest.fixture
def cube_volume(tmp_path):
    grid = np.zeros((5, 5, 5), dtype=np.uint16)
    grid[1:4, 1:4, 1:4] = 1
    return write_label_volume(LabelVolume.from_grid(grid), str(tmp_path / "vols" / "subj01"))


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    config = root / "toy.yml"
    config.write_text(TOY_RUN)
    assert main(["synth", "-o", str(root / "data"), "--subjects", "20", "--structures", "2", "-n", "16", "--seed", "3"]) == EXIT_OK
    manifest = str(root / "data" / "manifest.json")
    assert main(["train", manifest, "-o", str(root / "out"), "--config", str(config)]) == EXIT_OK
    return root, manifest


class TestExtract:

    def test_cube_boundary(self, tmp_path, cube_volume):
        out = tmp_path / "ds"
        assert main(["extract", cube_volume, "-l", "1", "-n", "26", "-o", str(out)]) == EXIT_OK
        (sample,) = load_dataset(str(out / "manifest.json"))
        assert sample.subject_id == "subj01" and sample.target is None
        got = sorted(map(tuple, sample.clouds[0].points.astype(int).tolist()))
        expected = sorted(p for p in product((1, 2, 3), repeat=3) if p != (2, 2, 2))
        assert got == expected
        assert (out / "summary_extract.json").exists()

    def test_rerun_is_byte_identical(self, tmp_path, cube_volume):
        for name in ("a", "b"):
            assert main(["extract", cube_volume, "-l", "1", "-n", "40", "-o", str(tmp_path / name), "--seed", "5"]) == EXIT_OK
        a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
        b["summary_extract.json"] = b["summary_extract.json"].replace(b"/b/", b"/a/")
        assert a == b

    def test_targets_and_binary(self, tmp_path, cube_volume):
        targets = tmp_path / "targets.csv"
        targets.write_text("subject_id,target\nsubj01,1\n")
        out = tmp_path / "ds"
        code = main(["extract", cube_volume, "-l", "1", "-n", "8", "-o", str(out), "--targets", str(targets), "--binary"])
        assert code == EXIT_OK
        (sample,) = load_dataset(str(out / "manifest.json"))
        assert sample.target == 1 and len(sample.clouds[0]) == 8
        assert os.listdir(out / "clouds") == ["subj01_s0.bin"]

    def test_absent_label_is_a_data_error(self, tmp_path, cube_volume):
        assert main(["extract", cube_volume, "-l", "99", "-n", "8", "-o", str(tmp_path / "ds")]) == EXIT_DATA

    def test_missing_volume(self, tmp_path):
        assert main(["extract", str(tmp_path / "nope.json"), "-l", "1", "-o", str(tmp_path / "ds")]) == EXIT_DATA

    def test_read_targets_floats(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("subject_id,target\n001,71.5\n002,64\n")
        assert read_targets(str(path)) == {"001": 71.5, "002": 64.0}


class TestUsage:

    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["extract", "vol.json"])
        assert exc.value.code == EXIT_USAGE

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            main(["fit"])
        assert exc.value.code == EXIT_USAGE

    def test_bad_config_value(self, tmp_path):
        assert main(["synth", "-o", str(tmp_path), "--subjects", "0"]) == EXIT_USAGE

    def test_numeric_failure(self, tmp_path, monkeypatch):
        def boom(self, *args, **kwargs):
            raise NumericError("loss is nan")

        monkeypatch.setattr(ShapeAnalysisService, "train", boom)
        assert main(["train", "m.json", "-o", str(tmp_path)]) == EXIT_NUMERIC


class TestSynth:

    def test_counts_and_spec(self, tmp_path):
        out = tmp_path / "ds"
        assert main(["synth", "-o", str(out), "--subjects", "6", "--structures", "3", "-n", "10"]) == EXIT_OK
        entries = json.load(open(out / "manifest.json"))
        assert len(entries) == 6 and all(len(e["clouds"]) == 3 for e in entries)
        assert [e["target"] for e in entries] == [0, 1, 0, 1, 0, 1]
        assert json.load(open(out / "synth_spec.json"))["num_points"] == 10
        assert len(load_dataset(str(out / "manifest.json"))[0].clouds[2]) == 10

    def test_spec_file_and_threads(self, tmp_path):
        spec = tmp_path / "spec.yml"
        spec.write_text("n_subjects: 4\nnum_structures: 2\nnum_points: 12\ntask: regression\n")
        main(["synth", "--spec", str(spec), "-o", str(tmp_path / "a")])
        main(["synth", "--spec", str(spec), "-o", str(tmp_path / "b"), "--threads", "3"])
        a, b = _files(tmp_path / "a" / "clouds"), _files(tmp_path / "b" / "clouds")
        assert a == b and len(a) == 8
        targets = [e["target"] for e in json.load(open(tmp_path / "a" / "manifest.json"))]
        assert all(60.0 <= t <= 90.0 for t in targets)


class TestTrainEvalExplain:

    def test_train_outputs(self, trained_run):
        root, _ = trained_run
        out = root / "out"
        for name in ("model.json", "model.bin", "epochs.csv", "splits.json", "metrics_test.json", "summary_train.json", "run.log"):
            assert (out / name).exists(), name
        assert len(pd.read_csv(out / "epochs.csv")) == 2
        splits = json.load(open(out / "splits.json"))
        assert [len(splits[k]) for k in ("train", "val", "test")] == [14, 3, 3]
        lines = open(out / "run.log").read().splitlines()
        assert lines[0].startswith("# run started ")
        assert any("epoch 2:" in line for line in lines[1:])

    def test_eval_matches_direct_evaluation(self, trained_run, tmp_path):
        root, manifest = trained_run
        checkpoint = str(root / "out" / "model.json")
        out = tmp_path / "metrics.json"
        assert main(["eval", checkpoint, manifest, "-o", str(out)]) == EXIT_OK
        report = json.load(open(out))

        model, extra = load_checkpoint(checkpoint)
        samples = prepare_samples(load_dataset(manifest, extra["splits"]["test"]), extra["normalize"])
        direct = evaluate(model, samples)
        assert report["split"] == "test" and report["n_samples"] == 3
        assert report["confusion_matrix"] == direct.confusion.tolist()
        assert report["macro"]["f1"] == pytest.approx(direct.macro_f1)

    def test_eval_all_split(self, trained_run, tmp_path):
        root, manifest = trained_run
        res = ShapeAnalysisService().evaluate(str(root / "out" / "model.json"), manifest, str(tmp_path / "m.json"), "all")
        assert res.metrics.n_samples == 20 and len(res.subject_ids) == 20

    def test_explain_matches_direct_call(self, trained_run, tmp_path):
        root, manifest = trained_run
        checkpoint = str(root / "out" / "model.json")
        stem = str(tmp_path / "imp")
        code = main(["explain", checkpoint, manifest, "-s", "subj0001", "--structure", "0", "-K", "4", "-o", stem])
        assert code == EXIT_OK
        frame = pd.read_csv(stem + ".csv")
        assert len(frame) == 16

        model, extra = load_checkpoint(checkpoint)
        (raw,) = load_dataset(manifest, ["subj0001"])
        sample, _ = normalize_subject(raw, extra["normalize"])
        imap = importance_map(model, sample, 0, 4)
        np.testing.assert_allclose(frame["importance"], imap.importance, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(frame[["x", "y", "z"]].values, raw.clouds[0].points, rtol=1e-8, atol=1e-12)
        assert open(stem + ".ply").readline() == "ply\n"

    def test_explain_unknown_subject(self, trained_run, tmp_path):
        root, manifest = trained_run
        code = main(["explain", str(root / "out" / "model.json"), manifest, "-s", "ghost", "-o", str(tmp_path / "x")])
        assert code == EXIT_DATA

    def test_rerun_with_same_seed_is_byte_identical(self, trained_run, tmp_path):
        root, manifest = trained_run
        config = root / "toy.yml"
        outputs = []
        for name in ("a", "b"):
            run = tmp_path / name
            assert main(["train", manifest, "-o", str(run), "--config", str(config), "--seed", "7"]) == EXIT_OK
            checkpoint = str(run / "model.json")
            assert main(["eval", checkpoint, manifest, "-o", str(run / "metrics_eval.json")]) == EXIT_OK
            assert main(["explain", checkpoint, manifest, "-s", "subj0001", "-K", "4", "-o", str(run / "imp")]) == EXIT_OK
            # logs and summaries carry timestamps and absolute paths
            outputs.append({
                path: content for path, content in _files(run).items()
                if not path.endswith(".log") and not path.startswith("summary_")
            })
        for name in ("model.json", "model.bin", "epochs.csv", "metrics_test.json", "metrics_eval.json", "imp.csv", "imp.ply"):
            assert name in outputs[0], name
        assert outputs[0] == outputs[1]


def test_run_from_yaml(tmp_path):
    cfg = tmp_path / "synth.yml"
    cfg.write_text("seed: 1\nsynth:\n  n_subjects: 3\n  num_points: 8\n")
    service = ShapeAnalysisService()
    res = service.run_from_yaml("synth", str(cfg), out_dir=str(tmp_path / "ds"))
    assert len(res.samples) == 3 and res.summary["status"] == "success"
    assert service.config.synth.seed == 1