import itertools

import numpy as np
import pytest

from neuropoints.errors import DataError, ParameterError
from neuropoints.rng import RngState
from neuropoints.shapedata import (
    LabelVolume, MultiStructureSample, PointCloud, RigidTransform, SynthSpec, apply_rigid, augment_sample,
    check_uniform_shape, dent_statistic, extract_boundary, normalize_subject, random_rigid, sample_uniform,
    scale_to_age, synth_dataset,
)


def brute_force_boundary(grid: np.ndarray, label: int) -> set:
    dz, dy, dx = grid.shape
    out = set()
    for z, y, x in itertools.product(range(dz), range(dy), range(dx)):
        if grid[z, y, x] != label:
            continue
        for oz, oy, ox in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            nz, ny, nx = z + oz, y + oy, x + ox
            if not (0 <= nz < dz and 0 <= ny < dy and 0 <= nx < dx) or grid[nz, ny, nx] != label:
                out.add((float(x), float(y), float(z)))
                break
    return out


class TestLabelVolume:

    def test_label_count_checked(self):
        with pytest.raises(DataError):
            LabelVolume((2, 2, 2), (1, 1, 1), (0, 0, 0), np.zeros(7))

    def test_spacing_must_be_positive(self):
        with pytest.raises(DataError):
            LabelVolume((1, 1, 1), (1, 0, 1), (0, 0, 0), np.zeros(1))

    def test_x_varies_fastest(self):
        vol = LabelVolume((3, 2, 1), (1, 1, 1), (0, 0, 0), np.arange(6))
        assert vol.grid[0, 1, 0] == 3
        assert vol.grid[0, 0, 2] == 2


class TestExtractBoundary:

    def test_small_block_is_all_boundary(self):
        grid = np.zeros((5, 5, 5), dtype=np.uint16)
        grid[1:4, 1:4, 1:4] = 1
        cloud = extract_boundary(LabelVolume.from_grid(grid), 1)
        assert len(cloud) == 26

    def test_full_volume_touches_border(self):
        cloud = extract_boundary(LabelVolume.from_grid(np.ones((8, 8, 8))), 1)
        assert len(cloud) == 8 ** 3 - 6 ** 3

    def test_single_voxel(self):
        grid = np.zeros((3, 3, 3))
        grid[1, 1, 1] = 4
        np.testing.assert_array_equal(extract_boundary(LabelVolume.from_grid(grid), 4).points, [[1.0, 1.0, 1.0]])

    def test_world_coordinates(self):
        grid = np.zeros((1, 1, 2))
        grid[0, 0, 1] = 2
        vol = LabelVolume.from_grid(grid, spacing=(0.5, 2.0, 3.0), origin=(10.0, 20.0, 30.0))
        np.testing.assert_allclose(extract_boundary(vol, 2).points, [[10.5, 20.0, 30.0]])

    def test_absent_label(self):
        with pytest.raises(DataError, match="99"):
            extract_boundary(LabelVolume.from_grid(np.ones((2, 2, 2))), 99)

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_brute_force(self, seed):
        rng = RngState(seed)
        grid = rng.integers(0, 3, size=(10, 10, 10))
        # a solid block guarantees interior voxels next to the noise
        grid[2:7, 2:7, 2:7] = 1
        cloud = extract_boundary(LabelVolume.from_grid(grid), 1)
        got = {tuple(p) for p in cloud.points.tolist()}
        assert got == brute_force_boundary(grid, 1)
        assert len(got) == len(cloud)


class TestSampling:

    def test_without_replacement_when_large_enough(self):
        cloud = PointCloud(np.arange(30.0).reshape(10, 3))
        out = sample_uniform(cloud, 10, RngState(0))
        assert len({tuple(p) for p in out.points}) == 10

    def test_with_replacement_when_too_small(self):
        cloud = PointCloud(np.arange(9.0).reshape(3, 3))
        out = sample_uniform(cloud, 8, RngState(0))
        assert len(out) == 8
        assert {tuple(p) for p in out.points} <= {tuple(p) for p in cloud.points}

    def test_deterministic(self):
        cloud = PointCloud(RngState(1).normal(size=(50, 3)))
        a = sample_uniform(cloud, 20, RngState(5)).points
        b = sample_uniform(cloud, 20, RngState(5)).points
        np.testing.assert_array_equal(a, b)

    def test_inclusion_frequency_is_uniform(self):
        cloud = PointCloud(np.arange(96.0).reshape(32, 3))
        rng = RngState(8)
        counts = np.zeros(32)
        trials = 10_000
        for _ in range(trials):
            picked = sample_uniform(cloud, 8, rng).points[:, 0] / 3.0
            counts[picked.astype(int)] += 1
        p = 8 / 32
        sigma = np.sqrt(trials * p * (1 - p))
        assert counts.sum() == 8 * trials
        assert np.abs(counts - trials * p).max() < 4 * sigma

    def test_invalid_size(self):
        with pytest.raises(ParameterError):
            sample_uniform(PointCloud(np.zeros((2, 3))), 0, RngState(0))

    def test_empty_cloud_rejected(self):
        with pytest.raises(DataError):
            PointCloud(np.zeros((0, 3)))


def _sample(seed=0, m=2, n=40):
    rng = RngState(seed)
    clouds = [PointCloud(rng.normal(size=(n, 3)) * (j + 1) + 5.0 * j, j) for j in range(m)]
    return MultiStructureSample("s", clouds, 1)


class TestNormalize:

    def test_joint(self):
        out, record = normalize_subject(_sample(), "joint")
        allpts = np.concatenate(out.arrays())
        np.testing.assert_allclose(allpts.mean(axis=0), 0.0, atol=1e-12)
        assert np.linalg.norm(allpts, axis=1).max() == pytest.approx(1.0)
        assert record.mode == "joint"

    def test_per_structure(self):
        out, _ = normalize_subject(_sample(), "per_structure")
        for c in out.clouds:
            np.testing.assert_allclose(c.points.mean(axis=0), 0.0, atol=1e-12)
            assert np.linalg.norm(c.points, axis=1).max() == pytest.approx(1.0)

    @pytest.mark.parametrize("mode", ["joint", "per_structure", "center"])
    def test_translation_does_not_change_the_result(self, mode):
        sample = _sample(seed=4)
        moved = sample.with_clouds([apply_rigid(c, RigidTransform(np.eye(3), [10.0, 10.0, 10.0])) for c in sample.clouds])
        for a, b in zip(normalize_subject(sample, mode)[0].clouds, normalize_subject(moved, mode)[0].clouds):
            np.testing.assert_allclose(a.points, b.points, rtol=0, atol=1e-9)

    def test_center_keeps_sizes(self):
        sample = _sample(seed=2)
        out, record = normalize_subject(sample, "center")
        allpts = np.concatenate(out.arrays())
        np.testing.assert_allclose(allpts.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.clouds[1].points - out.clouds[0].points,
                                   sample.clouds[1].points - sample.clouds[0].points, atol=1e-12)
        np.testing.assert_array_equal(record.scales, [1.0, 1.0])

    def test_none_is_identity(self):
        sample = _sample()
        out, _ = normalize_subject(sample, "none")
        np.testing.assert_array_equal(out.clouds[0].points, sample.clouds[0].points)

    def test_denormalize_inverts(self):
        sample = _sample()
        for mode in ("joint", "per_structure", "center"):
            out, record = normalize_subject(sample, mode)
            back = record.denormalize(out.clouds[1].points, 1)
            np.testing.assert_allclose(back, sample.clouds[1].points, atol=1e-12)

    def test_degenerate_sample(self):
        sample = MultiStructureSample("flat", [PointCloud(np.ones((5, 3)))])
        with pytest.raises(DataError, match="degenerate"):
            normalize_subject(sample)

    def test_unknown_mode(self):
        with pytest.raises(ParameterError):
            normalize_subject(_sample(), "spherical")


class TestRigid:

    @pytest.mark.parametrize("seed", range(10))
    def test_random_rigid_is_proper_rotation(self, seed):
        t = random_rigid(RngState(seed), 0.1)
        np.testing.assert_allclose(t.rotation @ t.rotation.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(t.rotation) == pytest.approx(1.0)
        assert np.abs(t.translation).max() <= 0.1

    def test_max_angle_bounds_rotation(self):
        rng = RngState(3)
        for _ in range(50):
            R = random_rigid(rng, 0.0, max_angle=0.2).rotation
            angle = np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0))
            assert angle <= 0.2 + 1e-9

    def test_compose_and_inverse(self):
        rng = RngState(4)
        a, b = random_rigid(rng, 1.0), random_rigid(rng, 1.0)
        pts = rng.normal(size=(6, 3))
        np.testing.assert_allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)), atol=1e-12)
        np.testing.assert_allclose(a.inverse().apply(a.apply(pts)), pts, atol=1e-12)

    def test_rejects_reflection(self):
        with pytest.raises(ParameterError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_augment_preserves_distances(self):
        sample = _sample()
        out = augment_sample(sample, RngState(2), 0.1)
        before = np.concatenate(sample.arrays())
        after = np.concatenate(out.arrays())
        d0 = np.linalg.norm(before[:, None] - before[None], axis=2)
        d1 = np.linalg.norm(after[:, None] - after[None], axis=2)
        np.testing.assert_allclose(d0, d1, atol=1e-9)

    def test_apply_rigid_keeps_structure_id(self):
        cloud = PointCloud(np.zeros((2, 3)), 7)
        assert apply_rigid(cloud, RigidTransform.identity()).structure_id == 7


class TestSynth:

    def test_counts_and_balance(self, small_dataset):
        assert len(small_dataset) == 20
        assert check_uniform_shape(small_dataset) == (2, 16)
        assert sum(s.target for s in small_dataset) == 10

    def test_deterministic(self, small_spec):
        a = synth_dataset(small_spec)
        b = synth_dataset(small_spec)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.clouds[0].points, sb.clouds[0].points)

    def test_threads_do_not_change_corpus(self, small_spec):
        a = synth_dataset(small_spec, threads=1)
        b = synth_dataset(small_spec, threads=4)
        for sa, sb in zip(a, b):
            assert sa.subject_id == sb.subject_id
            np.testing.assert_array_equal(sa.clouds[1].points, sb.clouds[1].points)

    def test_dent_is_detectable(self):
        spec = SynthSpec(n_subjects=40, num_structures=1, num_points=512, jitter=0.0, seed=1)
        stats = {0: [], 1: []}
        for s in synth_dataset(spec):
            stats[s.target].append(dent_statistic(s.clouds[0].points))
        assert max(stats[0]) < 1.0 + 1e-6 and min(stats[0]) > 0.95
        assert max(stats[1]) < min(stats[0])

    def test_dent_statistic_classifies_the_corpus(self):
        spec = SynthSpec(n_subjects=200, num_structures=1, num_points=256, seed=2)
        data = synth_dataset(spec)
        predicted = np.array([dent_statistic(s.clouds[0].points) < 0.9 for s in data], dtype=int)
        targets = np.array([s.target for s in data])
        assert np.mean(predicted == targets) > 0.99

    def test_lattice_points_line_up_across_subjects(self):
        spec = SynthSpec(n_subjects=4, num_structures=1, num_points=64, jitter=0.0)
        directions = []
        for s in synth_dataset(spec)[::2]:
            local = (s.clouds[0].points - s.annotations["centers"][0]) / s.annotations["axes"][0]
            directions.append(local)
        np.testing.assert_allclose(directions[0], directions[1], atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(directions[0], axis=1), 1.0, atol=1e-12)

    def test_random_sampling_and_order(self):
        spec = SynthSpec(n_subjects=3, num_structures=1, num_points=64, jitter=0.0, sampling="random", order="random")
        data = synth_dataset(spec)
        a, b = [(s.clouds[0].points - s.annotations["centers"][0]) / s.annotations["axes"][0] for s in data[::2]]
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)
        assert not np.allclose(a, b)
        with pytest.raises(ParameterError):
            SynthSpec(sampling="grid")

    def test_polar_order_puts_dent_first(self):
        spec = SynthSpec(n_subjects=2, num_structures=1, num_points=128)
        mask = synth_dataset(spec)[1].annotations["dent_mask"]
        assert mask.any()
        k = int(mask.sum())
        assert mask[:k].all() and not mask[k:].any()

    def test_regression_targets(self):
        spec = SynthSpec(n_subjects=30, num_structures=2, num_points=64, task="regression", jitter=0.0)
        for s in synth_dataset(spec):
            assert 60.0 <= s.target <= 90.0
            radius = np.linalg.norm(s.clouds[0].points - s.annotations["centers"][0], axis=1)
            assert scale_to_age(radius.mean(), spec) == pytest.approx(s.target)

    def test_mixed_classes_regression(self):
        spec = SynthSpec(n_subjects=4, task="regression", mixed_classes=True, num_points=32)
        data = synth_dataset(spec)
        assert [int(s.annotations["class"]) for s in data] == [0, 1, 0, 1]
        assert all(isinstance(s.target, float) for s in data)

    def test_unknown_spec_key(self):
        with pytest.raises(ParameterError, match="colour"):
            SynthSpec.from_dict({"colour": "red"})

    def test_invalid_depth(self):
        with pytest.raises(ParameterError):
            SynthSpec(dent_depth=1.0)
