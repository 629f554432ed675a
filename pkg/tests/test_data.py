import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy.stats import spearmanr

from mdbnet.data.io import (
    load_dataset,
    load_sample,
    read_camera,
    read_depth_png,
    read_manifest,
    read_vxg,
    save_sample,
    write_camera,
    write_manifest,
    write_vxg,
)
from mdbnet.data.sample import downsample_labels, pool_visibility, prepare
from mdbnet.data.splits import StopDecision, TrainState, early_stop, kfold_split
from mdbnet.data.synthetic import (
    OBJECT_CLASS_ORDER,
    class_probabilities,
    easy_tier,
    generate_scene,
    render_depth,
    skewed_tier,
)
from mdbnet.errors import FormatViolation, InvalidK, InvalidSpec
from mdbnet.geometry import GridSpec, Visibility, VoxelGrid


def _march_ray(origin, d, lo, hi, ts):
    """First entry parameter along one ray (0 if none): step through ``ts``, then bisect to 1e-10."""
    pts = origin + ts[:, None] * d
    hits = np.all((pts[:, None, :] >= lo) & (pts[:, None, :] < hi), axis=2).any(axis=1)
    if not hits.any():
        return 0.0
    k = int(np.argmax(hits))
    a, b = (ts[k - 1] if k else 0.0), ts[k]
    while b - a > 1e-10:
        mid = 0.5 * (a + b)
        p = origin + mid * d
        a, b = (a, mid) if np.any(np.all((p >= lo) & (p < hi), axis=1)) else (mid, b)
    return b


def march_depth(camera, boxes, reference=None, step=0.004, fine_step=1e-5, t_max=20.0):
    """Ray-marched depth per pixel.

    A coarse step can jump over a corner chord shorter than the step, so any
    pixel disagreeing with ``reference`` is marched again with ``fine_step``
    up to the coarse answer.
    """
    h, w = camera.image_height, camera.image_width
    out = np.zeros((h, w))
    lo = np.array([b.lo for b in boxes])
    hi = np.array([b.hi for b in boxes])
    coarse = np.arange(step, t_max, step)
    for v in range(h):
        for u in range(w):
            d = camera.rotation.T @ np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
            t = _march_ray(camera.center, d, lo, hi, coarse)
            if reference is not None and abs(t - reference[v, u]) > 1e-6:
                t = _march_ray(camera.center, d, lo, hi, np.arange(fine_step, t + step, fine_step))
            out[v, u] = t
    return out


def object_share_entropy(skew, seeds=range(20)):
    counts = np.zeros(12)
    for s in seeds:
        counts += generate_scene(skewed_tier(skew=skew, image_size=(8, 6)), seed=s).class_counts
    p = counts[list(OBJECT_CLASS_ORDER)]
    p = p[p > 0] / p.sum()
    return float(-(p * np.log(p)).sum())


class TestGenerator:
    def test_deterministic(self):
        a, b = generate_scene(easy_tier(), seed=5), generate_scene(easy_tier(), seed=5)
        assert a.rgb.tobytes() == b.rgb.tobytes()
        assert a.depth.tobytes() == b.depth.tobytes()
        assert a.gt_labels.tobytes() == b.gt_labels.tobytes()
        assert a.camera.rotation.tobytes() == b.camera.rotation.tobytes()

    def test_seeds_differ(self):
        a, b = generate_scene(easy_tier(), seed=5), generate_scene(easy_tier(), seed=6)
        assert a.depth.tobytes() != b.depth.tobytes()

    def test_empty_room(self):
        sample = generate_scene(easy_tier(object_count=(0, 0), panel_count=(0, 0)), seed=1)
        assert set(np.unique(sample.gt_labels)) <= {0, 1, 2, 3}

    def test_labels_in_range_and_counts(self):
        for seed in range(5):
            sample = generate_scene(skewed_tier(), seed=seed)
            assert sample.gt_labels.max() <= 11
            np.testing.assert_array_equal(np.bincount(sample.gt_labels.ravel(), minlength=12),
                                          sample.class_counts)

    @pytest.mark.parametrize("seed", range(4))
    def test_depth_matches_ray_march(self, seed):
        spec = easy_tier(image_size=(32, 32), focal=20.0)
        sample = generate_scene(spec, seed=seed)
        exact, _ = render_depth(sample.camera, sample.boxes)
        np.testing.assert_allclose(exact, march_depth(sample.camera, sample.boxes, exact), atol=1e-6, rtol=0)
        # the stored depth is the millimetre quantisation of the exact one
        assert np.abs(sample.depth - exact).max() <= 0.0005 + 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_camera_outside_solids(self, seed):
        sample = generate_scene(skewed_tier(), seed=seed)
        assert not any(b.contains(sample.camera.center[None])[0] for b in sample.boxes)

    @pytest.mark.parametrize("seed", range(5))
    def test_label_geometry_consistency(self, seed):
        sample = generate_scene(skewed_tier(), seed=seed)
        centers = sample.grid.voxel_centers().reshape(sample.grid.dims + (3,))
        covered = np.zeros(sample.grid.dims, bool)
        for box in sample.boxes:
            covered |= box.contains(centers)
        assert np.array_equal(sample.gt_labels > 0, covered)
        # the last box painted over a voxel determines its label
        last = np.zeros(sample.grid.dims, np.uint8)
        for box in sample.boxes:
            last[box.contains(centers)] = box.label
        np.testing.assert_array_equal(sample.gt_labels, last)

    def test_skew_monotone(self):
        skews = [0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0]
        entropy = [object_share_entropy(s) for s in skews]
        rho, _ = spearmanr(skews, entropy)
        assert -rho > 0.9

    def test_class_probabilities(self):
        np.testing.assert_allclose(class_probabilities(0.0), 1 / len(OBJECT_CLASS_ORDER))
        p = class_probabilities(1.0)
        assert np.all(np.diff(p) < 0) and p.sum() == pytest.approx(1.0)

    def test_invalid_spec(self):
        with pytest.raises(InvalidSpec):
            generate_scene(easy_tier(skew=-1.0))
        with pytest.raises(InvalidSpec):
            generate_scene(easy_tier(object_count=(3, 1)))
        with pytest.raises(InvalidSpec):
            generate_scene(easy_tier(shell_thickness=3.0))

    def test_rgb_range(self):
        sample = generate_scene(skewed_tier(), seed=3)
        assert sample.rgb.min() >= 0 and sample.rgb.max() <= 1 and sample.rgb.dtype == np.float32


class TestPrepare:
    def test_majority_pooling(self):
        labels = np.zeros((4, 4, 4), np.uint8)
        labels[:2] = 3
        labels[2:, :2] = 5  # 3 -> 32 voxels, 5 -> 16, 0 -> 16
        coarse, valid = downsample_labels(labels, np.zeros((4, 4, 4), np.uint8))
        assert coarse.item() == 3 and valid.item()

    def test_tie_smallest_class(self):
        labels = np.zeros((4, 4, 4), np.uint8)
        labels[:2] = 7
        labels[2:] = 4
        coarse, _ = downsample_labels(labels, np.zeros((4, 4, 4), np.uint8))
        assert coarse.item() == 4

    def test_outside_majority_masked(self):
        states = np.full((4, 4, 4), Visibility.OUTSIDE_FRUSTUM, np.uint8)
        states[:1] = Visibility.OCCLUDED
        _, valid = downsample_labels(np.ones((4, 4, 4), np.uint8), states)
        assert not valid.item()

    def test_pool_visibility(self):
        states = np.full((4, 4, 4), Visibility.VISIBLE_EMPTY, np.uint8)
        states[0, 0, 0] = Visibility.SURFACE
        assert pool_visibility(states).item() == Visibility.SURFACE

    def test_prepared_shapes(self):
        sample = generate_scene(easy_tier(), seed=2)
        prep = prepare(sample)
        assert prep.ftsdf.shape == (1, 24, 16, 24)
        assert prep.labels3d.shape == prep.valid3d.shape == (6, 4, 6)
        assert prep.pixel_index.shape == (sample.depth.size,)
        assert prep.labels2d.shape == sample.depth.shape
        assert prep.pixel_index.max() < sample.grid.n_voxels


class TestSplits:
    def test_example(self):
        folds = kfold_split(6, 3, seed=0)
        vals = [v for _, v in folds]
        assert [len(v) for v in vals] == [2, 2, 2]
        assert sorted(np.concatenate(vals).tolist()) == list(range(6))

    @settings(max_examples=100, deadline=None)
    @given(n=st.integers(2, 300), k=st.integers(2, 10), seed=st.integers(0, 1000))
    def test_partition_laws(self, n, k, seed):
        if n < k:
            with pytest.raises(InvalidK):
                kfold_split(n, k, seed)
            return
        folds = kfold_split(n, k, seed)
        vals = [v for _, v in folds]
        sizes = [len(v) for v in vals]
        assert max(sizes) - min(sizes) <= 1
        assert np.array_equal(np.sort(np.concatenate(vals)), np.arange(n))
        for train, val in folds:
            assert not set(train) & set(val) and len(train) + len(val) == n
        again = kfold_split(n, k, seed)
        assert all(np.array_equal(a[1], b[1]) for a, b in zip(folds, again))

    def test_invalid(self):
        with pytest.raises(InvalidK):
            kfold_split(10, 1)


class TestEarlyStop:
    def test_improving_never_stops(self):
        state = TrainState()
        assert all(early_stop(state, float(e), 15) is StopDecision.CONTINUE for e in range(100))

    def test_flat_stops_at_patience(self):
        state = TrainState()
        decisions = [early_stop(state, 50.0, 15) for _ in range(16)]
        assert decisions[:15] == [StopDecision.CONTINUE] * 15
        assert decisions[15] is StopDecision.STOP
        assert state.best_epoch == 0 and state.epochs_since_improvement == 15

    def test_late_improvement_resets(self):
        state = TrainState()
        early_stop(state, 50.0)
        for _ in range(13):
            early_stop(state, 40.0)
        assert state.epochs_since_improvement == 13
        assert early_stop(state, 50.5) is StopDecision.CONTINUE
        assert state.epochs_since_improvement == 0 and state.best_epoch == 14

    def test_equal_is_not_improvement(self):
        state = TrainState()
        early_stop(state, 10.0, 2)
        early_stop(state, 10.0, 2)
        assert early_stop(state, 10.0, 2) is StopDecision.STOP

    def test_bad_patience(self):
        with pytest.raises(ValueError):
            early_stop(TrainState(), 1.0, 0)


class TestIo:
    def test_sample_round_trip(self, tmp_path):
        sample = generate_scene(skewed_tier(), seed=4, sample_id="s4")
        paths = save_sample(sample, tmp_path)
        back = load_sample(paths)
        assert back.sample_id == "s4"
        assert back.rgb.tobytes() == sample.rgb.tobytes()
        assert back.depth.tobytes() == sample.depth.tobytes()
        assert back.gt_labels.tobytes() == sample.gt_labels.tobytes()
        assert back.grid == sample.grid
        for attr in ("fx", "fy", "cx", "cy"):
            assert getattr(back.camera, attr) == getattr(sample.camera, attr)
        assert back.camera.rotation.tobytes() == sample.camera.rotation.tobytes()
        assert back.camera.translation.tobytes() == sample.camera.translation.tobytes()
        assert back.ftsdf.values.tobytes() == sample.ftsdf.values.tobytes()

    def test_manifest(self, tmp_path):
        entries = [save_sample(generate_scene(easy_tier(), seed=s, sample_id=f"m{s}"), tmp_path / "samples")
                   for s in range(2)]
        write_manifest(tmp_path / "manifest.txt", entries)
        text = (tmp_path / "manifest.txt").read_text()
        assert "samples/m0_rgb.png samples/m0_depth.png samples/m0_labels.vxg samples/m0_camera.txt" in text
        assert read_manifest(tmp_path / "manifest.txt") == entries
        assert [s.sample_id for s in load_dataset(tmp_path / "manifest.txt")] == ["m0", "m1"]

    def test_bad_manifest_line(self, tmp_path):
        (tmp_path / "m.txt").write_text("a b c\n")
        with pytest.raises(FormatViolation):
            read_manifest(tmp_path / "m.txt")

    @pytest.mark.parametrize("dtype", [np.uint8, np.float32, np.float64])
    def test_vxg_round_trip(self, tmp_path, dtype):
        spec = GridSpec((3, 2, 4), (0.5, -1.0, 2.0), 0.1, 0.3)
        values = (np.random.default_rng(0).random((2, 3, 2, 4)) * 100).astype(dtype)
        write_vxg(tmp_path / "g.vxg", VoxelGrid(spec, values))
        back = read_vxg(tmp_path / "g.vxg")
        assert back.spec == spec and back.values.dtype == dtype
        assert back.values.tobytes() == values.tobytes()

    def test_vxg_truncated(self, tmp_path):
        write_vxg(tmp_path / "g.vxg", VoxelGrid(GridSpec((2, 2, 2)), np.zeros((1, 2, 2, 2), np.float32)))
        raw = (tmp_path / "g.vxg").read_bytes()
        (tmp_path / "t.vxg").write_bytes(raw[:-3])
        with pytest.raises(FormatViolation):
            read_vxg(tmp_path / "t.vxg")
        (tmp_path / "h.vxg").write_bytes(raw[:10])
        with pytest.raises(FormatViolation):
            read_vxg(tmp_path / "h.vxg")

    def test_vxg_bad_magic(self, tmp_path):
        (tmp_path / "g.vxg").write_bytes(b"VXG2" + b"\0" * 40)
        with pytest.raises(FormatViolation):
            read_vxg(tmp_path / "g.vxg")

    def test_depth_unit(self, tmp_path):
        Image.fromarray(np.array([[2500, 0]], np.uint16)).save(tmp_path / "d.png")
        np.testing.assert_array_equal(read_depth_png(tmp_path / "d.png"), [[2.5, 0.0]])

    def test_camera_file(self, tmp_path):
        cam = generate_scene(easy_tier(), seed=1).camera
        write_camera(tmp_path / "c.txt", cam)
        back = read_camera(tmp_path / "c.txt", cam.image_width, cam.image_height)
        np.testing.assert_array_equal(back.rotation, cam.rotation)
        (tmp_path / "bad.txt").write_text("1 2 3\n")
        with pytest.raises(FormatViolation):
            read_camera(tmp_path / "bad.txt", 4, 4)
