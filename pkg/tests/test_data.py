"""Synthetic renderer, sparse sampling, PNG formats, and manifest tests."""

import numpy as np
import pytest

from dcomp import data as D
from dcomp import geometry as G
from dcomp import losses as LS
from dcomp.errors import DataError, FormatError
from dcomp.tensor import Tensor


def depth_boundary_mask(depth, curv_tol=1e-3):
    """Pixels near depth discontinuities (occlusion boundaries), dilated.

    Inverse depth is exactly linear in pixel coordinates on a plane, so
    its second difference is ~0 on smooth surfaces and spikes at surface
    boundaries regardless of slope.
    """
    inv = 1.0 / np.maximum(depth, 1e-6)
    jump = np.zeros_like(depth, dtype=bool)
    d2x = np.abs(inv[:, 2:] - 2 * inv[:, 1:-1] + inv[:, :-2]) > curv_tol
    d2y = np.abs(inv[2:, :] - 2 * inv[1:-1, :] + inv[:-2, :]) > curv_tol
    jump[:, 1:-1] |= d2x
    jump[1:-1, :] |= d2y
    for _ in range(2):  # dilate
        grown = jump.copy()
        grown[1:, :] |= jump[:-1, :]
        grown[:-1, :] |= jump[1:, :]
        grown[:, 1:] |= jump[:, :-1]
        grown[:, :-1] |= jump[:, 1:]
        jump = grown
    return jump


class TestRenderScene:
    def test_fronto_parallel_plane_constant_depth(self):
        k = G.CameraIntrinsics(100.0, 100.0, 31.5, 23.5, 64, 48)
        spec = D.SceneSpec(
            seed=0,
            rects=[D.Rect(axis=2, offset=2.0, lo=(-5, -5), hi=(5, 5), texture=1)],
            trajectory=[G.PoseSE3.identity()],
            intrinsics=k,
        )
        frame = D.render_scene(spec)[0]
        np.testing.assert_allclose(frame.depth, 2.0, atol=1e-12)

    def test_deterministic_per_seed(self):
        spec1 = D.make_scene_spec("planes", seed=5, frames=2, width=64, height=48)
        spec2 = D.make_scene_spec("planes", seed=5, frames=2, width=64, height=48)
        f1 = D.render_scene(spec1)
        f2 = D.render_scene(spec2)
        for a, b in zip(f1, f2):
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.depth, b.depth)

    def test_closed_room_fully_covered(self):
        spec = D.make_scene_spec("planes", seed=1, frames=3, width=64, height=48)
        for frame in D.render_scene(spec):
            assert (frame.depth > 0).all()
            assert frame.depth.max() < 10.0

    def test_degenerate_spec_rejected(self):
        k = G.CameraIntrinsics(10.0, 10.0, 4.0, 4.0, 8, 8)
        with pytest.raises(DataError):
            D.render_scene(D.SceneSpec(seed=0, rects=[], trajectory=[], intrinsics=k))

    def test_cross_view_photometric_consistency(self):
        # Warping frame B into frame A through A's GT depth must reproduce
        # A's image away from occlusion boundaries.
        spec = D.make_scene_spec("planes", seed=2, frames=6, width=96, height=80)
        frames = D.render_scene(spec)
        a, b = frames[2], frames[3]
        rel = G.relative_pose(a.pose, b.pose)
        depth = Tensor(a.depth[None, None].astype(np.float64))
        synth, valid = G.synthesize_view(
            Tensor(b.image[None].astype(np.float64)), depth, spec.intrinsics, rel
        )
        err = np.abs(synth.data[0] - a.image).mean(axis=0)
        keep = valid[0, 0] & ~depth_boundary_mask(a.depth)
        assert keep.mean() > 0.5
        assert err[keep].mean() < 1e-3

    def test_mover_scene_moves(self):
        spec = D.make_scene_spec("mover", seed=3, frames=3, width=64, height=48)
        frames = D.render_scene(spec)
        diff = np.abs(frames[0].depth - frames[2].depth)
        assert (diff > 0.01).any()

    def test_textureless_scene_is_flat(self):
        spec = D.make_scene_spec("textureless", seed=4, frames=1, width=64, height=48)
        frame = D.render_scene(spec)[0]
        # The image center looks at the back wall: constant color there.
        assert np.ptp(frame.image[:, 20:28, 28:36]) < 1e-9


class TestSampling:
    @staticmethod
    def ramp_depth(h=48, w=64):
        return np.linspace(1.0, 5.0, h * w).reshape(h, w)

    def test_full_sampling(self):
        depth = self.ramp_depth(8, 8)
        sd = D.sample_uniform(depth, 64, seed=0)
        assert sd.count == 64
        np.testing.assert_array_equal(sd.depth, depth)

    def test_exact_count_500(self):
        sd = D.sample_uniform(self.ramp_depth(), 500, seed=1)
        assert sd.count == 500

    def test_seeded_reproducible(self):
        d = self.ramp_depth()
        a = D.sample_uniform(d, 100, seed=9)
        b = D.sample_uniform(d, 100, seed=9)
        np.testing.assert_array_equal(a.valid, b.valid)

    def test_oversampling_rejected(self):
        with pytest.raises(DataError):
            D.sample_uniform(self.ramp_depth(4, 4), 17, seed=0)

    def test_scanline_coverage_band(self):
        spec = D.make_scene_spec("planes", seed=6, frames=1, width=160, height=128)
        frame = D.render_scene(spec)[0]
        sd = D.sample_scanlines(frame.depth, 16, spec.intrinsics, seed=0)
        coverage = sd.count / frame.depth.size
        assert 0.05 <= coverage <= 0.25
        # Roughly 16 distinct jittered bands.
        rows_hit = np.unique(np.nonzero(sd.valid)[0])
        assert 10 <= len(rows_hit) <= 70

    def test_scanlines_empty_input(self):
        k = G.CameraIntrinsics(50.0, 50.0, 16.0, 16.0, 32, 32)
        sd = D.sample_scanlines(np.zeros((32, 32)), 8, k, seed=0)
        assert sd.count == 0

    def test_dense_scanlines_near_full(self):
        spec = D.make_scene_spec("planes", seed=7, frames=1, width=64, height=48)
        frame = D.render_scene(spec)[0]
        sd = D.sample_scanlines(frame.depth, 48, spec.intrinsics, seed=0)
        assert sd.count / frame.depth.size > 0.5


class TestSparseDepthMapInvariants:
    def test_valid_requires_positive(self):
        with pytest.raises(DataError):
            D.SparseDepthMap(depth=np.zeros((2, 2)), valid=np.ones((2, 2), dtype=bool))

    def test_invalid_requires_zero(self):
        depth = np.full((2, 2), 3.0)
        with pytest.raises(DataError):
            D.SparseDepthMap(depth=depth, valid=np.zeros((2, 2), dtype=bool))


class TestDepthPng:
    def test_round_trip_millimeters(self, tmp_path):
        depth = np.zeros((4, 5))
        depth[1, 2] = 1.234
        depth[3, 3] = 7.0
        path = tmp_path / "d.png"
        D.save_depth_png16(path, depth)
        loaded = D.load_depth_png16(path)
        assert loaded.depth[1, 2] == 1.234
        assert loaded.depth[3, 3] == 7.0
        assert not loaded.valid[0, 0]

    def test_zero_is_invalid(self, tmp_path):
        path = tmp_path / "z.png"
        D.save_depth_png16(path, np.zeros((3, 3)))
        assert D.load_depth_png16(path).count == 0

    def test_clamp_with_warning(self, tmp_path, caplog):
        path = tmp_path / "c.png"
        with caplog.at_level("WARNING"):
            D.save_depth_png16(path, np.full((2, 2), 70.0))
        assert "clamped" in caplog.text
        assert D.load_depth_png16(path).depth.max() == 65.535

    def test_wrong_format_rejected(self, tmp_path):
        path = tmp_path / "rgb.png"
        D.save_image_png(path, np.zeros((3, 4, 4)))
        with pytest.raises(FormatError):
            D.load_depth_png16(path)

    def test_lossless_for_whole_millimeters(self, tmp_path):
        rng = np.random.default_rng(0)
        mm = rng.integers(1, 65535, size=(6, 6))
        depth = mm / 1000.0
        path = tmp_path / "r.png"
        D.save_depth_png16(path, depth)
        np.testing.assert_array_equal(D.load_depth_png16(path).depth, depth)


class TestDatasetRoundTrip:
    def test_write_build_load(self, tmp_path):
        spec = D.make_scene_spec("planes", seed=8, frames=3, width=64, height=48)
        root = D.write_dataset(tmp_path / "ds", spec, sparse_points=120, write_gt_poses=True)
        manifest = D.build_manifest(root)
        assert len(manifest) == 3
        assert manifest.poses is not None and len(manifest.poses) == 3
        triplet = D.load_triplet(manifest, 1, load_gt=True)
        frames = D.render_scene(spec)
        # Quantization-bound equality: +-0.5 mm depth, +-1/255 color.
        assert np.abs(triplet.image - frames[1].image).max() <= 1.0 / 255.0 + 1e-9
        gt = triplet.gt
        assert gt is not None
        np.testing.assert_allclose(gt.depth, frames[1].depth, atol=5.1e-4)
        assert triplet.sparse.count == 120
        # Relative poses match the generating trajectory.
        want = G.relative_pose(frames[1].pose, frames[0].pose)
        np.testing.assert_allclose(triplet.poses[0].rotation, want.rotation, atol=1e-12)
        np.testing.assert_allclose(triplet.poses[0].translation, want.translation, atol=1e-12)

    def test_three_frames_single_triplet(self, tmp_path):
        spec = D.make_scene_spec("planes", seed=9, frames=3, width=64, height=48)
        root = D.write_dataset(tmp_path / "ds", spec, sparse_points=50, write_gt_poses=True)
        manifest = D.build_manifest(root)
        assert D.load_triplet(manifest, 1) is not None
        for bad in (0, 2):
            with pytest.raises(DataError):
                D.load_triplet(manifest, bad)

    def test_missing_sparse_named_in_error(self, tmp_path):
        spec = D.make_scene_spec("planes", seed=10, frames=2, width=64, height=48)
        root = D.write_dataset(tmp_path / "ds", spec, sparse_points=50)
        victim = root / "sparse" / "000001.png"
        victim.unlink()
        with pytest.raises(DataError) as err:
            D.build_manifest(root)
        assert "000001.png" in str(err.value)

    def test_missing_poses_triplet_error(self, tmp_path):
        spec = D.make_scene_spec("planes", seed=11, frames=3, width=64, height=48)
        root = D.write_dataset(tmp_path / "ds", spec, sparse_points=50)
        manifest = D.build_manifest(root)
        with pytest.raises(DataError):
            D.load_triplet(manifest, 1)


class TestAutomaskOnSyntheticScenes:
    def test_static_sequence_fully_masked(self):
        # A genuinely static pair (same pose) must be ~fully auto-masked.
        spec = D.make_scene_spec("planes", seed=12, frames=2, width=64, height=48)
        spec.trajectory[1] = spec.trajectory[0]
        frames = D.render_scene(spec)
        target = Tensor(frames[0].image[None])
        source = Tensor(frames[1].image[None])
        depth = Tensor(frames[0].depth[None, None])
        synth, valid = G.synthesize_view(source, depth, spec.intrinsics, G.PoseSE3.identity())
        res = LS.min_reprojection(target, [(synth, valid)], [source])
        assert res.coverage <= 0.01

    def test_moving_object_gets_masked(self):
        spec = D.make_scene_spec("mover", seed=13, frames=3, width=96, height=72)
        frames = D.render_scene(spec)
        a, b = frames[0], frames[1]
        rel = G.relative_pose(a.pose, b.pose)
        depth = Tensor(a.depth[None, None])
        synth, valid = G.synthesize_view(Tensor(b.image[None]), depth, spec.intrinsics, rel)
        res = LS.min_reprojection(Tensor(a.image[None]), [(synth, valid)], [Tensor(b.image[None])])
        # Geometry-consistent pixels keep supervision; the mover region
        # (depth changed between the frames) is mostly masked out.
        moved = np.abs(frames[0].depth - D.render_frame(spec, 1).depth) > 0.05
        if moved.any():
            moved_cov = res.automask[0, 0][moved].mean()
            static_cov = res.automask[0, 0][~moved & valid[0, 0]].mean()
            assert static_cov > moved_cov
