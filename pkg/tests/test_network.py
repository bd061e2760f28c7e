"""Model assembly, variant equivalences, parameter init, checkpoints."""

import numpy as np
import pytest

from dcomp import losses as LS
from dcomp import network as N
from dcomp import tensor as T
from dcomp.errors import ConfigError, FormatError
from dcomp.tensor import Tensor

SMALL = N.NetworkConfig(
    variant="2es-1dp", stage_channels=(8, 12), blocks_per_stage=1, depth_range=(0.1, 100.0)
)


def random_inputs(rng, h=16, w=16, n=1, sparse_frac=0.1):
    image = rng.uniform(size=(n, 3, h, w)).astype(np.float32)
    depth = np.zeros((n, 1, h, w), dtype=np.float32)
    mask = (rng.uniform(size=(n, 1, h, w)) < sparse_frac).astype(np.float32)
    depth[mask > 0] = rng.uniform(1.0, 8.0, size=int(mask.sum())).astype(np.float32)
    return Tensor(image), Tensor(depth), Tensor(mask)


class TestInvDepthMapping:
    def test_boundaries(self):
        lo = N.invdepth_to_depth(Tensor(np.array([1e-9])), 0.1, 100.0)
        hi = N.invdepth_to_depth(Tensor(np.array([1.0 - 1e-9])), 0.1, 100.0)
        assert abs(lo.data[0] - 100.0) < 1e-3
        assert abs(hi.data[0] - 0.1) < 1e-7

    def test_hand_value_at_half(self):
        # id = 0.01 + 9.99 * 0.5 = 5.005 -> D = 1/5.005 ~ 0.1998 m
        out = N.invdepth_to_depth(Tensor(np.array([0.5])), 0.1, 100.0)
        np.testing.assert_allclose(out.data[0], 1.0 / 5.005, rtol=1e-12)
        assert abs(out.data[0] - 0.1998) < 1e-4

    def test_differentiable(self):
        x = Tensor(np.array([0.3, 0.6]), dtype=np.float64)
        err = T.finite_difference_check(
            lambda t: T.reduce_sum(N.invdepth_to_depth(t, 0.1, 100.0)), x
        )
        assert err < 1e-7


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            N.NetworkConfig(variant="nope")
        with pytest.raises(ConfigError):
            N.NetworkConfig(stage_channels=(8,))
        with pytest.raises(ConfigError):
            N.NetworkConfig(pac_kernel=4)
        with pytest.raises(ConfigError):
            N.NetworkConfig(depth_range=(2.0, 1.0))

    def test_json_round_trip(self):
        cfg = N.NetworkConfig(variant="2e-1d", stage_channels=(4, 8, 16))
        assert N.NetworkConfig.from_json(cfg.to_json()) == cfg


class TestForward:
    @pytest.mark.parametrize("variant", N.VARIANTS)
    def test_shape_and_range_contract(self, variant):
        cfg = N.NetworkConfig(variant=variant, stage_channels=(6, 8), blocks_per_stage=1)
        net = N.DepthCompletionNet(cfg, seed=0)
        rng = np.random.default_rng(0)
        image, depth, mask = random_inputs(rng, h=16, w=12)
        out = net.forward(image, depth, mask)
        assert out.values.shape == (1, 1, 16, 12)
        assert (out.values.data > 0).all() and (out.values.data < 1).all()
        metric = out.to_depth()
        assert (metric.data >= 0.1 - 1e-6).all() and (metric.data <= 100.0 + 1e-4).all()

    def test_all_zero_sparse_input_runs(self):
        net = N.DepthCompletionNet(SMALL, seed=1)
        rng = np.random.default_rng(1)
        image, _, _ = random_inputs(rng)
        zeros = Tensor(np.zeros((1, 1, 16, 16), dtype=np.float32))
        out = net.forward(image, zeros, zeros)
        assert np.isfinite(out.values.data).all()

    def test_indivisible_resolution_rejected(self):
        net = N.DepthCompletionNet(SMALL, seed=0)
        rng = np.random.default_rng(2)
        image, depth, mask = random_inputs(rng, h=15, w=16)
        with pytest.raises(ConfigError):
            net.forward(image, depth, mask)

    def test_constant_guidance_variant_equivalence(self):
        # With a constant RGB image the PAC kernel degenerates, so 2es-1dp
        # and 2es-1d agree given shared weights.
        cfg_pac = N.NetworkConfig(variant="2es-1dp", stage_channels=(6, 8), blocks_per_stage=1)
        cfg_std = N.NetworkConfig(variant="2es-1d", stage_channels=(6, 8), blocks_per_stage=1)
        store = N.init_parameters(cfg_pac, seed=3)
        net_pac = N.DepthCompletionNet(cfg_pac, store=store)
        net_std = N.DepthCompletionNet(cfg_std, store=store.copy())
        rng = np.random.default_rng(3)
        _, depth, mask = random_inputs(rng)
        image = Tensor(np.full((1, 3, 16, 16), 0.42, dtype=np.float32))
        out_pac = net_pac.forward(image, depth, mask)
        out_std = net_std.forward(image, depth, mask)
        np.testing.assert_allclose(out_pac.values.data, out_std.values.data, atol=1e-6)

    def test_forward_is_pure(self):
        net = N.DepthCompletionNet(SMALL, seed=4)
        rng = np.random.default_rng(4)
        image, depth, mask = random_inputs(rng)
        a = net.forward(image, depth, mask).values.data
        b = net.forward(image, depth, mask).values.data
        np.testing.assert_array_equal(a, b)

    def test_batched_forward(self):
        net = N.DepthCompletionNet(SMALL, seed=5)
        rng = np.random.default_rng(5)
        image, depth, mask = random_inputs(rng, n=3)
        out = net.forward(image, depth, mask)
        assert out.values.shape == (3, 1, 16, 16)


class TestInit:
    def test_seed_determinism(self):
        a = N.init_parameters(SMALL, seed=7)
        b = N.init_parameters(SMALL, seed=7)
        assert a.names() == b.names()
        for name in a.names():
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_different_seeds_differ(self):
        a = N.init_parameters(SMALL, seed=7)
        b = N.init_parameters(SMALL, seed=8)
        assert any(
            not np.array_equal(a[name].data, b[name].data) for name in a.names()
        )

    def test_initial_mean_depth_sane(self):
        net = N.DepthCompletionNet(SMALL, seed=9)
        rng = np.random.default_rng(9)
        image, depth, mask = random_inputs(rng)
        metric = net.forward(image, depth, mask).to_depth()
        assert 1.0 <= metric.data.mean() <= 10.0

    def test_gradient_reaches_every_parameter(self):
        net = N.DepthCompletionNet(SMALL, seed=10)
        rng = np.random.default_rng(10)
        image, depth, mask = random_inputs(rng, sparse_frac=0.3)
        out = net.forward(image, depth, mask)
        pred_depth = out.to_depth()
        photo = T.reduce_mean(T.mul(out.values, out.values))  # stand-in photometric
        depth_term = LS.sparse_depth_loss(pred_depth, depth.data, mask.data > 0)
        smooth = LS.smoothness_loss(out.values, image)
        total, _ = LS.total_loss(photo, depth_term, smooth, LS.LossWeights())
        T.backward(total)
        for name, tensor in net.store.items():
            assert tensor.grad is not None, f"no grad for {name}"
            assert np.linalg.norm(tensor.grad) > 0, f"zero grad for {name}"


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        store = N.init_parameters(SMALL, seed=11)
        path = tmp_path / "model.dfck"
        N.save_checkpoint(path, store, SMALL)
        loaded, cfg = N.load_checkpoint(path)
        assert cfg == SMALL
        assert loaded.names() == store.names()
        for name in store.names():
            np.testing.assert_array_equal(loaded[name].data, store[name].data)

    def test_corrupted_header(self, tmp_path):
        path = tmp_path / "bad.dfck"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(FormatError):
            N.load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        store = N.init_parameters(SMALL, seed=12)
        path = tmp_path / "v.dfck"
        N.save_checkpoint(path, store, SMALL)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            N.load_checkpoint(path)

    def test_truncation(self, tmp_path):
        store = N.init_parameters(SMALL, seed=13)
        path = tmp_path / "t.dfck"
        N.save_checkpoint(path, store, SMALL)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError):
            N.load_checkpoint(path)

    def test_wrong_config_names_parameter(self, tmp_path):
        store = N.init_parameters(SMALL, seed=14)
        path = tmp_path / "w.dfck"
        N.save_checkpoint(path, store, SMALL)
        loaded, _ = N.load_checkpoint(path)
        other = N.NetworkConfig(variant="2es-1dp", stage_channels=(8, 16), blocks_per_stage=1)
        with pytest.raises(FormatError) as err:
            N.DepthCompletionNet(other, store=loaded)
        assert "parameter" in str(err.value)
