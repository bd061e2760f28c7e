"""Optimization: bias-corrected Adam, step-halving schedule, the training
step over frame triplets, the epoch loop, and the gradient-check harness
used as the release gate.

Determinism contract: with a fixed seed, single-threaded training produces
bit-identical checkpoints run to run. Parameters live in float32; gradient
checks run the whole stack in float64.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import geometry as G
from . import layers as L
from . import losses as LS
from . import network as N
from . import tensor as T
from .errors import DataError, NumericalError
from .losses import LossReport, LossWeights
from .network import DepthCompletionNet, NetworkConfig, ParameterStore
from .tensor import Tensor

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr0: float = 1e-4
    halve_every: int = 10
    seed: int = 0
    clip_norm: float = 10.0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr0 <= 0 or self.halve_every <= 0:
            raise DataError("TrainConfig values must be positive")


class OptimizerState:
    """Per-parameter Adam moment buffers plus the shared step counter."""

    def __init__(self, store: ParameterStore, lr: float):
        self.lr = lr
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in store.items()}


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Initial rate halved every `halve_every` epochs."""
    return config.lr0 * 0.5 ** (epoch // config.halve_every)


def clip_gradients(store: ParameterStore, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most `max_norm`."""
    total = 0.0
    for _, t in store.items():
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for _, t in store.items():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


def adam_step(store: ParameterStore, state: OptimizerState) -> None:
    """Bias-corrected Adam update over every parameter with a gradient."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, param in store.items():
        g = param.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        update = (state.lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)).astype(
            param.data.dtype
        )
        param.data = param.data - update


# ---------------------------------------------------------------------------
# Training step over frame triplets
# ---------------------------------------------------------------------------


def _collate(batch: list[D.FrameTriplet], dtype=np.float32):
    images = Tensor(np.stack([t.image for t in batch]).astype(dtype))
    sparse = Tensor(np.stack([t.sparse.depth[None] for t in batch]).astype(dtype))
    mask = Tensor(np.stack([t.sparse.valid[None] for t in batch]).astype(dtype))
    sources = []
    for s in range(len(batch[0].source_images)):
        src = Tensor(np.stack([t.source_images[s] for t in batch]).astype(dtype))
        poses = [t.poses[s] for t in batch]
        sources.append((src, poses))
    return images, sparse, mask, sources


def triplet_loss(
    net: DepthCompletionNet,
    batch: list[D.FrameTriplet],
    weights: LossWeights,
    dtype=np.float32,
) -> tuple[Tensor, LossReport]:
    """Forward the batch and assemble the full objective graph."""
    images, sparse, mask, sources = _collate(batch, dtype)
    k = batch[0].intrinsics
    inv = net.forward(images, sparse, mask)
    pred_depth = inv.to_depth()

    warped = []
    for src, poses in sources:
        synth, valid = G.synthesize_view(src, pred_depth, k, poses)
        warped.append((synth, valid))
    reproj = LS.min_reprojection(
        images, warped, [src for src, _ in sources], alpha=weights.alpha
    )
    depth_term = LS.sparse_depth_loss(pred_depth, sparse.data, mask.data > 0)
    smooth_term = LS.smoothness_loss(inv.values, images)

    warnings = []
    if reproj.empty:
        warnings.append("auto-mask empty: photometric term skipped")
    if mask.data.sum() == 0:
        warnings.append("no sparse depth in batch")
    total, report = LS.total_loss(
        reproj.loss,
        depth_term,
        smooth_term,
        weights,
        automask_coverage=reproj.coverage,
        warnings=tuple(warnings),
    )
    for term, value in (("photo", report.photo), ("depth", report.depth), ("smooth", report.smooth)):
        if not np.isfinite(value):
            raise NumericalError(f"loss term {term!r} is not finite")
    return total, report


def train_step(
    net: DepthCompletionNet,
    batch: list[D.FrameTriplet],
    state: OptimizerState,
    config: TrainConfig,
) -> LossReport:
    net.store.zero_grads()
    total, report = triplet_loss(net, batch, config.weights)
    T.backward(total)
    clip_gradients(net.store, config.clip_norm)
    adam_step(net.store, state)
    return report


class _FrameCache:
    """Keeps decoded triplets in memory; datasets here are desk-scale."""

    def __init__(self, manifest: D.DatasetManifest):
        self.manifest = manifest
        self._triplets: dict[int, D.FrameTriplet] = {}

    def triplet(self, index: int) -> D.FrameTriplet:
        if index not in self._triplets:
            self._triplets[index] = D.load_triplet(self.manifest, index)
        return self._triplets[index]


def train(
    manifest: D.DatasetManifest,
    net: DepthCompletionNet,
    config: TrainConfig,
    out_dir,
    log_name: str = "train_log.jsonl",
    frame_stride: int = 1,
) -> Path:
    """Full training loop; writes per-epoch checkpoints and a JSONL log.

    Returns the path of the final checkpoint. Triplets that cannot be
    assembled (sequence boundaries, missing poses) are skipped and logged,
    not imputed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = _FrameCache(manifest)
    candidates = list(range(1, len(manifest.frames) - 1, frame_stride))
    usable = []
    for idx in candidates:
        try:
            cache.triplet(idx)
            usable.append(idx)
        except DataError as exc:
            log.warning("skipping triplet %d: %s", idx, exc)
    if not usable:
        raise DataError("no usable triplets in dataset")

    state = OptimizerState(net.store, lr=config.lr0)
    log_path = out / log_name
    final = out / "checkpoint_final.dfck"
    t0 = time.time()
    with open(log_path, "w") as logf:
        step = 0
        for epoch in range(config.epochs):
            state.lr = lr_at(epoch, config)
            rng = np.random.default_rng(config.seed + 7919 * epoch)
            order = rng.permutation(usable)
            for lo in range(0, len(order), config.batch_size):
                batch = [cache.triplet(i) for i in order[lo : lo + config.batch_size]]
                report = train_step(net, batch, state, config)
                record = {"epoch": epoch, "step": step, "lr": state.lr}
                record.update(report.to_dict())
                logf.write(json.dumps(record) + "\n")
                step += 1
            for _, t in net.store.items():
                if np.abs(t.data).max() > 1e3:
                    raise NumericalError("parameter magnitude exploded past 1e3")
            N.save_checkpoint(out / f"checkpoint_epoch{epoch:03d}.dfck", net.store, net.config)
            logf.flush()
        N.save_checkpoint(final, net.store, net.config)
    log.info("training finished in %.1fs (%d steps)", time.time() - t0, step)
    return final


# ---------------------------------------------------------------------------
# Gradient-check harness
# ---------------------------------------------------------------------------


@dataclass
class GradcheckRow:
    component: str
    max_rel_err: float
    threshold: float
    seeds: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold


@dataclass
class GradcheckReport:
    rows: list[GradcheckRow]
    elapsed_s: float

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.rows)

    def summary(self) -> str:
        lines = []
        for r in self.rows:
            status = "PASS" if r.passed else "FAIL"
            lines.append(
                f"[{status}] {r.component:<28} max_rel_err={r.max_rel_err:.3e}"
                f" (< {r.threshold:.0e}, {r.seeds} seeds)"
            )
        lines.append(f"gradcheck {'PASSED' if self.ok else 'FAILED'} in {self.elapsed_s:.1f}s")
        return "\n".join(lines)


GRAD_TOL = 1e-4


def _check_many(fn_factory, seeds: int, base_seed: int) -> float:
    worst = 0.0
    for s in range(seeds):
        f, x, exclude = fn_factory(np.random.default_rng(base_seed + s))
        err = T.finite_difference_check(f, x, step=1e-5, exclude=exclude, sample=48, seed=s)
        worst = max(worst, err)
    return worst


def _primitive_cases():
    def elementwise(build):
        def factory(rng):
            a = Tensor(rng.normal(size=(2, 3)), dtype=np.float64)
            c = Tensor(rng.normal(size=(2, 3)) + 3.0)
            return (lambda t: build(t, c)), a, None

        return factory

    return {
        "prim.add": elementwise(lambda t, c: T.reduce_mean(T.add(t, c))),
        "prim.sub": elementwise(lambda t, c: T.reduce_mean(T.sub(c, t))),
        "prim.mul": elementwise(lambda t, c: T.reduce_mean(T.mul(t, c))),
        "prim.div": elementwise(
            lambda t, c: T.reduce_mean(T.div(c, T.add(T.mul(t, t), 1.0)))
        ),
        "prim.abs": elementwise(
            lambda t, c: T.reduce_mean(T.absolute(T.add(t, 0.37)))
        ),
        "prim.exp": elementwise(lambda t, c: T.reduce_mean(T.exp(T.mul(t, 0.4)))),
        "prim.sigmoid": elementwise(lambda t, c: T.reduce_mean(T.sigmoid(t))),
        "prim.minimum": elementwise(lambda t, c: T.reduce_mean(T.minimum(t, c))),
        "prim.pow": elementwise(
            lambda t, c: T.reduce_mean(T.power(T.add(T.mul(t, t), 0.5), 1.3))
        ),
        "prim.sqrt": elementwise(
            lambda t, c: T.reduce_mean(T.sqrt(T.add(T.mul(t, t), 0.5)))
        ),
        "prim.mean": elementwise(lambda t, c: T.reduce_mean(T.mul(t, c))),
        "prim.masked_mean": elementwise(
            lambda t, c: T.masked_mean(t, np.array([[1, 0, 1], [0, 1, 1.0]]))
        ),
        "prim.conv2d": _conv_case,
        "prim.avg_pool_3x3": _pool_case,
        "prim.bilinear_sample": _bilinear_case,
        "prim.upsample": _upsample_case,
    }


def _conv_case(rng):
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), dtype=np.float64)
    w = Tensor(rng.normal(size=(2, 2, 3, 3)))
    b = Tensor(rng.normal(size=2))
    return (lambda t: T.reduce_mean(T.conv2d(t, w, b, 1, 1))), x, None


def _pool_case(rng):
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), dtype=np.float64)
    return (lambda t: T.reduce_mean(T.avg_pool_3x3(t))), x, None


def _bilinear_case(rng):
    src = Tensor(rng.normal(size=(1, 2, 6, 6)))
    u = rng.integers(0, 5, size=(1, 1, 3, 3)) + rng.uniform(0.2, 0.8, (1, 1, 3, 3))
    v = rng.integers(0, 5, size=(1, 1, 3, 3)) + rng.uniform(0.2, 0.8, (1, 1, 3, 3))
    valid = np.ones((1, 1, 3, 3), dtype=bool)

    def f(t):
        grid = G.WarpGrid(u=t, v=Tensor(v), valid=valid)
        return T.reduce_mean(G.bilinear_sample(src, grid))

    return f, Tensor(u, dtype=np.float64), None


def _upsample_case(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 4)), dtype=np.float64)
    return (lambda t: T.reduce_mean(T.upsample_nearest2(t))), x, None


def _layer_cases():
    def sparse_conv(rng):
        mask = (rng.uniform(size=(1, 1, 5, 5)) < 0.5).astype(np.float64)
        w = Tensor(rng.normal(size=(2, 2, 3, 3)))
        b = Tensor(rng.normal(size=2))
        x = Tensor(rng.normal(size=(1, 2, 5, 5)), dtype=np.float64)

        def f(t):
            sf = L.SparseFeature(feature=t, mask=Tensor(mask))
            return T.reduce_mean(L.sparse_conv_block(sf, w, b).feature)

        return f, x, None

    def sparse_conv_w(rng):
        mask = (rng.uniform(size=(1, 1, 5, 5)) < 0.5).astype(np.float64)
        feat = Tensor(rng.normal(size=(1, 2, 5, 5)))
        b = Tensor(rng.normal(size=2))
        w = Tensor(rng.normal(size=(2, 2, 3, 3)), dtype=np.float64)

        def f(t):
            sf = L.SparseFeature(feature=feat, mask=Tensor(mask))
            return T.reduce_mean(L.sparse_conv_block(sf, t, b).feature)

        return f, w, None

    def pac_v(rng):
        f_g = Tensor(rng.normal(size=(1, 2, 4, 4)))
        w = Tensor(rng.normal(size=(2, 2, 3, 3)))
        b = Tensor(rng.normal(size=2))
        v = Tensor(rng.normal(size=(1, 2, 4, 4)), dtype=np.float64)
        return (lambda t: T.reduce_mean(L.pac_conv(t, f_g, w, b, 3))), v, None

    def pac_f(rng):
        v = Tensor(rng.normal(size=(1, 2, 4, 4)))
        w = Tensor(rng.normal(size=(2, 2, 3, 3)))
        b = Tensor(rng.normal(size=2))
        f_g = Tensor(rng.normal(size=(1, 2, 4, 4)), dtype=np.float64)
        return (lambda t: T.reduce_mean(L.pac_conv(v, t, w, b, 3))), f_g, None

    def pac_w(rng):
        v = Tensor(rng.normal(size=(1, 2, 4, 4)))
        f_g = Tensor(rng.normal(size=(1, 2, 4, 4)))
        b = Tensor(rng.normal(size=2))
        w = Tensor(rng.normal(size=(2, 2, 3, 3)), dtype=np.float64)
        return (lambda t: T.reduce_mean(L.pac_conv(v, f_g, t, b, 3))), w, None

    def residual(rng):
        w1 = Tensor(rng.normal(size=(2, 2, 3, 3)) * 0.5)
        w2 = Tensor(rng.normal(size=(2, 2, 3, 3)) * 0.5)
        b = Tensor(np.zeros(2))
        x = Tensor(rng.normal(size=(1, 2, 5, 5)), dtype=np.float64)
        return (
            lambda t: T.reduce_mean(L.residual_block(t, w1, b, w2, b)),
            x,
            None,
        )

    return {
        "layer.sparse_conv.x": sparse_conv,
        "layer.sparse_conv.w": sparse_conv_w,
        "layer.pac.v": pac_v,
        "layer.pac.f": pac_f,
        "layer.pac.w": pac_w,
        "layer.residual": residual,
    }


def _loss_cases():
    def ssim(rng):
        a = Tensor(rng.uniform(0.2, 0.8, size=(1, 2, 6, 6)))
        x = Tensor(rng.uniform(0.2, 0.8, size=(1, 2, 6, 6)), dtype=np.float64)
        return (lambda t: T.reduce_mean(LS.ssim_map(t, a))), x, None

    def photometric(rng):
        a = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 6, 6)))
        x = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 6, 6)), dtype=np.float64)
        return (lambda t: T.reduce_mean(LS.photometric_loss(a, t))), x, None

    def min_reproj(rng):
        target = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 6, 6)))
        # The inverted image is photometrically terrible (SSIM ~ -1), so
        # the auto-mask stays all-ones and cannot flip inside an FD step.
        far = Tensor(1.0 - target.data)
        valid = np.ones((1, 1, 6, 6), dtype=bool)
        x = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 6, 6)), dtype=np.float64)

        def f(t):
            return LS.min_reprojection(target, [(t, valid)], [far]).loss

        return f, x, None

    def sparse_depth(rng):
        sparse = np.zeros((1, 1, 5, 5))
        pts = rng.uniform(1, 5, size=(1, 1, 5, 5))
        pick = rng.uniform(size=(1, 1, 5, 5)) < 0.4
        sparse[pick] = pts[pick]
        x = Tensor(rng.uniform(1.0, 5.0, size=(1, 1, 5, 5)), dtype=np.float64)
        return (
            lambda t: LS.sparse_depth_loss(t, sparse, sparse > 0),
            x,
            None,
        )

    def smoothness(rng):
        img = Tensor(rng.uniform(size=(1, 3, 5, 5)))
        x = Tensor(rng.uniform(0.2, 0.9, size=(1, 1, 5, 5)), dtype=np.float64)
        return (lambda t: LS.smoothness_loss(t, img)), x, None

    return {
        "loss.ssim": ssim,
        "loss.photometric": photometric,
        "loss.min_reprojection": min_reproj,
        "loss.sparse_depth": sparse_depth,
        "loss.smoothness": smoothness,
    }


def composite_gradcheck(seed: int = 0) -> float:
    """End-to-end: tiny network at 16x12 through the full objective,
    checked w.r.t. a sample of parameter coordinates in float64."""
    spec = D.make_scene_spec("planes", seed=seed, frames=3, width=16, height=12)
    frames = D.render_scene(spec)
    cfg = NetworkConfig(
        variant="2es-1dp", stage_channels=(4, 6), blocks_per_stage=1, depth_range=(0.5, 20.0)
    )
    store64 = N.init_parameters(cfg, seed=seed, dtype=np.float64)
    target = frames[1]
    sparse = D.sample_uniform(target.depth, 20, seed=seed)
    triplet = D.FrameTriplet(
        frame_id=1,
        image=target.image,
        sparse=sparse,
        source_images=[frames[0].image, frames[2].image],
        poses=[
            G.relative_pose(target.pose, frames[0].pose),
            G.relative_pose(target.pose, frames[2].pose),
        ],
        intrinsics=spec.intrinsics,
    )

    weights = LossWeights()
    worst = 0.0
    rng = np.random.default_rng(seed)
    names = [n for n in store64.names() if store64[n].size > 1]
    for name in rng.choice(names, size=min(6, len(names)), replace=False):
        def f(t, pname=name):
            probe = ParameterStore()
            for n_, p_ in store64.items():
                if n_ == pname:
                    probe.add_tensor(n_, t)
                else:
                    probe.add_tensor(n_, p_.detach())
            net = DepthCompletionNet(cfg, store=probe)
            total, _ = triplet_loss(net, [triplet], weights, dtype=np.float64)
            return total

        err = T.finite_difference_check(
            f, Tensor(store64[name].data), step=1e-5, sample=8, seed=seed
        )
        worst = max(worst, err)
    return worst


def gradcheck_suite(seed: int = 0, seeds: int = 20) -> GradcheckReport:
    """Finite-difference checks over every primitive, layer, loss, and the
    16x12 end-to-end composite. The release gate: all rows must pass."""
    t0 = time.time()
    rows = []
    for name, factory in _primitive_cases().items():
        rows.append(GradcheckRow(name, _check_many(factory, seeds, seed), GRAD_TOL, seeds))
    for name, factory in _layer_cases().items():
        rows.append(GradcheckRow(name, _check_many(factory, seeds, seed), GRAD_TOL, seeds))
    for name, factory in _loss_cases().items():
        rows.append(GradcheckRow(name, _check_many(factory, seeds, seed), GRAD_TOL, seeds))
    composite_seeds = 2
    worst = max(composite_gradcheck(seed + s) for s in range(composite_seeds))
    rows.append(GradcheckRow("composite.16x12", worst, GRAD_TOL, composite_seeds))
    return GradcheckReport(rows=rows, elapsed_s=time.time() - t0)
