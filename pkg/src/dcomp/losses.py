"""Training objective: photometric (SSIM + L1) with per-pixel minimum over
sources and auto-masking, sparse-depth anchoring, and edge-aware
smoothness, combined as

    total = photo + lambda_d * depth + lambda_s * smooth.

The sparse-depth term uses the mean (not the sum) over observed pixels so
the weight keeps one meaning across sparsity levels. Pixels whose warp
lands outside every source are excluded from the photometric mean rather
than scored as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .errors import NumericalError, ShapeError
from .tensor import Tensor

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

# Stand-in loss for pixels with no valid source; always loses the per-pixel
# minimum when any real loss is present and is filtered out regardless.
_BIG = 1e9


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights: alpha blends SSIM vs L1; lambdas scale the terms."""

    alpha: float = 0.85
    lambda_d: float = 0.001
    lambda_s: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise NumericalError(f"alpha must be in [0,1], got {self.alpha}")
        if self.lambda_d < 0 or self.lambda_s < 0:
            raise NumericalError("loss weights must be non-negative")


@dataclass
class LossReport:
    """Scalar loss terms for one step, plus auto-mask coverage."""

    photo: float
    depth: float
    smooth: float
    total: float
    automask_coverage: float
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "photo": self.photo,
            "depth": self.depth,
            "smooth": self.smooth,
            "total": self.total,
            "automask_coverage": self.automask_coverage,
            "warnings": list(self.warnings),
        }


def ssim_map(img1: Tensor, img2: Tensor) -> Tensor:
    """Per-pixel SSIM from 3x3 box statistics (reflection padded).

    Inputs are (N,C,H,W) in [0,1]; output is per-channel, in [-1, 1].
    """
    if img1.shape != img2.shape:
        raise ShapeError("ssim_map", img1.shape, img2.shape)
    mu1 = T.avg_pool_3x3(img1)
    mu2 = T.avg_pool_3x3(img2)
    mu1_sq = T.mul(mu1, mu1)
    mu2_sq = T.mul(mu2, mu2)
    mu12 = T.mul(mu1, mu2)
    sigma1 = T.sub(T.avg_pool_3x3(T.mul(img1, img1)), mu1_sq)
    sigma2 = T.sub(T.avg_pool_3x3(T.mul(img2, img2)), mu2_sq)
    sigma12 = T.sub(T.avg_pool_3x3(T.mul(img1, img2)), mu12)
    num = T.mul(T.add(T.mul(mu12, 2.0), SSIM_C1), T.add(T.mul(sigma12, 2.0), SSIM_C2))
    den = T.mul(
        T.add(T.add(mu1_sq, mu2_sq), SSIM_C1),
        T.add(T.add(sigma1, sigma2), SSIM_C2),
    )
    return T.div(num, den)


def photometric_loss(target: Tensor, synthesized: Tensor, alpha: float = 0.85) -> Tensor:
    """Per-pixel photometric error map (N,1,H,W).

    alpha * (1 - SSIM)/2 + (1 - alpha) * L1, where both the SSIM map and
    the absolute color difference are averaged over channels. Validity of
    the synthesized image is handled by the caller (min_reprojection).
    """
    l1 = T.reduce_mean(T.absolute(T.sub(target, synthesized)), axes=1, keepdims=True)
    if alpha == 0.0:
        return l1
    # Clamp at 0: round-off can push SSIM a hair above 1 on perfect
    # matches, and a negative loss would defeat the auto-mask comparison.
    dssim = T.relu(
        T.mul(
            T.sub(1.0, T.reduce_mean(ssim_map(target, synthesized), axes=1, keepdims=True)),
            0.5,
        )
    )
    return T.add(T.mul(dssim, alpha), T.mul(l1, 1.0 - alpha))


class MinReprojection(NamedTuple):
    loss: Tensor
    automask: np.ndarray  # (N,1,H,W) 0/1
    coverage: float
    empty: bool


def min_reprojection(
    target: Tensor,
    warped: Sequence[tuple[Tensor, np.ndarray]],
    sources: Sequence[Tensor],
    alpha: float = 0.85,
) -> MinReprojection:
    """Per-pixel minimum photometric loss over sources, with auto-masking.

    ``warped`` pairs each synthesized view with its validity mask. A pixel
    enters the loss only where (a) at least one source is valid there and
    (b) the best warped loss beats the best unwarped (identity) loss --
    the auto-mask that suppresses static and textureless pixels. Returns
    loss 0 with ``empty=True`` when nothing survives.
    """
    if len(warped) == 0:
        raise NumericalError("min_reprojection requires at least one source")
    if len(warped) != len(sources):
        raise ShapeError("min_reprojection sources", (len(warped),), (len(sources),))

    min_warped = None
    any_valid = None
    for synth, valid in warped:
        per_pixel = photometric_loss(target, synth, alpha)
        guarded = T.where(valid, per_pixel, Tensor(np.full(per_pixel.shape, _BIG, per_pixel.data.dtype)))
        min_warped = guarded if min_warped is None else T.minimum(min_warped, guarded)
        any_valid = valid.copy() if any_valid is None else (any_valid | valid)

    min_unwarped = None
    for src in sources:
        per_pixel = photometric_loss(target, src, alpha)
        min_unwarped = (
            per_pixel if min_unwarped is None else T.minimum(min_unwarped, per_pixel)
        )

    automask = ((min_warped.data < min_unwarped.data) & any_valid).astype(
        target.data.dtype
    )
    coverage = float(automask.mean())
    if automask.sum() == 0:
        return MinReprojection(
            loss=Tensor(np.zeros((), dtype=target.data.dtype)),
            automask=automask,
            coverage=0.0,
            empty=True,
        )
    loss = T.masked_mean(min_warped, automask)
    return MinReprojection(loss=loss, automask=automask, coverage=coverage, empty=False)


def sparse_depth_loss(pred_depth: Tensor, sparse_depth: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean absolute depth error over observed sparse pixels; 0 when empty."""
    if valid.sum() == 0:
        return Tensor(np.zeros((), dtype=pred_depth.data.dtype))
    diff = T.absolute(T.sub(pred_depth, Tensor(sparse_depth.astype(pred_depth.data.dtype))))
    return T.masked_mean(diff, valid.astype(pred_depth.data.dtype))


def smoothness_loss(inv_depth: Tensor, image: Tensor) -> Tensor:
    """Edge-aware smoothness of mean-normalized inverse depth.

    Forward differences (last row/column dropped); the image gradient
    magnitude is the mean of per-channel absolute differences and enters
    as a constant weight exp(-|dI|).
    """
    mean_d = T.reduce_mean(inv_depth)
    if mean_d.item() <= 0.0:
        raise NumericalError("smoothness_loss requires positive mean inverse depth")
    dstar = T.div(inv_depth, mean_d)
    n, _, h, w = inv_depth.shape
    img = image.data

    terms = []
    if w >= 2:
        grad_x = T.absolute(
            T.sub(T.crop2d(dstar, 0, h, 1, w), T.crop2d(dstar, 0, h, 0, w - 1))
        )
        img_gx = np.abs(img[:, :, :, 1:] - img[:, :, :, :-1]).mean(axis=1, keepdims=True)
        terms.append(T.reduce_mean(T.mul(grad_x, np.exp(-img_gx))))
    if h >= 2:
        grad_y = T.absolute(
            T.sub(T.crop2d(dstar, 1, h, 0, w), T.crop2d(dstar, 0, h - 1, 0, w))
        )
        img_gy = np.abs(img[:, :, 1:, :] - img[:, :, :-1, :]).mean(axis=1, keepdims=True)
        terms.append(T.reduce_mean(T.mul(grad_y, np.exp(-img_gy))))
    if not terms:
        return Tensor(np.zeros((), dtype=inv_depth.data.dtype))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def total_loss(
    photo: Tensor,
    depth: Tensor,
    smooth: Tensor,
    weights: LossWeights,
    automask_coverage: float = 1.0,
    warnings: tuple[str, ...] = (),
) -> tuple[Tensor, LossReport]:
    """Weighted sum of the three terms; returns the graph node and report."""
    total = T.add(
        photo,
        T.add(T.mul(depth, weights.lambda_d), T.mul(smooth, weights.lambda_s)),
    )
    report = LossReport(
        photo=photo.item(),
        depth=depth.item(),
        smooth=smooth.item(),
        total=total.item(),
        automask_coverage=automask_coverage,
        warnings=warnings,
    )
    return total, report
