"""Network building blocks: sparse convolutions, pixel-adaptive
convolutions, and residual blocks.

A sparse convolution gates its input features by a 0/1 observation mask so
unobserved locations never enter the sum, then dilates the mask through the
receptive field. No mask normalization is applied: stacking many layers
with a 1/sum(mask) rescale starves deep features, so the raw gated
convolution propagates outward while the mask tracks which outputs derive
from real measurements.

A pixel-adaptive convolution modulates the spatially invariant kernel
weight at each offset by a Gaussian affinity between guidance feature
vectors, exp(-0.5 * ||f_i - f_j||^2), so feature propagation follows image
content instead of crossing object boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

# Guidance features are standardized per channel before entering the
# Gaussian kernel; raw encoder magnitudes would collapse exp(-.5 ||.||^2).
GUIDANCE_EPS = 1e-5


@dataclass
class SparseFeature:
    """Feature map plus the observation mask tracking measurement support.

    ``mask`` is a constant one-channel 0/1 tensor with the feature's
    spatial size; gradients never flow through it.
    """

    feature: Tensor
    mask: Tensor

    def __post_init__(self):
        if self.feature.shape[2:] != self.mask.shape[2:]:
            raise ShapeError("SparseFeature", self.feature.shape, self.mask.shape)
        if self.mask.shape[1] != 1:
            raise ShapeError("SparseFeature mask channels", self.mask.shape, ("N", 1, "H", "W"))

    @property
    def coverage(self) -> float:
        """Fraction of observed pixels in the mask."""
        return float(self.mask.data.mean())


def binary_dilate(mask: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Max-pool a 0/1 mask with the same footprint as a k x k convolution."""
    n, c, h, w = mask.shape
    padded = np.pad(mask, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, c, ho, wo), dtype=mask.dtype)
    for i in range(k):
        for j in range(k):
            np.maximum(
                out,
                padded[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride],
                out=out,
            )
    return out


def sparse_conv_block(
    inp: SparseFeature, weight: Tensor, bias: Tensor, stride: int = 1
) -> SparseFeature:
    """Mask-gated convolution with binary mask dilation ('same' padding).

    With a full mask this is exactly a standard convolution; with an empty
    mask the output is the bias everywhere and the mask stays empty.
    """
    k = weight.shape[2]
    padding = k // 2
    gated = T.mul(inp.feature, inp.mask)
    feature = T.conv2d(gated, weight, bias, stride=stride, padding=padding)
    new_mask = binary_dilate(inp.mask.data, k, stride, padding)
    return SparseFeature(feature=feature, mask=Tensor(new_mask))


def pac_kernel(f_i: np.ndarray, f_j: np.ndarray) -> float:
    """Gaussian affinity exp(-0.5 ||f_i - f_j||^2) between feature vectors."""
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    if f_i.shape != f_j.shape:
        raise ShapeError("pac_kernel", f_i.shape, f_j.shape)
    d = f_i - f_j
    return float(np.exp(-0.5 * np.dot(d, d)))


def standardize_guidance(f: Tensor) -> Tensor:
    """Zero-mean unit-variance per channel over the image (differentiable)."""
    mu = T.reduce_mean(f, axes=(2, 3), keepdims=True)
    centered = T.sub(f, mu)
    var = T.reduce_mean(T.mul(centered, centered), axes=(2, 3), keepdims=True)
    return T.div(centered, T.sqrt(T.add(var, GUIDANCE_EPS)))


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded k x k patches: (N, C, k*k, H, W), stride 1."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.empty((n, c, k * k, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i * k + j] = xp[:, :, i : i + h, j : j + w]
    return out


def pac_conv(
    v: Tensor, f: Tensor, weight: Tensor, bias: Tensor, kernel_size: int = 3, standardize: bool = True
) -> Tensor:
    """Pixel-adaptive convolution over a k x k footprint, stride 1.

    Each tap of the spatial kernel is scaled by the Gaussian affinity
    between the center's guidance vector and the neighbor's before the
    neighbor value accumulates. Spatially constant guidance reduces this
    exactly to conv2d(v, weight, bias). Differentiable w.r.t. v, f,
    weight, and bias.
    """
    if v.shape[2:] != f.shape[2:]:
        raise ShapeError("pac_conv spatial", v.shape, f.shape)
    if weight.shape[1] != v.shape[1]:
        raise ShapeError("pac_conv channels", v.shape, weight.shape)
    k = kernel_size
    if weight.shape[2] != k or weight.shape[3] != k:
        raise ShapeError("pac_conv weight", weight.shape, ("O", "I", k, k))
    if k % 2 != 1:
        raise ShapeError("pac_conv kernel must be odd", (k,))
    if standardize:
        f = standardize_guidance(f)

    n, c, h, w = v.shape
    o = weight.shape[0]
    cf = f.shape[1]

    vp = _patches(v.data, k)  # (N, C, k2, H, W)
    fp = _patches(f.data, k)  # (N, Cf, k2, H, W)
    diff = f.data[:, :, None] - fp  # f_i - f_j
    kern = np.exp(-0.5 * (diff * diff).sum(axis=1))  # (N, k2, H, W)
    wflat = weight.data.reshape(o, c, k * k)

    out = np.einsum("ocq,ncqhw,nqhw->nohw", wflat, vp, kern, optimize=True)
    out = out + bias.data.reshape(1, o, 1, 1)

    def bwd(g):
        gv = gf = gw = gb = gq = None
        if weight.requires_grad:
            gw = np.einsum("nohw,ncqhw,nqhw->ocq", g, vp, kern, optimize=True).reshape(
                weight.shape
            )
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if v.requires_grad or f.requires_grad:
            # Per-tap contribution grad: dL/d(kern_q * v_patch_q).
            gq = np.einsum("nohw,ocq->ncqhw", g, wflat, optimize=True)
        if v.requires_grad:
            gvp = gq * kern[:, None]  # (N, C, k2, H, W)
            gv = _patches_backward(gvp, (n, c, h, w), k)
        if f.requires_grad:
            gkern = np.einsum("ncqhw,ncqhw->nqhw", gq, vp, optimize=True)
            # d kern / d f_i = -kern * diff; d kern / d f_j = +kern * diff.
            a = (gkern[:, None] * kern[:, None]) * diff  # (N, Cf, k2, H, W)
            gf = _patches_backward(a, (n, cf, h, w), k) - a.sum(axis=2)
        return gv, gf, gw, gb

    return Tensor._node(out, (v, f, weight, bias), bwd)


def _patches_backward(gp: np.ndarray, x_shape, k: int) -> np.ndarray:
    """Adjoint of ``_patches``: scatter-add patch grads back to the map."""
    n, c, h, w = x_shape
    p = k // 2
    acc = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=gp.dtype)
    for i in range(k):
        for j in range(k):
            acc[:, :, i : i + h, j : j + w] += gp[:, :, i * k + j]
    return acc[:, :, p : p + h, p : p + w]


def residual_block(
    x: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    stride: int = 1,
    w_proj: Tensor | None = None,
    b_proj: Tensor | None = None,
    pad_mode: str = "zero",
) -> Tensor:
    """Two 3x3 convolutions with a rectifier between them, plus a shortcut.

    The shortcut is the identity when shapes allow (so zero weights give an
    identity block), otherwise a 1x1 projection (required when stride > 1
    or channel counts change). ``pad_mode`` 'reflect' keeps spatially
    constant inputs constant, which the RGB encoder relies on.
    """
    def conv3(t, wt, bt, s):
        if pad_mode == "reflect":
            return T.conv2d(T.reflect_pad2d(t, 1), wt, bt, stride=s, padding=0)
        return T.conv2d(t, wt, bt, stride=s, padding=1)

    h = T.relu(conv3(x, w1, b1, stride))
    h = conv3(h, w2, b2, 1)
    if w_proj is not None:
        shortcut = T.conv2d(x, w_proj, b_proj, stride=stride, padding=0)
    else:
        if stride != 1 or w2.shape[0] != x.shape[1]:
            raise ShapeError("residual_block needs a projection", x.shape, w2.shape)
        shortcut = x
    return T.add(h, shortcut)
