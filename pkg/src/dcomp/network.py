"""Depth-completion model: RGB encoder, sparse-conv depth encoder,
per-scale fusion (pixel-adaptive or plain), and a skip-connected decoder
with a sigmoid inverse-depth head.

Four variants cover the ablation ladder:

    1e-1d    single encoder over concatenated image + sparse depth
    2e-1d    dual encoders, standard convolutions in the depth branch
    2es-1d   dual encoders, sparse convolutions, plain fusion convolution
    2es-1dp  as 2es-1d but the fusion convolution is pixel-adaptive,
             guided by the RGB features at that scale

2es-1d and 2es-1dp share parameter names and shapes, so constant guidance
makes them numerically identical. The RGB encoder uses reflection padding
throughout, which keeps spatially constant images constant through every
stage (the property that equivalence relies on).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ConfigError, FormatError
from .layers import SparseFeature
from .tensor import Tensor

CHECKPOINT_MAGIC = b"DFCK"
CHECKPOINT_VERSION = 1

VARIANTS = ("1e-1d", "2e-1d", "2es-1d", "2es-1dp")


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "2es-1dp"
    stage_channels: tuple[int, ...] = (32, 64, 128, 256)
    blocks_per_stage: int = 2
    pac_kernel: int = 3
    depth_range: tuple[float, float] = (0.1, 100.0)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if len(self.stage_channels) < 2:
            raise ConfigError("need at least 2 encoder stages")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        if self.pac_kernel % 2 != 1:
            raise ConfigError("pac_kernel must be odd")
        d_min, d_max = self.depth_range
        if not (0 < d_min < d_max):
            raise ConfigError(f"need 0 < d_min < d_max, got {self.depth_range}")

    @property
    def stages(self) -> int:
        return len(self.stage_channels)

    @property
    def dual(self) -> bool:
        return self.variant != "1e-1d"

    @property
    def sparse(self) -> bool:
        return self.variant in ("2es-1d", "2es-1dp")

    @property
    def pac(self) -> bool:
        return self.variant == "2es-1dp"

    def to_json(self) -> str:
        return json.dumps(
            {
                "variant": self.variant,
                "stage_channels": list(self.stage_channels),
                "blocks_per_stage": self.blocks_per_stage,
                "pac_kernel": self.pac_kernel,
                "depth_range": list(self.depth_range),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        raw = json.loads(text)
        return cls(
            variant=raw["variant"],
            stage_channels=tuple(raw["stage_channels"]),
            blocks_per_stage=int(raw["blocks_per_stage"]),
            pac_kernel=int(raw["pac_kernel"]),
            depth_range=tuple(raw["depth_range"]),
        )


class ParameterStore:
    """Named parameter tensors with stable (insertion) ordering."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def add_tensor(self, name: str, tensor: Tensor) -> Tensor:
        """Adopt an existing tensor (shared, not copied) under `name`."""
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def parameter_count(self) -> int:
        return sum(t.size for t in self._params.values())

    def copy(self) -> "ParameterStore":
        dup = ParameterStore()
        for name, t in self._params.items():
            dup.add(name, t.data.copy())
        return dup


@dataclass
class InverseDepthMap:
    """Raw sigmoid output in (0,1) with its affine-reciprocal depth map."""

    values: Tensor  # (N, 1, H, W)
    d_min: float
    d_max: float

    def to_depth(self) -> Tensor:
        return invdepth_to_depth(self.values, self.d_min, self.d_max)


def invdepth_to_depth(values: Tensor, d_min: float, d_max: float) -> Tensor:
    """Map sigmoid output through inverse depth: 0 -> d_max, 1 -> d_min."""
    lo = 1.0 / d_max
    span = 1.0 / d_min - 1.0 / d_max
    return T.div(1.0, T.add(T.mul(values, span), lo))


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


class DepthCompletionNet:
    """Assembles the configured variant over a ParameterStore."""

    def __init__(self, config: NetworkConfig, store: ParameterStore | None = None, seed: int = 0):
        self.config = config
        self.store = store if store is not None else init_parameters(config, seed)
        check_parameter_shapes(config, self.store)

    # -- forward ------------------------------------------------------------

    def forward(self, image: Tensor, sparse_depth: Tensor, mask: Tensor) -> InverseDepthMap:
        """image (N,3,H,W) in [0,1]; sparse_depth (N,1,H,W) meters with 0 as
        missing; mask (N,1,H,W) in {0,1}. H and W must be divisible by
        2**stages."""
        cfg = self.config
        n, _, h, w = image.shape
        div = 2**cfg.stages
        if h % div or w % div:
            raise ConfigError(f"resolution {h}x{w} not divisible by {div}")
        d_min, d_max = cfg.depth_range
        norm_sparse = T.mul(sparse_depth, 1.0 / d_max)

        if cfg.dual:
            rgb_feats = self._rgb_encoder(image)
            depth_feats = self._depth_encoder(norm_sparse, mask)
            skips = [T.concat([r, self._fuse(i, d, r)], axis=1) if i > 0 else T.concat([r, d], axis=1)
                     for i, (r, d) in enumerate(zip(rgb_feats, depth_feats))]
        else:
            stacked = T.concat([image, norm_sparse], axis=1)
            skips = self._rgb_encoder(stacked)
        return self._decode(skips, d_min, d_max)

    __call__ = forward

    def _p(self, name: str) -> Tensor:
        return self.store[name]

    def _rgb_encoder(self, x: Tensor) -> list[Tensor]:
        cfg = self.config
        feats = []
        x = T.conv2d(T.reflect_pad2d(x, 1), self._p("rgb.stem.w"), self._p("rgb.stem.b"), 1, 0)
        x = T.relu(x)
        feats.append(x)
        for i in range(cfg.stages):
            for j in range(cfg.blocks_per_stage):
                prefix = f"rgb.s{i}.b{j}"
                stride = 2 if j == 0 else 1
                proj = f"{prefix}.wp" in self.store
                x = L.residual_block(
                    x,
                    self._p(f"{prefix}.w1"), self._p(f"{prefix}.b1"),
                    self._p(f"{prefix}.w2"), self._p(f"{prefix}.b2"),
                    stride=stride,
                    w_proj=self._p(f"{prefix}.wp") if proj else None,
                    b_proj=self._p(f"{prefix}.bp") if proj else None,
                    pad_mode="reflect",
                )
            feats.append(x)
        return feats

    def _depth_encoder(self, norm_sparse: Tensor, mask: Tensor) -> list[Tensor]:
        cfg = self.config
        feats = []
        if cfg.sparse:
            sf = SparseFeature(feature=norm_sparse, mask=mask)
            sf = L.sparse_conv_block(sf, self._p("depth.stem.w"), self._p("depth.stem.b"), 1)
            sf = SparseFeature(feature=T.relu(sf.feature), mask=sf.mask)
            feats.append(sf.feature)
            for i in range(cfg.stages):
                for j in range(cfg.blocks_per_stage):
                    stride = 2 if j == 0 else 1
                    sf = L.sparse_conv_block(
                        sf, self._p(f"depth.s{i}.b{j}.w"), self._p(f"depth.s{i}.b{j}.b"), stride
                    )
                    sf = SparseFeature(feature=T.relu(sf.feature), mask=sf.mask)
                feats.append(sf.feature)
        else:
            x = T.relu(T.conv2d(norm_sparse, self._p("depth.stem.w"), self._p("depth.stem.b"), 1, 1))
            feats.append(x)
            for i in range(cfg.stages):
                for j in range(cfg.blocks_per_stage):
                    stride = 2 if j == 0 else 1
                    x = T.relu(
                        T.conv2d(x, self._p(f"depth.s{i}.b{j}.w"), self._p(f"depth.s{i}.b{j}.b"), stride, 1)
                    )
                feats.append(x)
        return feats

    def _fuse(self, scale: int, depth_feat: Tensor, rgb_feat: Tensor) -> Tensor:
        w = self._p(f"fuse.s{scale}.w")
        b = self._p(f"fuse.s{scale}.b")
        if self.config.pac:
            return L.pac_conv(depth_feat, rgb_feat, w, b, self.config.pac_kernel)
        return T.conv2d(depth_feat, w, b, 1, self.config.pac_kernel // 2)

    def _decode(self, skips: list[Tensor], d_min: float, d_max: float) -> InverseDepthMap:
        cfg = self.config
        s = cfg.stages
        x = skips[s]
        for i in range(s - 1, 0, -1):
            x = T.relu(T.conv2d(x, self._p(f"dec.s{i}.w"), self._p(f"dec.s{i}.b"), 1, 1))
            x = T.upsample_nearest2(x)
            x = T.concat([x, skips[i]], axis=1)
        x = T.relu(T.conv2d(x, self._p("dec.full.w"), self._p("dec.full.b"), 1, 1))
        x = T.upsample_nearest2(x)
        x = T.concat([x, skips[0]], axis=1)
        x = T.relu(T.conv2d(x, self._p("dec.final.w"), self._p("dec.final.b"), 1, 1))
        logits = T.conv2d(x, self._p("head.w"), self._p("head.b"), 1, 1)
        return InverseDepthMap(values=T.sigmoid(logits), d_min=d_min, d_max=d_max)


# ---------------------------------------------------------------------------
# Parameter construction
# ---------------------------------------------------------------------------


def _shape_plan(config: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Deterministic (name, shape) list covering the whole variant."""
    plan: list[tuple[str, tuple[int, ...]]] = []
    chans = config.stage_channels
    stem = chans[0]
    k = config.pac_kernel
    rgb_in = 4 if not config.dual else 3

    plan.append(("rgb.stem.w", (stem, rgb_in, 3, 3)))
    plan.append(("rgb.stem.b", (stem,)))
    prev = stem
    for i, c in enumerate(chans):
        for j in range(config.blocks_per_stage):
            cin = prev if j == 0 else c
            stride = 2 if j == 0 else 1
            plan.append((f"rgb.s{i}.b{j}.w1", (c, cin, 3, 3)))
            plan.append((f"rgb.s{i}.b{j}.b1", (c,)))
            plan.append((f"rgb.s{i}.b{j}.w2", (c, c, 3, 3)))
            plan.append((f"rgb.s{i}.b{j}.b2", (c,)))
            if stride != 1 or cin != c:
                plan.append((f"rgb.s{i}.b{j}.wp", (c, cin, 1, 1)))
                plan.append((f"rgb.s{i}.b{j}.bp", (c,)))
        prev = c

    if config.dual:
        plan.append(("depth.stem.w", (stem, 1, 3, 3)))
        plan.append(("depth.stem.b", (stem,)))
        prev = stem
        for i, c in enumerate(chans):
            for j in range(config.blocks_per_stage):
                cin = prev if j == 0 else c
                plan.append((f"depth.s{i}.b{j}.w", (c, cin, 3, 3)))
                plan.append((f"depth.s{i}.b{j}.b", (c,)))
            prev = c
        for i, c in enumerate(chans):
            plan.append((f"fuse.s{i + 1}.w", (c, c, k, k)))
            plan.append((f"fuse.s{i + 1}.b", (c,)))

    s = config.stages
    skip_mult = 2 if config.dual else 1
    x_ch = chans[-1] * skip_mult
    for i in range(s - 1, 0, -1):
        plan.append((f"dec.s{i}.w", (chans[i], x_ch, 3, 3)))
        plan.append((f"dec.s{i}.b", (chans[i],)))
        x_ch = chans[i] + chans[i - 1] * skip_mult
    plan.append(("dec.full.w", (chans[0], x_ch, 3, 3)))
    plan.append(("dec.full.b", (chans[0],)))
    x_ch = chans[0] + stem * skip_mult
    plan.append(("dec.final.w", (chans[0], x_ch, 3, 3)))
    plan.append(("dec.final.b", (chans[0],)))
    plan.append(("head.w", (1, chans[0], 3, 3)))
    plan.append(("head.b", (1,)))
    return plan


def init_parameters(config: NetworkConfig, seed: int, dtype=np.float32) -> ParameterStore:
    """He-style fan-in Gaussian init; zero biases; the head bias targets
    the geometric mean of the depth range so first forwards are sane."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    d_min, d_max = config.depth_range
    geo = float(np.sqrt(d_min * d_max))
    head_target = (1.0 / geo - 1.0 / d_max) / (1.0 / d_min - 1.0 / d_max)
    for name, shape in _shape_plan(config):
        if name.endswith(".b") or name.endswith("b1") or name.endswith("b2") or name.endswith("bp"):
            data = np.zeros(shape, dtype=dtype)
            if name == "head.b":
                data[:] = _logit(head_target)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            if name == "head.w":
                std = np.sqrt(1.0 / fan_in) * 0.1
            data = (rng.normal(0.0, std, size=shape)).astype(dtype)
        store.add(name, data)
    return store


def check_parameter_shapes(config: NetworkConfig, store: ParameterStore) -> None:
    for name, shape in _shape_plan(config):
        if name not in store:
            raise FormatError(f"missing parameter {name!r} for variant {config.variant}")
        got = store[name].shape
        if tuple(got) != tuple(shape):
            raise FormatError(
                f"parameter {name!r}: checkpoint shape {tuple(got)} != expected {tuple(shape)}"
            )


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------


def save_checkpoint(path, store: ParameterStore, config: NetworkConfig) -> None:
    """Binary: DFCK magic, version, length-prefixed config JSON, then
    (name, shape, f32 little-endian data) records."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = config.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(store)))
    for name, tensor in store.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", tensor.ndim))
        for dim in tensor.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(tensor.data.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[ParameterStore, NetworkConfig]:
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    offset = 4

    def take(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, offset)
        offset += size
        return vals

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = take("<I")
    if offset + cfg_len > len(blob):
        raise FormatError(f"{path}: truncated checkpoint")
    config = NetworkConfig.from_json(bytes(view[offset : offset + cfg_len]).decode("utf-8"))
    offset += cfg_len
    (count,) = take("<I")
    store = ParameterStore()
    for _ in range(count):
        (name_len,) = take("<I")
        name = bytes(view[offset : offset + name_len]).decode("utf-8")
        offset += name_len
        (ndim,) = take("<B")
        shape = tuple(take("<" + "I" * ndim)) if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 4
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape)
        offset += nbytes
        store.add(name, data.copy())
    return store, config
