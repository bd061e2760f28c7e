"""Dataset formats, sparse-depth sampling, and a synthetic-scene generator.

The renderer ray-casts textured axis-aligned rectangles with Lambertian
shading, producing images, exact per-pixel ground-truth depth, camera
poses, and world-anchored landmark features -- everything real datasets
cannot provide at desk scale. All rendering is deterministic per seed.

Directory layout written and read here:

    root/image/NNNNNN.png      8-bit RGB
    root/sparse/NNNNNN.png     16-bit grayscale, millimeters, 0 = invalid
    root/gt/NNNNNN.png         optional ground truth, same encoding
    root/features/NNNNNN.feat  optional keypoints + descriptors
    root/intrinsics.txt        `fx fy cx cy` and `width height`
    root/poses.txt             optional camera-to-world poses per frame
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry as G
from . import pose as P
from .errors import DataError, FormatError
from .geometry import CameraIntrinsics, PoseSE3

log = logging.getLogger(__name__)

MAX_PNG_DEPTH_M = 65.535  # 16-bit millimeter encoding ceiling

SCENE_PRESETS = ("planes", "boxes", "mover", "textureless")

_FEATURE_DIM = 32
_LANDMARKS_PER_RECT = 60


@dataclass
class SparseDepthMap:
    """Per-pixel metric depth defined on a validity set.

    Invariant: valid pixels carry strictly positive depth; invalid pixels
    carry exactly zero.
    """

    depth: np.ndarray  # (H, W) meters
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.shape != self.valid.shape:
            raise DataError(
                f"depth {self.depth.shape} and validity {self.valid.shape} differ"
            )
        if (self.depth[self.valid] <= 0).any():
            raise DataError("valid sparse pixels must have positive depth")
        if (self.depth[~self.valid] != 0).any():
            raise DataError("invalid sparse pixels must store depth 0")

    @property
    def count(self) -> int:
        return int(self.valid.sum())


# ---------------------------------------------------------------------------
# Scene description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rect:
    """Axis-aligned textured rectangle: `axis` is the normal direction."""

    axis: int  # 0=x, 1=y, 2=z
    offset: float  # plane coordinate along the normal axis
    lo: tuple[float, float]  # bounds along the remaining two axes (sorted)
    hi: tuple[float, float]
    texture: int
    motion: tuple[float, float, float] = (0.0, 0.0, 0.0)  # world units/frame


def box_rects(corner_lo, corner_hi, texture: int, motion=(0.0, 0.0, 0.0)) -> list[Rect]:
    """Expand an axis-aligned box into its six face rectangles."""
    lo = np.asarray(corner_lo, dtype=float)
    hi = np.asarray(corner_hi, dtype=float)
    rects = []
    for axis in range(3):
        o1, o2 = (axis + 1) % 3, (axis + 2) % 3
        for offset in (lo[axis], hi[axis]):
            rects.append(
                Rect(
                    axis=axis,
                    offset=float(offset),
                    lo=(float(lo[o1]), float(lo[o2])),
                    hi=(float(hi[o1]), float(hi[o2])),
                    texture=texture,
                    motion=tuple(motion),
                )
            )
    return rects


@dataclass
class SceneSpec:
    seed: int
    rects: list[Rect]
    trajectory: list[PoseSE3]  # camera-to-world per frame
    intrinsics: CameraIntrinsics
    name: str = "custom"

    @property
    def frame_count(self) -> int:
        return len(self.trajectory)


@dataclass
class RenderedFrame:
    image: np.ndarray  # (3, H, W) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 where no geometry
    pose: PoseSE3  # camera-to-world


# ---------------------------------------------------------------------------
# Procedural textures
# ---------------------------------------------------------------------------


def _texture_params(texture: int):
    rng = np.random.default_rng(10_000 + texture)
    base = rng.uniform(0.25, 0.75, size=3)
    freq = rng.uniform(1.5, 4.5, size=(3, 2))
    phase = rng.uniform(0.0, 2 * np.pi, size=(3, 2))
    amp = rng.uniform(0.10, 0.22, size=(3, 2))
    return base, freq, phase, amp


def texture_rgb(texture: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smooth procedural color as a function of in-plane coordinates.

    Texture id < 0 means flat (textureless) gray. Frequencies are kept low
    so bilinear resampling of a rendered image stays within ~1e-3.
    """
    if texture < 0:
        shade = 0.45 + 0.05 * (texture % 7) / 7.0
        return np.full((3,) + a.shape, shade)
    base, freq, phase, amp = _texture_params(texture)
    out = np.empty((3,) + a.shape)
    for ch in range(3):
        out[ch] = (
            base[ch]
            + amp[ch, 0] * np.sin(freq[ch, 0] * a + phase[ch, 0])
            + amp[ch, 1] * np.sin(freq[ch, 1] * b + phase[ch, 1])
        )
    return np.clip(out, 0.02, 0.98)


_LIGHT = np.array([0.35, -0.5, 0.75])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


def _shade(axis: int) -> float:
    return 0.65 + 0.35 * abs(_LIGHT[axis])


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _rect_at_frame(rect: Rect, frame: int) -> Rect:
    if rect.motion == (0.0, 0.0, 0.0) or frame == 0:
        return rect
    shift = np.asarray(rect.motion) * frame
    o1, o2 = (rect.axis + 1) % 3, (rect.axis + 2) % 3
    return Rect(
        axis=rect.axis,
        offset=rect.offset + shift[rect.axis],
        lo=(rect.lo[0] + shift[o1], rect.lo[1] + shift[o2]),
        hi=(rect.hi[0] + shift[o1], rect.hi[1] + shift[o2]),
        texture=rect.texture,
        motion=rect.motion,
    )


def _cast_rays(origin, dirs, rects):
    """Nearest-hit depth, rect index, and in-plane coords for ray bundle.

    `dirs` is (3, m) with unit z-scaling in the camera frame, so the ray
    parameter equals camera depth.
    """
    m = dirs.shape[1]
    best_t = np.full(m, np.inf)
    best_idx = np.full(m, -1, dtype=np.int64)
    best_a = np.zeros(m)
    best_b = np.zeros(m)
    for ri, rect in enumerate(rects):
        axis = rect.axis
        o1, o2 = (axis + 1) % 3, (axis + 2) % 3
        denom = dirs[axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (rect.offset - origin[axis]) / denom
        a = origin[o1] + t * dirs[o1]
        b = origin[o2] + t * dirs[o2]
        hit = (
            np.isfinite(t)
            & (t > 1e-6)
            & (a >= rect.lo[0])
            & (a <= rect.hi[0])
            & (b >= rect.lo[1])
            & (b <= rect.hi[1])
            & (t < best_t)
        )
        best_t[hit] = t[hit]
        best_idx[hit] = ri
        best_a[hit] = a[hit]
        best_b[hit] = b[hit]
    return best_t, best_idx, best_a, best_b


def render_frame(spec: SceneSpec, frame: int) -> RenderedFrame:
    k = spec.intrinsics
    h, w = k.height, k.width
    pose = spec.trajectory[frame]
    rects = [_rect_at_frame(r, frame) for r in spec.rects]

    rx, ry, rz = G.pixel_rays(k, h, w, dtype=np.float64)
    dirs_cam = np.stack([rx.reshape(-1), ry.reshape(-1), rz.reshape(-1)])
    dirs_world = pose.rotation @ dirs_cam
    origin = pose.translation

    t, idx, a, b = _cast_rays(origin, dirs_world, rects)
    depth = np.where(np.isfinite(t), t, 0.0).reshape(h, w)

    image = np.zeros((3, h * w))
    for ri, rect in enumerate(rects):
        sel = idx == ri
        if not sel.any():
            continue
        image[:, sel] = texture_rgb(rect.texture, a[sel], b[sel]) * _shade(rect.axis)
    image = np.clip(image, 0.0, 1.0).reshape(3, h, w)
    return RenderedFrame(image=image, depth=depth, pose=pose)


def render_scene(spec: SceneSpec) -> list[RenderedFrame]:
    """Render every frame; validates the scene-depth contract."""
    if not spec.rects or not spec.trajectory:
        raise DataError("degenerate scene: needs geometry and a trajectory")
    frames = [render_frame(spec, i) for i in range(spec.frame_count)]
    for i, fr in enumerate(frames):
        hit = fr.depth > 0
        if hit.any() and fr.depth[hit].min() < 0.15:
            raise DataError(f"camera intersects geometry at frame {i}")
        if fr.depth.max() > 99.0:
            raise DataError(f"scene depth exceeds the supported range at frame {i}")
    return frames


# ---------------------------------------------------------------------------
# Scene presets
# ---------------------------------------------------------------------------


def _room(texture_base: int, textured: bool = True) -> list[Rect]:
    def tex(i):
        return (texture_base + i) if textured else -(i + 1)

    return [
        # Back wall, floor, ceiling, side walls enclose the view.
        Rect(axis=2, offset=6.0, lo=(-4.0, -3.0), hi=(4.0, 3.0), texture=tex(0)),
        Rect(axis=1, offset=1.4, lo=(0.0, -4.0), hi=(6.05, 4.0), texture=tex(1)),
        Rect(axis=1, offset=-1.6, lo=(0.0, -4.0), hi=(6.05, 4.0), texture=tex(2)),
        Rect(axis=0, offset=-2.6, lo=(-3.0, 0.0), hi=(3.0, 6.05), texture=tex(3)),
        Rect(axis=0, offset=2.6, lo=(-3.0, 0.0), hi=(3.0, 6.05), texture=tex(4)),
    ]


def _panels(texture_base: int) -> list[Rect]:
    return [
        Rect(axis=2, offset=3.2, lo=(-1.9, -1.0), hi=(-0.6, 0.6), texture=texture_base),
        Rect(axis=2, offset=4.1, lo=(0.4, -0.5), hi=(1.8, 1.1), texture=texture_base + 1),
        Rect(axis=2, offset=2.4, lo=(-0.3, 0.2), hi=(0.7, 1.0), texture=texture_base + 2),
    ]


def make_trajectory(frames: int, seed: int) -> list[PoseSE3]:
    """Smooth handheld-like path: lateral sweeps plus slow forward drift."""
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    poses = []
    for i in range(frames):
        pos = np.array(
            [
                0.55 * np.sin(2 * np.pi * i / 24.0 + phase[0]),
                0.18 * np.sin(2 * np.pi * i / 31.0 + phase[1]),
                0.35 * np.sin(2 * np.pi * i / 53.0 + phase[2]) + 0.002 * i,
            ]
        )
        yaw = 0.04 * np.sin(2 * np.pi * i / 37.0 + phase[0])
        pitch = 0.02 * np.sin(2 * np.pi * i / 29.0 + phase[1])
        rot = G.so3_exp([pitch, yaw, 0.0])
        poses.append(PoseSE3(rot, pos))
    return poses


def make_scene_spec(
    preset: str, seed: int, frames: int, width: int, height: int
) -> SceneSpec:
    if preset not in SCENE_PRESETS:
        raise DataError(f"unknown scene preset {preset!r}; choose from {SCENE_PRESETS}")
    focal = 0.9 * max(width, height)
    k = CameraIntrinsics(
        fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height,
    )
    base = 16 * (seed % 1000 + 1)
    rects = _room(base, textured=(preset != "textureless"))
    if preset in ("planes", "mover"):
        rects += _panels(base + 8)
    if preset == "boxes":
        rects += box_rects((-1.6, 0.4, 2.6), (-0.7, 1.4, 3.4), base + 8)
        rects += box_rects((0.5, 0.1, 3.6), (1.5, 1.4, 4.6), base + 12)
    if preset == "mover":
        rects += box_rects(
            (-0.9, -0.4, 2.9), (-0.2, 0.4, 3.5), base + 20, motion=(0.025, 0.0, 0.0)
        )
    return SceneSpec(
        seed=seed,
        rects=rects,
        trajectory=make_trajectory(frames, seed),
        intrinsics=k,
        name=preset,
    )


# ---------------------------------------------------------------------------
# Sparse sampling
# ---------------------------------------------------------------------------


def sample_uniform(depth: np.ndarray, n: int, seed: int) -> SparseDepthMap:
    """n distinct pixels drawn uniformly from the valid (positive) pixels."""
    depth = np.asarray(depth, dtype=np.float64)
    flat_valid = np.nonzero(depth.reshape(-1) > 0)[0]
    if n > flat_valid.size:
        raise DataError(f"cannot sample {n} points from {flat_valid.size} valid pixels")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(flat_valid, size=n, replace=False)
    out = np.zeros_like(depth).reshape(-1)
    out[chosen] = depth.reshape(-1)[chosen]
    out = out.reshape(depth.shape)
    return SparseDepthMap(depth=out, valid=out > 0)


def sample_scanlines(
    depth: np.ndarray, lines: int, k: CameraIntrinsics, seed: int
) -> SparseDepthMap:
    """Keep depth along `lines` jittered horizontal bands of projected
    elevation angles, mimicking LiDAR sweeps projected into the image."""
    if lines < 1:
        raise DataError("sample_scanlines needs at least one line")
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    rng = np.random.default_rng(seed)
    elev_lo = np.arctan((0 - k.cy) / k.fy)
    elev_hi = np.arctan((h - 1 - k.cy) / k.fy)
    angles = np.linspace(elev_lo, elev_hi, num=min(lines, h))
    out = np.zeros_like(depth)
    cols = np.arange(w)
    for ang in angles:
        jitter = rng.normal(0.0, 0.002, size=w)  # radians, per column
        rows = np.round(k.cy + k.fy * np.tan(ang + jitter)).astype(int)
        ok = (rows >= 0) & (rows < h)
        rows, sel = rows[ok], cols[ok]
        keep = depth[rows, sel] > 0
        out[rows[keep], sel[keep]] = depth[rows[keep], sel[keep]]
    return SparseDepthMap(depth=out, valid=out > 0)


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------


def save_depth_png16(path, depth_m: np.ndarray) -> None:
    """16-bit grayscale PNG, value = round(depth * 1000) mm, 0 = invalid."""
    depth_m = np.asarray(depth_m, dtype=np.float64)
    if (depth_m > MAX_PNG_DEPTH_M).any():
        log.warning(
            "depth values above %.3f m clamped while writing %s", MAX_PNG_DEPTH_M, path
        )
    mm = np.clip(np.round(depth_m * 1000.0), 0, 65535).astype("<u2")
    Image.fromarray(mm).save(path)  # uint16 -> 16-bit grayscale


def load_depth_png16(path) -> SparseDepthMap:
    try:
        img = Image.open(path)
    except OSError as exc:
        raise DataError(f"cannot read depth PNG {path}: {exc}") from exc
    if img.mode not in ("I;16", "I"):
        raise FormatError(f"{path}: expected 16-bit grayscale PNG, got mode {img.mode}")
    mm = np.asarray(img, dtype=np.uint32)
    depth = mm.astype(np.float64) / 1000.0
    return SparseDepthMap(depth=depth, valid=depth > 0)


def save_image_png(path, image: np.ndarray) -> None:
    """(3, H, W) floats in [0,1] to 8-bit RGB."""
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_image_png(path) -> np.ndarray:
    try:
        img = Image.open(path).convert("RGB")
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0


# ---------------------------------------------------------------------------
# Landmark features (stand-in for an external feature network)
# ---------------------------------------------------------------------------


def scene_landmarks(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """World points scattered over the static scene surfaces, each with a
    fixed random descriptor. Descriptors follow the point, so projecting
    them per frame yields consistent correspondences across views."""
    rng = np.random.default_rng(spec.seed ^ 0x5EED)
    points, descs = [], []
    for rect in spec.rects:
        if rect.motion != (0.0, 0.0, 0.0):
            continue
        o1, o2 = (rect.axis + 1) % 3, (rect.axis + 2) % 3
        a = rng.uniform(rect.lo[0], rect.hi[0], size=_LANDMARKS_PER_RECT)
        b = rng.uniform(rect.lo[1], rect.hi[1], size=_LANDMARKS_PER_RECT)
        pts = np.zeros((_LANDMARKS_PER_RECT, 3))
        pts[:, rect.axis] = rect.offset
        pts[:, o1] = a
        pts[:, o2] = b
        points.append(pts)
        d = rng.normal(size=(_LANDMARKS_PER_RECT, _FEATURE_DIM))
        descs.append(d / np.linalg.norm(d, axis=1, keepdims=True))
    return np.vstack(points), np.vstack(descs)


def frame_features(
    landmarks: np.ndarray,
    descriptors: np.ndarray,
    frame: RenderedFrame,
    k: CameraIntrinsics,
    noise: float = 0.0,
    seed: int = 0,
) -> P.Keypoints:
    """Project visible, unoccluded landmarks into a frame."""
    cam = frame.pose.invert().apply(landmarks)
    uv, in_front = G.project_many(cam, k)
    h, w = frame.depth.shape
    ui = np.round(uv[:, 0]).astype(int)
    vi = np.round(uv[:, 1]).astype(int)
    in_img = in_front & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    visible = in_img.copy()
    sel = np.nonzero(in_img)[0]
    zbuf = frame.depth[vi[sel], ui[sel]]
    visible[sel] &= np.abs(zbuf - cam[sel, 2]) < 0.01 * np.maximum(zbuf, 0.1)
    pixels = uv[visible].astype(np.float32)
    descs = descriptors[visible].astype(np.float32)
    if noise > 0:
        rng = np.random.default_rng(seed)
        pixels = pixels + rng.normal(0.0, noise, size=pixels.shape).astype(np.float32)
    return P.Keypoints(pixels=pixels, descriptors=descs)


# ---------------------------------------------------------------------------
# Dataset writing / manifest
# ---------------------------------------------------------------------------


@dataclass
class FrameRecord:
    frame_id: int
    image: Path
    sparse: Path
    gt: Path | None = None
    features: Path | None = None


@dataclass
class DatasetManifest:
    root: Path
    intrinsics: CameraIntrinsics
    frames: list[FrameRecord]
    poses: dict[int, PoseSE3] | None = None

    def __len__(self):
        return len(self.frames)


def write_dataset(
    out_dir,
    spec: SceneSpec,
    sparse_points: int = 500,
    scanlines: int | None = None,
    write_gt: bool = True,
    write_features: bool = True,
    write_gt_poses: bool = False,
) -> Path:
    """Render a scene and lay it out as a loadable dataset directory."""
    root = Path(out_dir)
    for sub in ("image", "sparse") + (("gt",) if write_gt else ()) + (
        ("features",) if write_features else ()
    ):
        (root / sub).mkdir(parents=True, exist_ok=True)
    frames = render_scene(spec)
    k = spec.intrinsics
    G.save_intrinsics(root / "intrinsics.txt", k)
    if write_features:
        landmarks, descriptors = scene_landmarks(spec)
    for i, frame in enumerate(frames):
        name = f"{i:06d}"
        save_image_png(root / "image" / f"{name}.png", frame.image)
        if scanlines is not None:
            sparse = sample_scanlines(frame.depth, scanlines, k, seed=spec.seed + i)
        else:
            sparse = sample_uniform(frame.depth, sparse_points, seed=spec.seed + i)
        save_depth_png16(root / "sparse" / f"{name}.png", sparse.depth)
        if write_gt:
            save_depth_png16(root / "gt" / f"{name}.png", frame.depth)
        if write_features:
            kp = frame_features(landmarks, descriptors, frame, k)
            P.save_features(root / "features" / f"{name}.feat", kp)
    if write_gt_poses:
        G.save_poses(root / "poses.txt", {i: f.pose for i, f in enumerate(frames)})
    return root


def build_manifest(root) -> DatasetManifest:
    """Scan a dataset directory; every referenced file must exist."""
    root = Path(root)
    image_dir = root / "image"
    if not image_dir.is_dir():
        raise DataError(f"missing image directory {image_dir}")
    intrinsics = G.load_intrinsics(root / "intrinsics.txt")
    records = []
    for image_path in sorted(image_dir.glob("*.png")):
        frame_id = int(image_path.stem)
        sparse_path = root / "sparse" / image_path.name
        if not sparse_path.exists():
            raise DataError(f"missing sparse depth file {sparse_path}")
        gt_path = root / "gt" / image_path.name
        feat_path = root / "features" / f"{image_path.stem}.feat"
        records.append(
            FrameRecord(
                frame_id=frame_id,
                image=image_path,
                sparse=sparse_path,
                gt=gt_path if gt_path.exists() else None,
                features=feat_path if feat_path.exists() else None,
            )
        )
    if not records:
        raise DataError(f"no frames found under {image_dir}")
    poses_path = root / "poses.txt"
    poses = G.load_poses(poses_path) if poses_path.exists() else None
    return DatasetManifest(root=root, intrinsics=intrinsics, frames=records, poses=poses)


@dataclass
class FrameTriplet:
    """A target frame with its two temporal neighbors and relative poses."""

    frame_id: int
    image: np.ndarray  # (3, H, W) target
    sparse: SparseDepthMap
    source_images: list[np.ndarray]
    poses: list[PoseSE3]  # target -> source, aligned with source_images
    intrinsics: CameraIntrinsics
    gt: SparseDepthMap | None = None


def load_triplet(manifest: DatasetManifest, index: int, load_gt: bool = False) -> FrameTriplet:
    """Assemble the triplet centered at frame `index` (positional)."""
    if index <= 0 or index >= len(manifest.frames) - 1:
        raise DataError(f"frame {index} has no two neighbors (sequence boundary)")
    if manifest.poses is None:
        raise DataError(
            "manifest has no poses.txt; run the pose command (or write GT poses) first"
        )
    target = manifest.frames[index]
    sources = [manifest.frames[index - 1], manifest.frames[index + 1]]
    for rec in (target, *sources):
        if rec.frame_id not in manifest.poses:
            raise DataError(f"poses.txt is missing frame {rec.frame_id}")
    c2w_t = manifest.poses[target.frame_id]
    rel = [G.relative_pose(c2w_t, manifest.poses[s.frame_id]) for s in sources]
    return FrameTriplet(
        frame_id=target.frame_id,
        image=load_image_png(target.image),
        sparse=load_depth_png16(target.sparse),
        source_images=[load_image_png(s.image) for s in sources],
        poses=rel,
        intrinsics=manifest.intrinsics,
        gt=load_depth_png16(target.gt) if (load_gt and target.gt) else None,
    )
