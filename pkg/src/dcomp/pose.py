"""Relative pose from feature correspondences and sparse depth.

Target keypoints with a sparse depth measurement are back-projected into
3D, and the pose mapping the target camera into the source camera is
recovered by RANSAC over damped Gauss-Newton PnP solves. Feature
extraction itself is external; keypoints and descriptors are ingested from
`.feat` files (or synthesized for tests), so any detector can feed the
pipeline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import geometry as G
from .errors import DataError, FormatError, PoseEstimationError, ShapeError
from .geometry import CameraIntrinsics, PoseSE3

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1

RATIO_TEST = 0.8

GN_MAX_ITERS = 50
GN_STEP_TOL = 1e-10


@dataclass
class Keypoints:
    """Detected pixels plus their descriptors for one frame."""

    pixels: np.ndarray  # (n, 2) float32, (u, v)
    descriptors: np.ndarray  # (n, d) float32

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32)
        if self.descriptors.shape[0] != self.pixels.shape[0]:
            raise ShapeError("Keypoints", self.pixels.shape, self.descriptors.shape)

    def __len__(self):
        return self.pixels.shape[0]


class Correspondence(NamedTuple):
    target_pixel: tuple[float, float]
    source_pixel: tuple[float, float]


def save_features(path, keypoints: Keypoints) -> None:
    """Binary feature file: FEAT magic, version, count, dim, f32 records."""
    n, d = keypoints.descriptors.shape
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<III", FEAT_VERSION, n, d))
        records = np.hstack([keypoints.pixels, keypoints.descriptors]).astype("<f4")
        fh.write(records.tobytes())


def load_features(path) -> Keypoints:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != FEAT_MAGIC:
                raise FormatError(f"{path}: bad magic {magic!r}")
            version, n, d = struct.unpack("<III", fh.read(12))
            if version != FEAT_VERSION:
                raise FormatError(f"{path}: unsupported feature version {version}")
            payload = fh.read(n * (2 + d) * 4)
            if len(payload) != n * (2 + d) * 4:
                raise FormatError(f"{path}: truncated feature file")
            flat = np.frombuffer(payload, dtype="<f4").reshape(n, 2 + d)
    except OSError as exc:
        raise DataError(f"cannot read features {path}: {exc}") from exc
    return Keypoints(pixels=flat[:, :2].copy(), descriptors=flat[:, 2:].copy())


def match_descriptors(target: Keypoints, source: Keypoints) -> list[Correspondence]:
    """Exact mutual nearest neighbors under a 0.8 ratio test.

    For every target descriptor, the nearest source descriptor by
    Euclidean distance is kept only if nearest/second-nearest < 0.8 and
    the pairing is mutual.
    """
    if target.descriptors.shape[-1] != source.descriptors.shape[-1]:
        raise ShapeError("match_descriptors", target.descriptors.shape, source.descriptors.shape)
    if len(source) < 2:
        raise DataError("match_descriptors needs at least 2 source descriptors")
    td = target.descriptors.astype(np.float64)
    sd = source.descriptors.astype(np.float64)
    # Squared distance matrix (n_t, n_s).
    d2 = (
        (td * td).sum(axis=1, keepdims=True)
        - 2.0 * td @ sd.T
        + (sd * sd).sum(axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    order = np.argsort(d2, axis=1)
    nearest = order[:, 0]
    second = order[:, 1]
    dist_n = np.sqrt(d2[np.arange(len(td)), nearest])
    dist_s = np.sqrt(d2[np.arange(len(td)), second])
    ratio_ok = dist_n < RATIO_TEST * dist_s
    # Mutual check: the source's own nearest target must point back.
    source_nearest = np.argmin(d2, axis=0)
    mutual = source_nearest[nearest] == np.arange(len(td))
    keep = ratio_ok & mutual
    return [
        Correspondence(
            target_pixel=(float(target.pixels[i, 0]), float(target.pixels[i, 1])),
            source_pixel=(float(source.pixels[nearest[i], 0]), float(source.pixels[nearest[i], 1])),
        )
        for i in np.nonzero(keep)[0]
    ]


def lookup_sparse_depth(keypoint, depth: np.ndarray, valid: np.ndarray, radius: int = 2):
    """Depth of the nearest valid sparse pixel within `radius` (rounded
    pixel search, ties by scan order); None when no valid pixel is near."""
    h, w = depth.shape
    u = int(round(float(keypoint[0])))
    v = int(round(float(keypoint[1])))
    best = None
    best_d2 = radius * radius + 1
    for dv in range(-radius, radius + 1):
        for du in range(-radius, radius + 1):
            d2 = du * du + dv * dv
            if d2 > radius * radius or d2 >= best_d2:
                continue
            y, x = v + dv, u + du
            if 0 <= y < h and 0 <= x < w and valid[y, x]:
                best = float(depth[y, x])
                best_d2 = d2
    return best


@dataclass
class PnPInput:
    """3D points in the target camera frame and their source-pixel
    observations."""

    points: np.ndarray  # (n, 3) meters
    pixels: np.ndarray  # (n, 2)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        if self.points.shape[0] != self.pixels.shape[0]:
            raise ShapeError("PnPInput", self.points.shape, self.pixels.shape)
        if (self.points[:, 2] <= 0).any():
            raise DataError("PnPInput requires strictly positive depths")

    def __len__(self):
        return self.points.shape[0]

    def subset(self, idx) -> "PnPInput":
        return PnPInput(points=self.points[idx], pixels=self.pixels[idx])


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 200
    inlier_threshold: float = 2.0  # pixels
    confidence: float = 0.999
    min_sample: int = 4
    seed: int = 0
    depth_radius: int = 2  # sparse-depth lookup radius, pixels

    def __post_init__(self):
        if self.min_sample < 4:
            raise DataError("RANSAC min_sample must be >= 4")
        if not (0.0 < self.confidence < 1.0):
            raise DataError("RANSAC confidence must be in (0, 1)")


def _reprojection_residuals(pose: PoseSE3, data: PnPInput, k: CameraIntrinsics):
    cam = data.points @ pose.rotation.T + pose.translation
    z = np.maximum(cam[:, 2], 1e-9)
    uv = np.stack([k.fx * cam[:, 0] / z + k.cx, k.fy * cam[:, 1] / z + k.cy], axis=1)
    return uv - data.pixels, cam


def reprojection_errors(pose: PoseSE3, data: PnPInput, k: CameraIntrinsics) -> np.ndarray:
    res, cam = _reprojection_residuals(pose, data, k)
    err = np.linalg.norm(res, axis=1)
    err[cam[:, 2] <= G.EPS_Z] = np.inf
    return err


def pnp_refine(data: PnPInput, k: CameraIntrinsics, initial: PoseSE3) -> PoseSE3:
    """Minimize total squared reprojection error over the 6-dof twist.

    Gauss-Newton with an additive damping fallback; converged when the
    step norm drops below 1e-10 or after 50 iterations.
    """
    if len(data) < 4:
        raise PoseEstimationError(f"PnP needs >= 4 points, got {len(data)}")
    pose = initial
    damping = 0.0
    cost_prev = None
    for _ in range(GN_MAX_ITERS):
        res, cam = _reprojection_residuals(pose, data, k)
        cost = float((res * res).sum())
        x, y, z = cam[:, 0], cam[:, 1], np.maximum(cam[:, 2], 1e-9)
        inv_z = 1.0 / z
        # d(uv)/d(cam point):
        ju = np.stack([k.fx * inv_z, np.zeros_like(z), -k.fx * x * inv_z**2], axis=1)
        jv = np.stack([np.zeros_like(z), k.fy * inv_z, -k.fy * y * inv_z**2], axis=1)
        # Left-multiplied increment exp(delta): d(cam)/d(omega) = -[cam]x,
        # d(cam)/d(v) = I.
        n = len(data)
        j_cam = np.zeros((n, 2, 6))
        skew = np.zeros((n, 3, 3))
        skew[:, 0, 1], skew[:, 0, 2] = -cam[:, 2], cam[:, 1]
        skew[:, 1, 0], skew[:, 1, 2] = cam[:, 2], -cam[:, 0]
        skew[:, 2, 0], skew[:, 2, 1] = -cam[:, 1], cam[:, 0]
        j_cam[:, 0, :3] = -np.einsum("ni,nij->nj", ju, skew)
        j_cam[:, 1, :3] = -np.einsum("ni,nij->nj", jv, skew)
        j_cam[:, 0, 3:] = ju
        j_cam[:, 1, 3:] = jv
        jmat = j_cam.reshape(2 * n, 6)
        rvec = res.reshape(2 * n)
        jtj = jmat.T @ jmat
        jtr = jmat.T @ rvec
        step = None
        for _ in range(8):
            try:
                step = np.linalg.solve(jtj + damping * np.eye(6), -jtr)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.isfinite(step).all():
                break
            damping = max(damping * 10.0, 1e-6)
        if step is None or not np.isfinite(step).all():
            raise PoseEstimationError("PnP normal equations singular despite damping")
        candidate = G.se3_exp(step).compose(pose)
        res_new, _ = _reprojection_residuals(candidate, data, k)
        cost_new = float((res_new * res_new).sum())
        if cost_new <= cost or damping > 1e6:
            pose = candidate
            cost_prev = cost_new
            damping = max(damping / 10.0, 0.0)
            if np.linalg.norm(step) < GN_STEP_TOL:
                break
        else:
            damping = max(damping * 10.0, 1e-6)
    if cost_prev is None:
        raise PoseEstimationError("PnP made no accepted step")
    return pose


def ransac_pnp(
    data: PnPInput, k: CameraIntrinsics, config: RansacConfig
) -> tuple[PoseSE3, np.ndarray]:
    """Robust PnP: sample minimal sets, score by inlier count, refine.

    Hypothesis sampling uses a counter-based RNG keyed by the config seed,
    so results are independent of evaluation order. Returns the refined
    pose and the final inlier flags (errors <= threshold under it).
    """
    n = len(data)
    if n < config.min_sample:
        raise PoseEstimationError(
            f"RANSAC needs >= {config.min_sample} correspondences, got {n}"
        )
    best_inliers = None
    best_count = 0
    iterations_needed = config.max_iterations
    trial = 0
    while trial < min(iterations_needed, config.max_iterations):
        rng = np.random.Generator(np.random.Philox(key=config.seed, counter=trial))
        idx = rng.choice(n, size=config.min_sample, replace=False)
        trial += 1
        try:
            hyp = pnp_refine(data.subset(idx), k, PoseSE3.identity())
        except PoseEstimationError:
            continue
        errors = reprojection_errors(hyp, data, k)
        inliers = errors <= config.inlier_threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
            ratio = count / n
            if ratio >= 1.0:
                break
            # Standard early-exit bound on the number of trials.
            denom = np.log(max(1.0 - ratio**config.min_sample, 1e-12))
            iterations_needed = int(np.ceil(np.log(1.0 - config.confidence) / denom))
    if best_inliers is None or best_count < config.min_sample:
        raise PoseEstimationError("RANSAC found no hypothesis with enough inliers")
    refined = pnp_refine(data.subset(best_inliers), k, PoseSE3.identity())
    final_errors = reprojection_errors(refined, data, k)
    return refined, final_errors <= config.inlier_threshold


def build_pnp_input(
    matches: Sequence[Correspondence],
    sparse_depth: np.ndarray,
    sparse_valid: np.ndarray,
    k: CameraIntrinsics,
    radius: int = 2,
) -> PnPInput:
    """Back-project depth-backed target keypoints; drop matches without a
    nearby sparse measurement."""
    points, pixels = [], []
    for match in matches:
        depth = lookup_sparse_depth(match.target_pixel, sparse_depth, sparse_valid, radius)
        if depth is None or depth <= 0:
            continue
        points.append(G.backproject(match.target_pixel, depth, k))
        pixels.append(match.source_pixel)
    if not points:
        return PnPInput(points=np.zeros((0, 3)), pixels=np.zeros((0, 2)))
    return PnPInput(points=np.array(points), pixels=np.array(pixels))


def estimate_relative_pose(
    target: Keypoints,
    source: Keypoints,
    sparse_depth: np.ndarray,
    sparse_valid: np.ndarray,
    k: CameraIntrinsics,
    config: RansacConfig | None = None,
) -> PoseSE3:
    """Full pipeline: match -> depth lookup -> RANSAC-PnP -> T_target->source."""
    config = config or RansacConfig()
    matches = match_descriptors(target, source)
    data = build_pnp_input(matches, sparse_depth, sparse_valid, k, config.depth_radius)
    if len(data) < config.min_sample:
        raise PoseEstimationError(
            f"only {len(data)} depth-backed matches (need {config.min_sample})"
        )
    pose, _ = ransac_pnp(data, k, config)
    return pose
