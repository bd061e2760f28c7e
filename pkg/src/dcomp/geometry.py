"""Pinhole camera model, SE3 transforms, and differentiable view warping.

Frame convention, fixed project-wide: a relative pose maps target-camera
coordinates into source-camera coordinates, so warped grid coordinates
index the source image. Pixel centers sit at integer coordinates, origin
top-left, u rightward, v downward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, GeometryError, ShapeError
from .tensor import Tensor

EPS_Z = 1e-6  # minimum source depth (meters) for a projection to count as valid

ROT_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters in pixels, plus the associated image size."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def save_intrinsics(path, k: CameraIntrinsics) -> None:
    with open(path, "w") as fh:
        fh.write(f"{k.fx} {k.fy} {k.cx} {k.cy}\n{k.width} {k.height}\n")


def load_intrinsics(path) -> CameraIntrinsics:
    try:
        with open(path) as fh:
            fx, fy, cx, cy = map(float, fh.readline().split())
            width, height = map(int, fh.readline().split())
    except (OSError, ValueError) as exc:
        raise DataError(f"malformed intrinsics file {path}: {exc}") from exc
    return CameraIntrinsics(fx, fy, cx, cy, width, height)


class PoseSE3:
    """Rigid transform: rotation (3x3) plus translation (meters).

    The constructor rejects non-orthonormal rotations rather than silently
    normalizing; use ``orthonormalize`` to repair a noisy matrix explicitly.
    """

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        rotation = np.asarray(rotation, dtype=np.float64)
        translation = np.asarray(translation, dtype=np.float64).reshape(3)
        if rotation.shape != (3, 3):
            raise ShapeError("PoseSE3 rotation", rotation.shape, (3, 3))
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > ROT_TOL:
            raise GeometryError("rotation is not orthonormal to 1e-9")
        if abs(np.linalg.det(rotation) - 1.0) > ROT_TOL:
            raise GeometryError("rotation determinant is not +1 to 1e-9")
        self.rotation = rotation
        self.translation = translation

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def orthonormalize(cls, rotation, translation) -> "PoseSE3":
        """Project a near-rotation onto SO(3) via SVD, then construct."""
        u, _, vt = np.linalg.svd(np.asarray(rotation, dtype=np.float64))
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] *= -1.0
            r = u @ vt
        return cls(r, translation)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self ∘ other: apply `other` first, then `self`."""
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def invert(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def __repr__(self):
        return f"PoseSE3(t={self.translation.round(4).tolist()})"


def save_poses(path, poses: dict[int, "PoseSE3"]) -> None:
    """Write per-frame poses: `frame_id r11 r12 r13 t1 r21 ... t3` rows."""
    with open(path, "w") as fh:
        for frame_id in sorted(poses):
            row = poses[frame_id].matrix34().reshape(-1)
            fh.write(f"{frame_id} " + " ".join(f"{v:.17g}" for v in row) + "\n")


def load_poses(path) -> dict[int, "PoseSE3"]:
    poses: dict[int, PoseSE3] = {}
    try:
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                parts = line.split()
                if len(parts) != 13:
                    raise DataError(f"pose line needs 13 fields, got {len(parts)}")
                frame_id = int(parts[0])
                mat = np.array(list(map(float, parts[1:]))).reshape(3, 4)
                poses[frame_id] = PoseSE3.orthonormalize(mat[:, :3], mat[:, 3])
    except (OSError, ValueError) as exc:
        raise DataError(f"malformed pose file {path}: {exc}") from exc
    return poses


def relative_pose(c2w_target: "PoseSE3", c2w_source: "PoseSE3") -> "PoseSE3":
    """T mapping target-camera coordinates into source-camera coordinates."""
    return c2w_source.invert().compose(c2w_target)


def _hat(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def so3_exp(omega) -> np.ndarray:
    """Rodrigues rotation from an axis-angle 3-vector."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    k = _hat(omega)
    if theta < 1e-12:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def se3_exp(twist) -> PoseSE3:
    """Exponential map of a twist (omega_x, omega_y, omega_z, v_x, v_y, v_z)."""
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    omega, v = twist[:3], twist[3:]
    theta = np.linalg.norm(omega)
    k = _hat(omega)
    if theta < 1e-12:
        jl = np.eye(3) + 0.5 * k + (k @ k) / 6.0
    else:
        jl = (
            np.eye(3)
            + (1.0 - np.cos(theta)) / theta**2 * k
            + (theta - np.sin(theta)) / theta**3 * (k @ k)
        )
    return PoseSE3.orthonormalize(so3_exp(omega), jl @ v)


def so3_log(rotation: np.ndarray) -> np.ndarray:
    """Axis-angle of a rotation matrix (inverse of so3_exp)."""
    r = np.asarray(rotation, dtype=np.float64)
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-9:
        return np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # Near pi the antisymmetric part vanishes; recover the axis from
        # (R + I)/2 = a a^T (sign is inherently ambiguous there).
        m = (r + np.eye(3)) / 2.0
        col = int(np.argmax(np.diagonal(m)))
        axis = m[:, col] / max(np.sqrt(m[col, col]), 1e-12)
        return theta * axis / np.linalg.norm(axis)
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return theta * w / (2.0 * np.sin(theta))


def rotation_angle(rotation: np.ndarray) -> float:
    """Rotation magnitude in radians."""
    return float(np.linalg.norm(so3_log(rotation)))


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def backproject(pixel, depth: float, k: CameraIntrinsics) -> np.ndarray:
    """Lift a pixel to camera coordinates (meters) at the given depth."""
    if depth <= 0:
        raise GeometryError(f"backproject requires positive depth, got {depth}")
    u, v = pixel
    return np.array(
        [depth * (u - k.cx) / k.fx, depth * (v - k.cy) / k.fy, float(depth)]
    )


def project(point, k: CameraIntrinsics) -> tuple[float, float, bool]:
    """Pinhole projection; valid iff the point is in front of the camera."""
    x, y, z = np.asarray(point, dtype=np.float64)
    if z <= EPS_Z:
        return 0.0, 0.0, False
    return k.fx * x / z + k.cx, k.fy * y / z + k.cy, True


def project_many(points: np.ndarray, k: CameraIntrinsics):
    """Vectorized projection of (n, 3) points -> (n, 2) pixels, (n,) valid."""
    pts = np.asarray(points, dtype=np.float64)
    z = pts[:, 2]
    valid = z > EPS_Z
    safe_z = np.where(valid, z, 1.0)
    uv = np.stack(
        [k.fx * pts[:, 0] / safe_z + k.cx, k.fy * pts[:, 1] / safe_z + k.cy], axis=1
    )
    uv[~valid] = 0.0
    return uv, valid


# ---------------------------------------------------------------------------
# Differentiable warping
# ---------------------------------------------------------------------------


@dataclass
class WarpGrid:
    """Continuous source coordinates per target pixel, plus validity.

    ``u``/``v`` are (N,1,H,W) tensors (differentiable w.r.t. depth);
    ``valid`` is a constant boolean (N,1,H,W) array that is False wherever
    the coordinate falls outside the source frame or source depth is
    non-positive.
    """

    u: Tensor
    v: Tensor
    valid: np.ndarray


def pixel_rays(k: CameraIntrinsics, height: int, width: int, dtype=np.float32):
    """K^-1 x_h per pixel: three (1,1,H,W) arrays (x/z, y/z, 1)."""
    us = np.arange(width, dtype=dtype)
    vs = np.arange(height, dtype=dtype)
    rx = ((us - k.cx) / k.fx)[None, None, None, :] * np.ones((1, 1, height, 1), dtype=dtype)
    ry = ((vs - k.cy) / k.fy)[None, None, :, None] * np.ones((1, 1, 1, width), dtype=dtype)
    rz = np.ones((1, 1, height, width), dtype=dtype)
    return rx, ry, rz


def warp_grid(depth: Tensor, k: CameraIntrinsics, poses) -> WarpGrid:
    """Project target pixels into the source view through `depth`.

    `depth` is (N,1,H,W) metric depth; `poses` is one PoseSE3 per batch
    entry (or a single pose) mapping target to source coordinates.
    Differentiable w.r.t. depth.
    """
    if depth.ndim != 4 or depth.shape[1] != 1:
        raise ShapeError("warp_grid depth", depth.shape, ("N", 1, "H", "W"))
    n, _, h, w = depth.shape
    if isinstance(poses, PoseSE3):
        poses = [poses] * n
    if len(poses) != n:
        raise ShapeError("warp_grid poses", (len(poses),), (n,))

    dtype = depth.data.dtype
    rx, ry, rz = pixel_rays(k, h, w, dtype=dtype)
    rot = np.stack([p.rotation for p in poses]).astype(dtype)  # (N,3,3)
    tr = np.stack([p.translation for p in poses]).astype(dtype)  # (N,3)

    def cpart(arr):  # per-batch scalar constant, broadcastable to (N,1,H,W)
        return Tensor(arr.reshape(n, 1, 1, 1))

    # Camera-frame point: P = depth * ray; source frame: P' = R P + t.
    px = T.mul(depth, Tensor(rx))
    py = T.mul(depth, Tensor(ry))
    pz = T.mul(depth, Tensor(rz))
    qx = T.add(
        T.add(T.mul(px, cpart(rot[:, 0, 0])), T.mul(py, cpart(rot[:, 0, 1]))),
        T.add(T.mul(pz, cpart(rot[:, 0, 2])), cpart(tr[:, 0])),
    )
    qy = T.add(
        T.add(T.mul(px, cpart(rot[:, 1, 0])), T.mul(py, cpart(rot[:, 1, 1]))),
        T.add(T.mul(pz, cpart(rot[:, 1, 2])), cpart(tr[:, 1])),
    )
    qz = T.add(
        T.add(T.mul(px, cpart(rot[:, 2, 0])), T.mul(py, cpart(rot[:, 2, 1]))),
        T.add(T.mul(pz, cpart(rot[:, 2, 2])), cpart(tr[:, 2])),
    )

    in_front = qz.data > EPS_Z
    # Clamp the divisor away from zero on invalid pixels so the forward pass
    # stays finite; those pixels are masked out downstream.
    safe_qz = T.where(in_front, qz, Tensor(np.ones_like(qz.data)))
    u = T.add(T.mul(T.div(qx, safe_qz), k.fx), k.cx)
    v = T.add(T.mul(T.div(qy, safe_qz), k.fy), k.cy)

    # Tolerance absorbs round-off at the frame border (float32 coordinates
    # carry ~1e-3 px of noise at typical focal lengths).
    tol = 1e-3
    in_bounds = (
        (u.data >= -tol)
        & (u.data <= w - 1.0 + tol)
        & (v.data >= -tol)
        & (v.data <= h - 1.0 + tol)
    )
    valid = in_front & in_bounds & (depth.data > 0)
    return WarpGrid(u=u, v=v, valid=valid)


def bilinear_sample(source: Tensor, grid: WarpGrid) -> Tensor:
    """Sample `source` (N,C,H,W) at grid coordinates; 4-neighbor bilinear.

    Invalid grid cells produce 0 (callers must consult ``grid.valid``).
    Differentiable w.r.t. the source values and the grid coordinates.
    """
    if source.ndim != 4:
        raise ShapeError("bilinear_sample source", source.shape, ("N", "C", "H", "W"))
    n, c, h, w = source.shape
    u, v, valid = grid.u, grid.v, grid.valid
    if u.shape[0] != n:
        raise ShapeError("bilinear_sample batch", source.shape, u.shape)
    gh, gw = u.shape[2], u.shape[3]

    ud = np.where(valid, u.data, 0.0)
    vd = np.where(valid, v.data, 0.0)
    x0 = np.floor(ud)
    y0 = np.floor(vd)
    fx = ud - x0  # in [0,1)
    fy = vd - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)
    x1i = np.clip(x0i + 1, 0, w - 1)
    y1i = np.clip(y0i + 1, 0, h - 1)
    x0i = np.clip(x0i, 0, w - 1)
    y0i = np.clip(y0i, 0, h - 1)

    bi = np.arange(n).reshape(n, 1, 1)
    # Gather the four corners for all channels: (N,C,gh,gw).
    def gather(yi, xi):
        return source.data[bi, :, yi, xi].transpose(0, 3, 1, 2)

    v00 = gather(y0i[:, 0], x0i[:, 0])
    v01 = gather(y0i[:, 0], x1i[:, 0])
    v10 = gather(y1i[:, 0], x0i[:, 0])
    v11 = gather(y1i[:, 0], x1i[:, 0])

    w00 = ((1.0 - fx) * (1.0 - fy)).astype(source.data.dtype)
    w01 = (fx * (1.0 - fy)).astype(source.data.dtype)
    w10 = ((1.0 - fx) * fy).astype(source.data.dtype)
    w11 = (fx * fy).astype(source.data.dtype)
    vmask = valid.astype(source.data.dtype)

    out = (v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11) * vmask

    def bwd(g):
        g = g * vmask
        gsrc = gu = gv = None
        if source.requires_grad:
            gsrc = np.zeros(source.shape, dtype=g.dtype)
            for wgt, yi, xi in (
                (w00, y0i, x0i),
                (w01, y0i, x1i),
                (w10, y1i, x0i),
                (w11, y1i, x1i),
            ):
                np.add.at(
                    gsrc.transpose(0, 2, 3, 1),
                    (bi, yi[:, 0], xi[:, 0]),
                    (g * wgt).transpose(0, 2, 3, 1),
                )
        if u.requires_grad or v.requires_grad:
            # d out / d u = (1-fy)(v01-v00) + fy(v11-v10), summed over channels.
            du = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
            dv = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
            gu = (g * du).sum(axis=1, keepdims=True)
            gv = (g * dv).sum(axis=1, keepdims=True)
        return gsrc, gu, gv

    return Tensor._node(out, (source, u, v), bwd)


def synthesize_view(source_image: Tensor, depth: Tensor, k: CameraIntrinsics, poses):
    """Reconstruct the target image by warping the source through `depth`.

    Returns (synthesized image, validity mask). End-to-end differentiable
    w.r.t. both the depth map and the source image.
    """
    grid = warp_grid(depth, k, poses)
    return bilinear_sample(source_image, grid), grid.valid
