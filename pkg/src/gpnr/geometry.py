"""Pinhole cameras, rays, Plücker lines and the per-ray canonical frame.

Conventions: poses are world-to-camera, ``x_cam = R @ p + t``. Cameras look
down +z with +y pointing down the image. Pixel ``(u, v)`` = (column, row);
integer coordinates are pixel centers, so an image of width W spans
``[-0.5, W - 0.5]`` horizontally.

Most functions accept leading batch axes so the sampler can work on whole
ray batches at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEGENERATE_EPS = 1e-8
MIN_CAMERA_Z = 1e-6


def dot3(a, b):
    """Dot product over a last axis of 3, rounded the same way for any batch shape."""
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.sqrt(dot3(v, v))[..., None]


class DegenerateAxisError(ValueError):
    """The target ray is parallel to the camera y axis."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image extents must be >= 1, got {self.width}x{self.height}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "CameraIntrinsics":
        """Square pixels, horizontal field of view, centered principal point."""
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


@dataclass
class CameraPose:
    """World-to-camera rigid transform."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @property
    def center(self) -> np.ndarray:
        return camera_center(self)

    def check(self, tol: float = 1e-6) -> None:
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=tol) or abs(np.linalg.det(self.R) - 1) > tol:
            raise ValueError("pose rotation is not a proper rotation")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0)) -> "CameraPose":
        """Camera at ``eye`` with +z toward ``target``; ``up`` maps toward -y (image up)."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        norm = np.linalg.norm(z)
        if norm < 1e-12:
            raise ValueError("look_at target coincides with the camera center")
        z /= norm
        # image y points down, so the camera y axis is -up projected off z
        y = -np.asarray(up, dtype=np.float64)
        y = y - (y @ z) * z
        if np.linalg.norm(y) < 1e-9:
            raise ValueError("up vector is parallel to the viewing direction")
        y /= np.linalg.norm(y)
        x = np.cross(y, z)
        R = np.stack([x, y, z])
        return cls(R, -R @ eye)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        self.direction = unit(d)

    def at(self, depth) -> np.ndarray:
        return self.origin + np.asarray(depth)[..., None] * self.direction


@dataclass
class PluckerRay:
    d: np.ndarray
    m: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.d, self.m], axis=-1)


@dataclass
class RigidTransform:
    """Maps world points ``p -> R @ p + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.t

    def apply_ray(self, ray: Ray) -> Ray:
        return Ray(self.apply(ray.origin), ray.direction @ self.R.T)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)


@dataclass
class SimilarityTransform:
    """Maps world points ``p -> s * R @ p + t``."""

    s: float = 1.0
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError(f"similarity scale must be positive, got {self.s}")
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.s * np.asarray(points) @ self.R.T + self.t

    @classmethod
    def random(cls, rng: np.random.Generator, scale_range=(0.1, 10.0), translation_scale: float = 10.0):
        lo, hi = scale_range
        s = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        return cls(s, random_rotation(rng), rng.normal(scale=translation_scale, size=3))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# ---------------------------------------------------------------------------


def camera_center(pose: CameraPose) -> np.ndarray:
    return -pose.R.T @ pose.t


def pixel_directions(R: np.ndarray, intr: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    """Unit world directions ``normalize(R^T C^-1 [u, v, 1])`` for (..., 2) pixels."""
    pixels = np.asarray(pixels, dtype=np.float64)
    cam = np.stack(
        [
            (pixels[..., 0] - intr.cx) / intr.fx,
            (pixels[..., 1] - intr.cy) / intr.fy,
            np.ones(pixels.shape[:-1]),
        ],
        axis=-1,
    )
    # R^T @ x written out, so the rounding does not depend on the batch shape
    world = cam[..., 0:1] * R[0] + cam[..., 1:2] * R[1] + cam[..., 2:3] * R[2]
    return unit(world)


def pixel_to_ray(pose: CameraPose, intr: CameraIntrinsics, pixel) -> Ray:
    return Ray(camera_center(pose), pixel_directions(pose.R, intr, pixel))


def plucker(origin: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """(..., 6) Plücker vector ``(v, o x v)`` for unit ``direction``."""
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    origin, direction = np.broadcast_arrays(origin, direction)
    return np.concatenate([direction, np.cross(origin, direction)], axis=-1)


def to_plucker(ray: Ray) -> PluckerRay:
    vec = plucker(ray.origin, ray.direction)
    return PluckerRay(vec[..., :3], vec[..., 3:])


def canonical_rotation(v: np.ndarray, y: np.ndarray, fallback: np.ndarray | None = None) -> np.ndarray:
    """Gram-Schmidt frame with columns ``(y' x v', y', v')``.

    ``v`` and ``y`` may carry matching leading axes. Where ``y`` is (nearly)
    parallel to ``v`` the ``fallback`` seed is used instead; without one a
    :class:`DegenerateAxisError` is raised.
    """
    v = np.asarray(v, dtype=np.float64)
    v = unit(v)
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), v.shape)
    yp = y - (y * v).sum(-1, keepdims=True) * v
    norm = np.linalg.norm(yp, axis=-1, keepdims=True)
    bad = norm[..., 0] < DEGENERATE_EPS
    if np.any(bad):
        if fallback is None:
            raise DegenerateAxisError("target ray is parallel to the camera y axis")
        seed = np.broadcast_to(np.asarray(fallback, dtype=np.float64), v.shape)
        alt = seed - (seed * v).sum(-1, keepdims=True) * v
        yp = np.where(bad[..., None], alt, yp)
        norm = np.linalg.norm(yp, axis=-1, keepdims=True)
    yn = yp / norm
    return np.stack([np.cross(yn, v), yn, v], axis=-1)


def canonicalizing_transform(
    pose: CameraPose, intr: CameraIntrinsics, pixel, fallback: bool = True
) -> RigidTransform:
    """Rigid map sending the target pixel's ray to origin 0, direction +z.

    The local frame uses the target camera's y axis in world coordinates
    (second row of R). The translation places the camera center at 0.
    """
    v = pixel_directions(pose.R, intr, pixel)
    Rc = canonical_rotation(v, pose.R[1], pose.R[0] if fallback else None)
    o = camera_center(pose)
    return RigidTransform(Rc.T, -Rc.T @ o)


def apply_rigid_to_pose(T: RigidTransform, pose: CameraPose) -> CameraPose:
    """Re-express a world-to-camera pose in the frame ``p' = T(p)``."""
    R = pose.R @ T.R.T
    return CameraPose(R, pose.t - R @ T.t)


def apply_similarity(
    sim: SimilarityTransform, poses: Sequence[CameraPose], near: float, far: float
) -> tuple[list[CameraPose], float, float]:
    """Move cameras by ``p -> s R p + t``; depth bounds scale by ``s``."""
    out = []
    for pose in poses:
        R = pose.R @ sim.R.T
        c = sim.apply(camera_center(pose))
        out.append(CameraPose(R, -R @ c))
    return out, near * sim.s, far * sim.s


def sample_depths(near: float, far: float, count: int) -> np.ndarray:
    """``count`` depths spaced linearly over [near, far]; midpoint if count is 1."""
    if not 0 < near < far:
        raise ValueError(f"need 0 < near < far, got near={near}, far={far}")
    if count < 1:
        raise ValueError("need at least one depth sample")
    if count == 1:
        return np.array([(near + far) / 2])
    return near + np.arange(count) * ((far - near) / (count - 1))


def project_points(R: np.ndarray, t: np.ndarray, intr: CameraIntrinsics, points: np.ndarray):
    """Project world points; returns (pixels (..., 2), camera-frame z)."""
    cam = np.einsum("...ij,...j->...i", R, points) + t
    z = cam[..., 2]
    safe = np.where(np.abs(z) < 1e-300, 1e-300, z)
    u = intr.fx * cam[..., 0] / safe + intr.cx
    v = intr.fy * cam[..., 1] / safe + intr.cy
    return np.stack([u, v], axis=-1), z


def in_bounds(pixels: np.ndarray, intr: CameraIntrinsics, margin: float) -> np.ndarray:
    u, v = pixels[..., 0], pixels[..., 1]
    return (
        (u >= -0.5 - margin)
        & (u <= intr.width - 0.5 + margin)
        & (v >= -0.5 - margin)
        & (v <= intr.height - 0.5 + margin)
    )


def epipolar_project(
    target_ray: Ray, depth, ref_pose: CameraPose, ref_intr: CameraIntrinsics, patch_size: int = 1
):
    """Project the point at ``depth`` along the target ray into a reference view.

    Returns ``(pixel, valid)``; valid requires positive camera-frame depth and
    the pixel within the image grown by half a patch on every side.
    """
    p = target_ray.at(depth)
    pix, z = project_points(ref_pose.R, ref_pose.t, ref_intr, p)
    valid = (z > MIN_CAMERA_Z) & in_bounds(pix, ref_intr, patch_size / 2)
    return pix, valid


def unproject(pose: CameraPose, intr: CameraIntrinsics, pixel, z) -> np.ndarray:
    """World point at camera-frame depth ``z`` behind ``pixel``."""
    pixel = np.asarray(pixel, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    cam = np.stack([(pixel[..., 0] - intr.cx) / intr.fx * z, (pixel[..., 1] - intr.cy) / intr.fy * z, z], axis=-1)
    return (cam - pose.t) @ pose.R


def point_line_distance(points: np.ndarray, ray: Ray) -> np.ndarray:
    rel = np.asarray(points) - ray.origin
    return np.linalg.norm(np.cross(rel, ray.direction), axis=-1)


def select_reference_views(
    poses: Sequence[CameraPose],
    target_pose: CameraPose,
    n: int,
    k: int,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    exclude: int | None = None,
    metric: str = "center",
    scale: float = 1.0,
) -> np.ndarray:
    """Indices of K reference views among the N nearest to the target.

    ``infer`` returns the K nearest (nearest first); ``train`` draws K of the
    N nearest uniformly without replacement. Distances are divided by
    ``scale`` and rounded before sorting so ties break by index regardless
    of the scene's frame.
    """
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= K <= N, got K={k}, N={n}")
    candidates = np.array([i for i in range(len(poses)) if i != exclude], dtype=np.int64)
    if len(candidates) < k:
        raise ValueError(f"only {len(candidates)} candidate views for K={k}")
    if metric == "center":
        centers = np.stack([camera_center(poses[i]) for i in candidates])
        dist = np.linalg.norm(centers - camera_center(target_pose), axis=-1) / scale
    elif metric == "angle":
        axes = np.stack([poses[i].R[2] for i in candidates])
        dist = np.arccos(np.clip(axes @ target_pose.R[2], -1.0, 1.0))
    else:
        raise ValueError(f"unknown nearness metric {metric!r}")
    order = np.lexsort((candidates, np.round(dist, 9)))
    nearest = candidates[order[: min(n, len(candidates))]]
    if mode == "infer":
        return nearest[:k]
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode view selection needs an rng")
        return np.sort(rng.choice(nearest, size=k, replace=False))
    raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
