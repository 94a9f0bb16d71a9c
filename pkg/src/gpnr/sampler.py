"""Builds the model input for a batch of target rays.

For each ray: pick reference views, move every camera into the ray's
canonical frame, rescale by the scene's far bound, walk M depths along the
ray, project them into each reference view and cut a patch around every
projection. Geometry is evaluated in float64 throughout; only the final
feature grid is cast to the model's dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .scenes import Scene
from .tensor import Tensor, concat, linear

POSE_CODE_DIM = 12
RAY_CODE_DIM = 6


@dataclass(frozen=True)
class SamplerConfig:
    patch_size: int = 9
    k: int = 4
    m: int = 16
    n: int = 8
    freqs: int = 8
    embed_dim: int = 64
    nearness: str = "center"

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd and >= 1, got {self.patch_size}")
        if not 1 <= self.k <= self.n:
            raise ValueError(f"need 1 <= K <= N, got K={self.k}, N={self.n}")
        if self.m < 1 or self.freqs < 1 or self.embed_dim < 1:
            raise ValueError("M, L and the embedding width must be >= 1")
        if self.nearness not in ("center", "angle"):
            raise ValueError(f"nearness must be 'center' or 'angle', got {self.nearness!r}")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def code_dim(self) -> int:
        """Width of ``[r || d || c]`` appended to each patch feature."""
        return RAY_CODE_DIM + 2 * self.freqs + POSE_CODE_DIM

    @property
    def input_dim(self) -> int:
        """C0: embedding, ray, depth and pose codes, plus the validity bit."""
        return self.embed_dim + self.code_dim + 1


@dataclass
class PatchGrid:
    """Sampler output for B rays, K views, M depths (float64 arrays)."""

    patches: np.ndarray  # (B, K, M, p*p*3)
    center_colors: np.ndarray  # (B, K, M, 3)
    ray_codes: np.ndarray  # (B, K, M, 6)
    depth_codes: np.ndarray  # (M, 2L)
    cam_codes: np.ndarray  # (B, K, 12)
    valid: np.ndarray  # (B, K, M) bool
    views: np.ndarray  # (B, K) scene view indices
    depths: np.ndarray  # (M,) scene units

    @property
    def batch(self) -> int:
        return self.patches.shape[0]

    def select(self, rows) -> "PatchGrid":
        return PatchGrid(
            self.patches[rows],
            self.center_colors[rows],
            self.ray_codes[rows],
            self.depth_codes,
            self.cam_codes[rows],
            self.valid[rows],
            self.views[rows],
            self.depths,
        )

    def permuted(self, view_perm=None, depth_perm=None) -> "PatchGrid":
        """Reorder views and/or depth samples, carrying every attached code."""
        g = self
        if view_perm is not None:
            vp = np.asarray(view_perm)
            g = PatchGrid(
                g.patches[:, vp], g.center_colors[:, vp], g.ray_codes[:, vp], g.depth_codes,
                g.cam_codes[:, vp], g.valid[:, vp], g.views[:, vp], g.depths,
            )
        if depth_perm is not None:
            dp = np.asarray(depth_perm)
            g = PatchGrid(
                g.patches[:, :, dp], g.center_colors[:, :, dp], g.ray_codes[:, :, dp], g.depth_codes[dp],
                g.cam_codes, g.valid[:, :, dp], g.views, g.depths[dp],
            )
        return g


# ---------------------------------------------------------------------------


def bilinear(images: np.ndarray, view: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``images[view]`` at fractional (x, y); outside pixels read as 0.

    ``view``, ``x`` and ``y`` broadcast together; returns (..., 3).
    """
    _, h, w, _ = images.shape
    view, x, y = np.broadcast_arrays(view, x, y)
    x = np.clip(x, -2.0, w + 1.0)
    y = np.clip(y, -2.0, h + 1.0)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = np.zeros(x.shape + (3,))
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            px = images[view, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += np.where(ok[..., None], px, 0.0) * (wx * wy)
    return out


def sample_patches(images: np.ndarray, views: np.ndarray, pix: np.ndarray, patch_size: int) -> np.ndarray:
    """Bilinear p x p patches at fractional centers, zero outside the image.

    ``views`` (...) indexes ``images``; ``pix`` is (..., 2). Every lattice
    point of a patch shares the center's fractional offset, so one
    (p+1) x (p+1) gather per patch suffices. Returns (..., p, p, 3) and
    agrees with :func:`bilinear` at each lattice point.
    """
    _, h, w, _ = images.shape
    half = patch_size // 2
    pad = half + 2
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    x = np.clip(pix[..., 0], -pad, w + pad) + pad
    y = np.clip(pix[..., 1], -pad, h + pad) + pad
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[..., None, None, None]
    fy = (y - y0)[..., None, None, None]
    span = np.arange(patch_size + 1)
    ix = np.clip(x0.astype(np.int64)[..., None] - half + span, 0, w + 2 * pad - 1)
    iy = np.clip(y0.astype(np.int64)[..., None] - half + span, 0, h + 2 * pad - 1)
    block = padded[views[..., None, None], iy[..., :, None], ix[..., None, :]]
    out = block[..., :-1, :-1, :] * ((1.0 - fy) * (1.0 - fx))
    out += block[..., :-1, 1:, :] * ((1.0 - fy) * fx)
    out += block[..., 1:, :-1, :] * (fy * (1.0 - fx))
    out += block[..., 1:, 1:, :] * (fy * fx)
    return out


def extract_patch(image: np.ndarray, center, patch_size: int):
    """p x p x 3 bilinear patch around a fractional (x, y) center.

    Returns ``(patch, valid)``; a center outside the image (grown by half a
    patch) gives a zero patch and ``valid = False``.
    """
    if patch_size % 2 == 0:
        raise ValueError("patch size must be odd")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    cx, cy = float(center[0]), float(center[1])
    half = patch_size / 2
    valid = -0.5 - half <= cx <= w - 0.5 + half and -0.5 - half <= cy <= h - 0.5 + half
    if not valid:
        return np.zeros((patch_size, patch_size, 3)), False
    off = np.arange(patch_size) - patch_size // 2
    ys, xs = np.meshgrid(cy + off, cx + off, indexing="ij")
    return bilinear(image[None], np.zeros_like(xs, dtype=np.int64), xs, ys), True


def embed_patch(patch, w_e: Tensor, b_e: Tensor) -> Tensor:
    """Shared linear projection of a patch (p, p, 3) or flattened (..., p*p*3)."""
    arr = np.asarray(patch.data if isinstance(patch, Tensor) else patch)
    if arr.shape[-1] != w_e.shape[0]:
        arr = arr.reshape(arr.shape[:-3] + (-1,))
    return linear(Tensor(arr.astype(w_e.dtype)), w_e, b_e)


def encode_depth(d, freqs: int) -> np.ndarray:
    """NeRF-style ``(sin 2^l pi d, cos 2^l pi d)`` pairs, l = 0..L-1, interleaved."""
    d = np.asarray(d, dtype=np.float64)
    ang = np.pi * d[..., None] * (2.0 ** np.arange(freqs))
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(d.shape + (2 * freqs,))


def encode_relative_pose(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """12-vector for a canonicalized, scale-normalized world-to-camera pose.

    Encodes the camera-to-canonical rotation ``R^T`` (row-major) and the
    camera position ``-R^T t``.
    """
    Rt = np.swapaxes(np.asarray(R), -1, -2)
    center = -(Rt @ np.asarray(t)[..., None])[..., 0]
    return np.concatenate([Rt.reshape(Rt.shape[:-2] + (9,)), center], axis=-1)


def normalize_scale(translations: np.ndarray, depths: np.ndarray, max_depth: float):
    """Divide camera translations and depths by the scene's maximum depth."""
    if max_depth <= 0:
        raise ValueError(f"max_depth must be positive, got {max_depth}")
    return np.asarray(translations) / max_depth, np.asarray(depths) / max_depth


def reference_pool(scene: Scene, target_pose: geo.CameraPose, config: SamplerConfig, exclude: int | None) -> np.ndarray:
    """The N nearest candidate views, nearest first."""
    available = scene.num_views - (exclude is not None)
    n = min(config.n, available)
    if available < config.k:
        raise ValueError(f"scene has {available} candidate views but K={config.k}")
    return geo.select_reference_views(
        scene.poses, target_pose, n, n, "infer", exclude=exclude, metric=config.nearness, scale=scene.far
    )


def choose_views(pool: np.ndarray, batch: int, k: int, mode: str, rng: np.random.Generator | None) -> np.ndarray:
    if mode == "infer":
        return np.broadcast_to(pool[:k], (batch, k)).copy()
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng")
        return np.stack([np.sort(rng.choice(pool, size=k, replace=False)) for _ in range(batch)])
    raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


def build_batch(
    scene: Scene,
    target_pose: geo.CameraPose,
    target_intr: geo.CameraIntrinsics,
    pixels: np.ndarray,
    config: SamplerConfig,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    exclude: int | None = None,
    views: np.ndarray | None = None,
) -> PatchGrid:
    """Sampler pipeline for (B, 2) target pixels of one target camera.

    ``exclude`` removes the target's own index from the candidates when the
    target is one of the scene's views. ``views`` overrides view selection.
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    B, K, M, p = len(pixels), config.k, config.m, config.patch_size
    if views is None:
        pool = reference_pool(scene, target_pose, config, exclude)
        views = choose_views(pool, B, K, mode, rng)
    views = np.asarray(views, dtype=np.int64)

    # canonical frame per ray
    o = geo.camera_center(target_pose)
    v = geo.pixel_directions(target_pose.R, target_intr, pixels)  # (B, 3)
    Rc = geo.canonical_rotation(v, target_pose.R[1], target_pose.R[0])  # (B, 3, 3)
    T_R = np.swapaxes(Rc, -1, -2)  # canonical <- world
    T_t = -T_R @ o  # (B, 3)

    ref_R = np.stack([p_.R for p_ in scene.poses])[views]  # (B, K, 3, 3)
    ref_t = np.stack([p_.t for p_ in scene.poses])[views]  # (B, K, 3)
    can_R = ref_R @ Rc[:, None]  # R' = R T_R^T
    can_t = ref_t - (can_R @ T_t[:, None, :, None])[..., 0]

    depths = geo.sample_depths(scene.near, scene.far, M)
    can_t, norm_depths = normalize_scale(can_t, depths, scene.far)
    cam_codes = encode_relative_pose(can_R, can_t)  # (B, K, 12)

    # reference rays through the canonical target ray (the +z axis)
    centers = cam_codes[..., 9:]  # (B, K, 3)
    q = np.zeros((M, 3))
    q[:, 2] = norm_depths
    rel = q[None, None] - centers[:, :, None]  # (B, K, M, 3)
    rel_norm = np.linalg.norm(rel, axis=-1, keepdims=True)
    dirs = rel / np.maximum(rel_norm, 1e-12)
    ray_codes = geo.plucker(centers[:, :, None], dirs)

    # epipolar samples in the original frame
    points = o + depths[None, :, None] * v[:, None, :]  # (B, M, 3)
    pix, z = geo.project_points(ref_R[:, :, None], ref_t[:, :, None], scene.intrinsics, points[:, None])
    valid = (z > geo.MIN_CAMERA_Z) & geo.in_bounds(pix, scene.intrinsics, p / 2)

    patches = sample_patches(scene.images, np.broadcast_to(views[:, :, None], (B, K, M)), pix, p)
    colors = patches[..., p // 2, p // 2, :]
    patches = np.where(valid[..., None, None, None], patches, 0.0).reshape(B, K, M, -1)
    colors = np.where(valid[..., None], colors, 0.0)

    return PatchGrid(
        patches=patches,
        center_colors=colors,
        ray_codes=ray_codes,
        depth_codes=encode_depth(norm_depths, config.freqs),
        cam_codes=cam_codes,
        valid=valid,
        views=views,
        depths=depths,
    )


def build_input(
    scene: Scene,
    target_pose: geo.CameraPose,
    target_intr: geo.CameraIntrinsics,
    target_pixel,
    config: SamplerConfig,
    w_e: Tensor | None = None,
    b_e: Tensor | None = None,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    exclude: int | None = None,
):
    """Single-ray input: the PatchGrid and, given embedding weights, the f0 grid.

    f0 is (K, M, C0) when weights are given, otherwise ``None``.
    """
    grid = build_batch(scene, target_pose, target_intr, np.asarray(target_pixel)[None], config, mode, rng, exclude)
    if w_e is None:
        return grid, None
    f0 = assemble_input(grid, w_e, b_e)
    return grid, f0.reshape(f0.shape[1:])


def assemble_input(grid: PatchGrid, w_e: Tensor, b_e: Tensor) -> Tensor:
    """f0 = [patch embedding || ray code || depth code || pose code || valid], (B, K, M, C0)."""
    dt = w_e.dtype
    B, K, M = grid.valid.shape
    emb = linear(Tensor(grid.patches.astype(dt)), w_e, b_e)
    codes = np.concatenate(
        [
            grid.ray_codes,
            np.broadcast_to(grid.depth_codes, (B, K) + grid.depth_codes.shape),
            np.broadcast_to(grid.cam_codes[:, :, None], (B, K, M, POSE_CODE_DIM)),
            grid.valid[..., None].astype(np.float64),
        ],
        axis=-1,
    )
    return concat([emb, Tensor(codes.astype(dt))], axis=-1)


def stage_codes(grid: PatchGrid, dtype) -> np.ndarray:
    """``[r || d || c]`` per (view, depth), appended to T2's inputs."""
    B, K, M = grid.valid.shape
    return np.concatenate(
        [
            grid.ray_codes,
            np.broadcast_to(grid.depth_codes, (B, K) + grid.depth_codes.shape),
            np.broadcast_to(grid.cam_codes[:, :, None], (B, K, M, POSE_CODE_DIM)),
        ],
        axis=-1,
    ).astype(dtype)

