"""Procedural Lambertian scenes, camera rigs and on-disk datasets.

Every image here comes from :func:`trace_rays`, a closed-form ray tracer over
textured planes and spheres. Because shading is Lambertian the color of a
surface point does not depend on the viewer, which is what lets a blending
renderer reproduce target pixels exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (
    CameraIntrinsics,
    CameraPose,
    Ray,
    SimilarityTransform,
    apply_similarity,
    camera_center,
    dot3,
    pixel_to_ray,
)

HIT_EPS = 1e-9
MANIFEST = "scene.json"
FORMAT_VERSION = 1


class SceneFormatError(ValueError):
    """Malformed or inconsistent on-disk scene."""


@dataclass(frozen=True)
class Texture:
    """Procedural albedo: ``checker`` squares or a triangle-wave ``gradient``."""

    kind: str = "checker"
    period: float = 1.0
    color_a: tuple = (0.9, 0.9, 0.9)
    color_b: tuple = (0.1, 0.1, 0.1)

    def __post_init__(self):
        if self.kind not in ("checker", "gradient", "solid"):
            raise ValueError(f"unknown texture kind {self.kind!r}")
        if self.period <= 0:
            raise ValueError("texture period must be positive")
        for c in (self.color_a, self.color_b):
            if len(c) != 3 or min(c) < 0 or max(c) > 1:
                raise ValueError(f"texture colors must be RGB in [0, 1], got {c}")

    def sample(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        a = np.asarray(self.color_a, dtype=np.float64)
        b = np.asarray(self.color_b, dtype=np.float64)
        if self.kind == "solid":
            w = np.zeros_like(u)
        elif self.kind == "checker":
            w = ((np.floor(u / self.period) + np.floor(v / self.period)) % 2).astype(np.float64)
        else:
            w = np.abs(np.mod(u / self.period, 2.0) - 1.0)
        return a + w[..., None] * (b - a)


@dataclass(frozen=True)
class Plane:
    """Rectangle centered at ``center`` spanning ``±half_extent`` along u/v axes."""

    center: tuple
    normal: tuple
    u_axis: tuple
    half_extent: tuple = (1.0, 1.0)
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        if min(self.half_extent) <= 0:
            raise ValueError("plane extent must be positive")
        n = np.asarray(self.normal, dtype=np.float64)
        u = np.asarray(self.u_axis, dtype=np.float64)
        if np.linalg.norm(n) < 1e-12 or np.linalg.norm(np.cross(n, u)) < 1e-12:
            raise ValueError("plane normal and u axis must be non-zero and non-parallel")

    def frame(self):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        u = np.asarray(self.u_axis, dtype=np.float64)
        u = u - (u @ n) * n
        u /= np.linalg.norm(u)
        return np.asarray(self.center, dtype=np.float64), n, u, np.cross(n, u)

    def intersect(self, o, d):
        c, n, u, v = self.frame()
        denom = dot3(d, n)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = dot3(c - o, n) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
        lu, lv = dot3(p - c, u), dot3(p - c, v)
        inside = (np.abs(lu) <= self.half_extent[0]) & (np.abs(lv) <= self.half_extent[1])
        t = np.where(inside & (t > HIT_EPS), t, np.inf)
        normal = np.broadcast_to(n, p.shape)
        return t, normal, lu, lv

    def contains(self, point) -> bool:
        return False


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def intersect(self, o, d):
        c = np.asarray(self.center, dtype=np.float64)
        oc = o - c
        b = dot3(d, oc)
        cc = dot3(oc, oc) - self.radius**2
        disc = b * b - cc
        root = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - root, -b + root
        t = np.where(t0 > HIT_EPS, t0, t1)
        t = np.where((disc >= 0) & (t > HIT_EPS), t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
        normal = (p - c) / self.radius
        # longitude/latitude arc lengths as texture coordinates
        lu = np.arctan2(normal[..., 0], -normal[..., 2]) * self.radius
        lv = np.arcsin(np.clip(normal[..., 1], -1.0, 1.0)) * self.radius
        return t, normal, lu, lv

    def contains(self, point) -> bool:
        return float(np.linalg.norm(np.asarray(point) - np.asarray(self.center))) < self.radius


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    light_dir: tuple = (0.3, -0.5, -1.0)
    intensity: float = 0.8
    ambient: float = 0.3
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.background) != 3 or min(self.background) < 0 or max(self.background) > 1:
            raise ValueError("background must be RGB in [0, 1]")

    @property
    def light(self) -> np.ndarray:
        l = np.asarray(self.light_dir, dtype=np.float64)
        return l / np.linalg.norm(l)


def trace_rays(spec: SceneSpec, origins: np.ndarray, directions: np.ndarray):
    """Nearest-hit Lambertian shading for (..., 3) rays.

    Returns ``(colors (..., 3), depth (...))`` where depth is the distance
    along the unit direction and ``nan`` for misses.
    """
    o, d = np.broadcast_arrays(np.asarray(origins, dtype=np.float64), np.asarray(directions, dtype=np.float64))
    best = np.full(o.shape[:-1], np.inf)
    color = np.broadcast_to(np.asarray(spec.background, dtype=np.float64), o.shape).copy()
    light = spec.light
    for prim in spec.primitives:
        t, normal, lu, lv = prim.intersect(o, d)
        closer = t < best
        if not np.any(closer):
            continue
        # face the normal toward the viewer so both sides of a plane shade alike
        facing = np.where((dot3(normal, d) > 0)[..., None], -normal, normal)
        albedo = prim.texture.sample(lu, lv)
        lambert = np.maximum(0.0, dot3(facing, light))
        shaded = np.clip(albedo * (lambert[..., None] * spec.intensity + spec.ambient), 0.0, 1.0)
        color = np.where(closer[..., None], shaded, color)
        best = np.where(closer, t, best)
    depth = np.where(np.isfinite(best), best, np.nan)
    return color, depth


def trace_ray(spec: SceneSpec, ray: Ray):
    """Single-ray form of :func:`trace_rays`; depth is ``None`` on a miss."""
    color, depth = trace_rays(spec, ray.origin, ray.direction)
    return color, (None if np.isnan(depth) else float(depth))


# ---------------------------------------------------------------------------
# rigs


def forward_grid(rows: int, cols: int, spacing: float, distance: float, look_at=(0.0, 0.0, 0.0)):
    """Cameras on the plane ``z = look_at.z - distance``, all looking down +z."""
    if rows < 1 or cols < 1:
        raise ValueError("grid needs at least one row and column")
    if distance <= 0:
        raise ValueError("rig distance must be positive")
    target = np.asarray(look_at, dtype=np.float64)
    poses = []
    for r in range(rows):
        for c in range(cols):
            eye = target + np.array([(c - (cols - 1) / 2) * spacing, (r - (rows - 1) / 2) * spacing, -distance])
            poses.append(CameraPose(np.eye(3), -eye))
    return poses


def arc(count: int, radius: float, span_deg: float, look_at=(0.0, 0.0, 0.0)):
    """Cameras on a horizontal circular arc, each aimed at ``look_at``."""
    if count < 1:
        raise ValueError("arc needs at least one camera")
    if radius <= 0:
        raise ValueError("arc radius must be positive")
    target = np.asarray(look_at, dtype=np.float64)
    span = math.radians(span_deg)
    angles = [0.0] if count == 1 else [-span / 2 + i * span / (count - 1) for i in range(count)]
    return [
        CameraPose.look_at(target + radius * np.array([math.sin(a), 0.0, -math.cos(a)]), target)
        for a in angles
    ]


def camera_rig(layout: dict, look_at=(0.0, 0.0, 0.0), width: int = 32, height: int | None = None, fov_deg: float = 50.0):
    """Build poses plus shared intrinsics from a layout description.

    ``layout`` is ``{"kind": "forward_grid", "rows", "cols", "spacing",
    "distance"}`` or ``{"kind": "arc", "count", "radius", "span"}``.
    """
    kind = layout.get("kind")
    if kind == "forward_grid":
        poses = forward_grid(layout["rows"], layout["cols"], layout["spacing"], layout["distance"], look_at)
    elif kind == "arc":
        poses = arc(layout["count"], layout["radius"], layout["span"], look_at)
    else:
        raise ValueError(f"unknown rig layout {kind!r}")
    for pose in poses:
        if np.linalg.norm(camera_center(pose) - np.asarray(look_at)) < 1e-12:
            raise ValueError("look_at point coincides with a camera center")
    return poses, CameraIntrinsics.from_fov(width, height or width, fov_deg)


# ---------------------------------------------------------------------------
# scenes


@dataclass
class Scene:
    """Posed multi-view images with depth bounds (distances along rays)."""

    images: np.ndarray  # (V, H, W, 3) in [0, 1]
    poses: list
    intrinsics: CameraIntrinsics
    near: float
    far: float

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be (V, H, W, 3), got {self.images.shape}")
        if len(self.poses) != len(self.images):
            raise ValueError(f"{len(self.images)} images but {len(self.poses)} poses")
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")

    @property
    def num_views(self) -> int:
        return len(self.poses)

    def transformed(self, sim: SimilarityTransform) -> "Scene":
        poses, near, far = apply_similarity(sim, self.poses, self.near, self.far)
        return replace(self, images=self.images.copy(), poses=poses, near=near, far=far)

    def subset(self, indices: Sequence[int]) -> "Scene":
        idx = list(indices)
        return replace(self, images=self.images[idx], poses=[self.poses[i] for i in idx])


def render_view(spec: SceneSpec, pose: CameraPose, intr: CameraIntrinsics):
    """Trace every pixel center; returns ``(image (H, W, 3), depth (H, W))``."""
    for prim in spec.primitives:
        if prim.contains(camera_center(pose)):
            raise ValueError("camera center lies inside a scene primitive")
    ys, xs = np.mgrid[0 : intr.height, 0 : intr.width]
    pix = np.stack([xs, ys], axis=-1).astype(np.float64)
    dirs = pixel_to_ray(pose, intr, pix).direction
    return trace_rays(spec, camera_center(pose), dirs)


def render_reference_views(spec: SceneSpec, poses: Sequence[CameraPose], intr: CameraIntrinsics, pad: float = 0.05) -> Scene:
    images, depths = zip(*(render_view(spec, p, intr) for p in poses))
    d = np.stack(depths)
    if np.all(np.isnan(d)):
        raise ValueError("no camera ray hits the scene; cannot bound depth")
    near = float(np.nanmin(d)) * (1 - pad)
    far = float(np.nanmax(d)) * (1 + pad)
    return Scene(np.stack(images), list(poses), intr, near, far)


# ---------------------------------------------------------------------------
# presets


def plane_checker_spec(period: float = 1.0) -> SceneSpec:
    back = Plane(
        center=(0.0, 0.0, 4.0),
        normal=(0.0, 0.0, -1.0),
        u_axis=(1.0, 0.0, 0.0),
        half_extent=(20.0, 20.0),
        texture=Texture("checker", period, (0.85, 0.55, 0.25), (0.2, 0.35, 0.6)),
    )
    return SceneSpec(primitives=(back,), light_dir=(0.2, -0.3, -1.0))


def plane_sphere_spec(period: float = 1.0) -> SceneSpec:
    sphere = Sphere(
        center=(0.1, 0.05, 2.6),
        radius=0.55,
        texture=Texture("gradient", 0.6, (0.9, 0.25, 0.2), (0.95, 0.85, 0.3)),
    )
    return replace(plane_checker_spec(period), primitives=plane_checker_spec(period).primitives + (sphere,))


PRESETS = {"plane-checker": plane_checker_spec, "plane-sphere": plane_sphere_spec}


def preset_scene(
    name: str,
    views: int = 12,
    size: int = 32,
    spacing: float = 0.15,
    distance: float = 4.0,
    fov_deg: float = 50.0,
    period: float | None = None,
) -> tuple[Scene, SceneSpec]:
    """Render a named preset on a forward grid with ``views`` cameras."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    if views < 2:
        raise ValueError("a scene needs at least two views")
    spec = PRESETS[name]() if period is None else PRESETS[name](period)
    rows = max(r for r in range(1, int(math.isqrt(views)) + 1) if views % r == 0)
    poses, intr = camera_rig(
        {"kind": "forward_grid", "rows": rows, "cols": views // rows, "spacing": spacing, "distance": distance},
        look_at=(0.0, 0.0, 4.0),
        width=size,
        fov_deg=fov_deg,
    )
    return render_reference_views(spec, poses, intr), spec


def random_scene_spec(rng: np.random.Generator) -> SceneSpec:
    """A back plane plus one or two textured spheres at random placements."""

    def color():
        return tuple(float(c) for c in rng.uniform(0.05, 0.95, size=3))

    prims: list = [
        Plane(
            center=(0.0, 0.0, float(rng.uniform(4.0, 6.0))),
            normal=(float(rng.normal(scale=0.1)), float(rng.normal(scale=0.1)), -1.0),
            u_axis=(1.0, float(rng.normal(scale=0.2)), 0.0),
            half_extent=(30.0, 30.0),
            texture=Texture("checker", float(rng.uniform(0.3, 0.8)), color(), color()),
        )
    ]
    for _ in range(int(rng.integers(1, 3))):
        prims.append(
            Sphere(
                center=(float(rng.uniform(-0.6, 0.6)), float(rng.uniform(-0.6, 0.6)), float(rng.uniform(2.0, 3.2))),
                radius=float(rng.uniform(0.2, 0.6)),
                texture=Texture("gradient", float(rng.uniform(0.2, 0.8)), color(), color()),
            )
        )
    return SceneSpec(
        primitives=tuple(prims),
        light_dir=tuple(float(x) for x in rng.normal(size=3) + np.array([0.0, 0.0, -2.0])),
    )


def random_scene(rng: np.random.Generator, views: int = 6, size: int = 16) -> tuple[Scene, SceneSpec]:
    """Random spec seen from jittered cameras roughly facing +z."""
    spec = random_scene_spec(rng)
    poses = []
    for _ in range(views):
        eye = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3)])
        target = np.array([rng.normal(scale=0.2), rng.normal(scale=0.2), 4.0])
        poses.append(CameraPose.look_at(eye, target))
    intr = CameraIntrinsics.from_fov(size, size, float(rng.uniform(40, 60)))
    return render_reference_views(spec, poses, intr), spec


# ---------------------------------------------------------------------------
# serialization


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = quantize(img)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[..., :3]).tobytes())


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_ppm(path: str | Path) -> np.ndarray:
    """Binary P6 reader; returns uint8 (H, W, 3)."""
    blob = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SceneFormatError(f"{path}: truncated PPM header")
        tokens.append(blob[start:pos])
    pos += 1
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise SceneFormatError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3)


def save_scene(scene: Scene, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    intr = scene.intrinsics
    views = []
    for i, (img, pose) in enumerate(zip(scene.images, scene.poses)):
        name = f"view_{i:04d}.ppm"
        write_ppm(directory / name, img)
        views.append({"image": name, "R": [float(x) for x in pose.R.reshape(-1)], "t": [float(x) for x in pose.t]})
    manifest = {
        "version": FORMAT_VERSION,
        "width": intr.width,
        "height": intr.height,
        "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy},
        "near": scene.near,
        "far": scene.far,
        "views": views,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return directory


def load_scene(directory: str | Path) -> Scene:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise SceneFormatError(f"{path}: manifest not found")
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}:{exc.lineno}: {exc.msg}") from exc

    def need(obj, key, where):
        if not isinstance(obj, dict) or key not in obj:
            raise SceneFormatError(f"{path}: missing field {where}{key!r}")
        return obj[key]

    try:
        intr_doc = need(doc, "intrinsics", "")
        intr = CameraIntrinsics(
            float(need(intr_doc, "fx", "intrinsics.")),
            float(need(intr_doc, "fy", "intrinsics.")),
            float(need(intr_doc, "cx", "intrinsics.")),
            float(need(intr_doc, "cy", "intrinsics.")),
            int(need(doc, "width", "")),
            int(need(doc, "height", "")),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, SceneFormatError):
            raise
        raise SceneFormatError(f"{path}: bad intrinsics: {exc}") from exc
    views = need(doc, "views", "")
    if not isinstance(views, list) or not views:
        raise SceneFormatError(f"{path}: 'views' must be a non-empty list")
    images, poses = [], []
    for i, view in enumerate(views):
        if not isinstance(view, dict) or "image" not in view or "R" not in view or "t" not in view:
            raise SceneFormatError(f"{path}: view {i} needs image, R and t (image/pose count mismatch)")
        if len(view["R"]) != 9 or len(view["t"]) != 3:
            raise SceneFormatError(f"{path}: view {i} pose needs 9 rotation and 3 translation values")
        img_path = directory / view["image"]
        if not img_path.is_file():
            raise SceneFormatError(f"{path}: missing image file {view['image']}")
        img = read_ppm(img_path)
        if img.shape[:2] != (intr.height, intr.width):
            raise SceneFormatError(f"{img_path}: size {img.shape[1]}x{img.shape[0]} does not match manifest")
        images.append(img.astype(np.float64) / 255.0)
        poses.append(CameraPose(np.array(view["R"], dtype=np.float64), np.array(view["t"], dtype=np.float64)))
    return Scene(np.stack(images), poses, intr, float(need(doc, "near", "")), float(need(doc, "far", "")))
