"""Self-check suites shared by the ``check`` command and the test-suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .model import ModelConfig, forward, init_params, pixel_grid
from .sampler import SamplerConfig, build_batch
from .scenes import random_scene
from .tensor import Tensor, grad_check, mul, tsum

GRAD_TOL = 1e-5
INVARIANCE_TOL = 1e-5
GEOMETRY_TOL = 1e-7
EPIPOLAR_TOL = 1e-6


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.value < self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.value:.3e} (tol {self.tol:g})"


def random_camera(rng: np.random.Generator, size: int = 32) -> tuple[geo.CameraPose, geo.CameraIntrinsics]:
    eye = rng.normal(scale=2.0, size=3)
    target = eye + rng.normal(size=3)
    intr = geo.CameraIntrinsics.from_fov(size, size, float(rng.uniform(30, 90)))
    return geo.CameraPose.look_at(eye, target, up=geo.random_rotation(rng)[0]), intr


# ---------------------------------------------------------------------------
# geometry


def check_canonicalization(rng: np.random.Generator, trials: int = 10_000) -> list[CheckResult]:
    origin = direction = ortho = 0.0
    for _ in range(trials):
        pose, intr = random_camera(rng)
        pixel = rng.uniform(-0.5, intr.width - 0.5, size=2)
        T = geo.canonicalizing_transform(pose, intr, pixel)
        ray = T.apply_ray(geo.pixel_to_ray(pose, intr, pixel))
        origin = max(origin, float(np.linalg.norm(ray.origin)))
        direction = max(direction, float(np.linalg.norm(ray.direction - [0.0, 0.0, 1.0])))
        ortho = max(ortho, float(np.abs(T.R @ T.R.T - np.eye(3)).max()), abs(float(np.linalg.det(T.R)) - 1.0))
    return [
        CheckResult("canonical ray origin at 0", origin, GEOMETRY_TOL),
        CheckResult("canonical ray direction +z", direction, GEOMETRY_TOL),
        CheckResult("canonical rotation orthonormal", ortho, GEOMETRY_TOL),
    ]


def check_epipolar(rng: np.random.Generator, trials: int = 10_000) -> CheckResult:
    """Project a target-ray point into a reference view, lift it back at the
    same camera depth, and measure its distance to the target ray."""
    worst = 0.0
    done = 0
    while done < trials:
        target, intr = random_camera(rng)
        ref, ref_intr = random_camera(rng)
        ray = geo.pixel_to_ray(target, intr, rng.uniform(0, intr.width - 1, size=2))
        depth = float(rng.uniform(0.1, 10.0))
        point = ray.at(depth)
        pix, z = geo.project_points(ref.R, ref.t, ref_intr, point)
        if z <= geo.MIN_CAMERA_Z * 1e4:
            continue  # behind or grazing the reference camera
        back = geo.unproject(ref, ref_intr, pix, z)
        worst = max(worst, float(geo.point_line_distance(back, ray)))
        done += 1
    return CheckResult("epipolar sample lies on target ray", worst, EPIPOLAR_TOL)


def check_plucker(rng: np.random.Generator, trials: int = 1000) -> CheckResult:
    """Plücker coordinates do not depend on where the origin sits on the line."""
    o = rng.normal(size=(trials, 3))
    d = rng.normal(size=(trials, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    shift = rng.uniform(-5, 5, size=(trials, 1))
    err = np.abs(geo.plucker(o, d) - geo.plucker(o + shift * d, d)).max()
    return CheckResult("plucker origin independence", float(err), 1e-12)


def geometry_suite(seed: int = 0, trials: int = 10_000) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [*check_canonicalization(rng, trials), check_epipolar(rng, trials), check_plucker(rng)]


# ---------------------------------------------------------------------------
# gradients


TINY_SAMPLER = SamplerConfig(patch_size=3, k=2, m=3, n=3, freqs=2, embed_dim=4)


def tiny_model(head: str) -> ModelConfig:
    return ModelConfig(width=8, blocks=1, heads=2, head=head, feature_hidden=8)


def grad_error(head: str, seed: int = 0, rays: int = 3, std: float = 0.3) -> float:
    """Max relative error of the ray loss gradient, 64-bit, tiny config.

    The loss is the MSE against ground truth. Weights are drawn wider
    than the training init so most gradients are well away from zero. Some
    entries are exactly zero by construction (the token half of each logit
    weight is shared by every softmax input), and for those the central
    difference only sees rounding noise of about ``ulp(loss) / 2h``.
    """
    rng = np.random.default_rng(seed)
    scene, _ = random_scene(rng, views=4, size=12)
    params = init_params(TINY_SAMPLER, tiny_model(head), rng, dtype=np.float64, std=std)
    pixels = rng.uniform(0, scene.intrinsics.width - 1, size=(rays, 2))
    grid = build_batch(scene, scene.poses[0], scene.intrinsics, pixels, TINY_SAMPLER, "infer", exclude=0)
    ij = np.round(pixels).astype(int)
    gt = Tensor(scene.images[0][ij[:, 1], ij[:, 0]])

    def loss():
        d = forward(params, grid).color - gt
        return mul(tsum(mul(d, d)), 1.0 / d.data.size)

    return grad_check(loss, [t for _, t in params])


def grads_suite(seed: int = 0) -> list[CheckResult]:
    return [CheckResult(f"gradient check, {head} head", grad_error(head, seed), GRAD_TOL) for head in ("blend", "feature")]


# ---------------------------------------------------------------------------
# similarity invariance


def invariance_error(
    scene_seed: int, similarities: int = 20, rays: int = 16, sampler: SamplerConfig | None = None, dtype=np.float32
) -> float:
    """Largest change of color, alpha or beta when the scene is moved by a
    random similarity, over ``similarities`` transforms."""
    rng = np.random.default_rng(scene_seed)
    sampler = sampler or SamplerConfig(patch_size=3, k=3, m=8, n=4, freqs=4, embed_dim=8)
    scene, _ = random_scene(rng, views=6, size=16)
    params = init_params(sampler, ModelConfig(width=16, blocks=1, heads=2), rng, dtype=dtype, std=0.2)
    target = int(rng.integers(scene.num_views))
    pixels = pixel_grid(scene.intrinsics)[rng.choice(scene.intrinsics.width * scene.intrinsics.height, rays, replace=False)]

    def render(sc):
        grid = build_batch(sc, sc.poses[target], sc.intrinsics, pixels, sampler, "infer", exclude=target)
        out = forward(params, grid)
        return out.color.data, out.alpha.data, out.beta.data

    base = render(scene)
    worst = 0.0
    for _ in range(similarities):
        moved = render(scene.transformed(geo.SimilarityTransform.random(rng)))
        worst = max(worst, *(float(np.abs(a - b).max()) for a, b in zip(base, moved)))
    return worst


def invariance_suite(seed: int = 0, scenes: int = 1, similarities: int = 20) -> list[CheckResult]:
    worst = max(invariance_error(seed + i, similarities) for i in range(scenes))
    return [CheckResult(f"similarity invariance ({scenes} scene(s) x {similarities})", worst, INVARIANCE_TOL)]


SUITES = {"geometry": geometry_suite, "grads": grads_suite, "invariance": invariance_suite}
