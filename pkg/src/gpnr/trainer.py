"""Photometric training: ray batches, MSE, Adam, warmup + cosine schedule."""

from __future__ import annotations

import ctypes
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .geometry import CameraPose
from .model import GpnrParams, ModelConfig, forward, init_params, load_params, render_image, save_params
from .sampler import SamplerConfig, build_batch
from .scenes import Scene
from .tensor import Tape, Tensor, backward, mul, tsum

# named random sub-streams derived from the single run seed
STREAMS = {"scene": 1, "view-select": 2, "init": 3, "batch": 4}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name], *extra])


def tune_allocator() -> bool:
    """Keep freed large blocks on the heap (glibc only).

    Each step allocates and frees the same few hundred multi-megabyte
    temporaries; by default glibc returns them to the OS and every step pays
    the page faults again.
    """
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return False
    M_TRIM_THRESHOLD, M_TOP_PAD, M_MMAP_THRESHOLD = -1, -2, -3
    ok = libc.mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024)
    ok &= libc.mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024)
    ok &= libc.mallopt(M_TOP_PAD, 64 * 1024 * 1024)
    return bool(ok)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    batch_rays: int = 256
    total_steps: int = 5000
    warmup_steps: int = 200
    base_lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1000
    eval_every: int = 1000
    log_every: int = 50
    chunk_rays: int = 0  # 0: whole batch on one tape
    threads: int = 1

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.batch_rays < 1:
            raise ValueError("batch_rays must be >= 1")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: GpnrParams) -> "AdamState":
        return cls(
            {k: np.zeros_like(t.data) for k, t in params},
            {k: np.zeros_like(t.data) for k, t in params},
            0,
        )


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to 0 at ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def adam_step(params: GpnrParams, grads: dict[str, np.ndarray], state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    missing = [k for k, _ in params if k not in grads]
    if missing:
        raise KeyError(f"no gradient for parameter(s): {', '.join(missing[:5])}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype)


def photometric_loss(pred: Tensor, gt) -> Tensor:
    """Mean squared error over rays and channels."""
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    if pred.shape != gt.shape:
        raise ValueError(f"loss shape mismatch: {pred.shape} vs {gt.shape}")
    diff = pred - Tensor(gt.astype(pred.dtype))
    return mul(tsum(mul(diff, diff)), 1.0 / gt.size)


# ---------------------------------------------------------------------------


def _chunk_grads(params: GpnrParams, grid, gt: np.ndarray, total: int, head: str):
    with Tape():
        out = forward(params, grid, head)
        diff = out.color - Tensor(gt.astype(params.dtype))
        loss = mul(tsum(mul(diff, diff)), 1.0 / (total * 3))
    gmap = backward(loss)
    return float(loss.data), {name: gmap.get(t) for name, t in params}


def batch_gradients(params: GpnrParams, grid, gt: np.ndarray, chunk: int = 0, threads: int = 1):
    """Loss and gradients for one ray batch.

    Chunks get their own tapes; their gradients are summed in chunk order,
    so the result does not depend on ``threads``.
    """
    total = grid.batch
    chunk = chunk or total
    starts = list(range(0, total, chunk))
    head = params.model.head

    def run(s):
        return _chunk_grads(params, grid.select(slice(s, s + chunk)), gt[s : s + chunk], total, head)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    loss = 0.0
    grads: dict[str, np.ndarray] = {}
    for part_loss, part in parts:
        loss += part_loss
        for name, g in part.items():
            if g is None:
                g = np.zeros_like(params[name].data)
            grads[name] = g if name not in grads else grads[name] + g
    return loss, grads


def sample_batch(scenes: Sequence[Scene], cfg: TrainConfig, sampler: SamplerConfig, step: int):
    """Scene, target view and pixels for one step, plus its PatchGrid."""
    rng = stream(cfg.seed, "batch", step)
    si = int(rng.integers(len(scenes)))
    scene = scenes[si]
    view = int(rng.integers(scene.num_views))
    intr = scene.intrinsics
    count = min(cfg.batch_rays, intr.width * intr.height)
    flat = rng.choice(intr.width * intr.height, size=count, replace=False)
    rows, cols = np.divmod(flat, intr.width)
    pixels = np.stack([cols, rows], axis=-1).astype(np.float64)
    grid = build_batch(
        scene, scene.poses[view], intr, pixels, sampler, "train", stream(cfg.seed, "view-select", step), exclude=view
    )
    gt = scene.images[view][rows, cols]
    return grid, gt


@dataclass
class TrainResult:
    params: GpnrParams
    state: AdamState
    log: list


def _state_tensors(state: AdamState, step: int) -> dict[str, np.ndarray]:
    out = {}
    for k in state.m:
        out[f"adam.m.{k}"] = state.m[k]
        out[f"adam.v.{k}"] = state.v[k]
    out["adam.step"] = np.array([state.step], dtype=np.float32)
    out["train.step"] = np.array([step], dtype=np.float32)
    return out


def save_checkpoint(path, params: GpnrParams, state: AdamState, step: int) -> None:
    save_params(params, path, extra=_state_tensors(state, step))


def load_checkpoint(path, expect=None):
    """Returns ``(params, state, step)``; state is fresh if none was saved."""
    params, extra = load_params(path, expect)
    if "adam.step" not in extra:
        return params, AdamState.zeros_like(params), 0
    state = AdamState(
        {k: extra[f"adam.m.{k}"].astype(params.dtype) for k, _ in params},
        {k: extra[f"adam.v.{k}"].astype(params.dtype) for k, _ in params},
        int(extra["adam.step"][0]),
    )
    return params, state, int(extra["train.step"][0])


def train(
    scenes: Sequence[Scene],
    sampler: SamplerConfig,
    model: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    eval_fn: Callable[[GpnrParams], float] | None = None,
    stop_at: int | None = None,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run (or resume) training; deterministic given ``cfg.seed``.

    Writes ``metrics.jsonl`` and periodic checkpoints when ``out_dir`` is set.
    ``stop_at`` ends early at that step without changing the schedule.
    """
    tune_allocator()
    for s in scenes:
        if s.num_views <= sampler.k:
            raise ValueError(f"every scene needs more than K={sampler.k} views, got {s.num_views}")
    if resume is not None:
        params, state, start = load_checkpoint(resume, (sampler, model))
    else:
        params = init_params(sampler, model, stream(cfg.seed, "init"))
        state, start = AdamState.zeros_like(params), 0
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.jsonl", "a" if resume is not None else "w", encoding="utf-8")
    log: list = []
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    try:
        for step in range(start, end):
            grid, gt = sample_batch(scenes, cfg, sampler, step)
            loss, grads = batch_gradients(params, grid, gt, cfg.chunk_rays, cfg.threads)
            if not math.isfinite(loss):
                bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
                if out is not None:
                    save_checkpoint(out / "nonfinite.gpnr", params, state, step)
                raise NonFiniteLoss(step, f"loss={loss}; non-finite grads in {bad[:5]}")
            lr = lr_at(step + 1, cfg)
            adam_step(params, grads, state, lr, cfg)
            done = step + 1
            if done % cfg.log_every == 0 or done == end:
                rec = {"step": done, "lr": lr, "loss": loss, "psnr": -10.0 * math.log10(max(loss, 1e-10))}
                log.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
                if progress:
                    progress(rec)
            if eval_fn is not None and cfg.eval_every and done % cfg.eval_every == 0:
                rec = {"step": done, "eval_psnr": eval_fn(params)}
                log.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
            if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{done:06d}.gpnr", params, state, done)
        if out is not None:
            save_checkpoint(out / "final.gpnr", params, state, end)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(params, state, log)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalTarget:
    """A view to render: pose, ground truth, and (if it is one of the scene's
    own views) its index so it is excluded from the references."""

    name: str
    scene: Scene
    pose: CameraPose
    image: np.ndarray
    exclude: int | None = None


def training_view_target(scene: Scene, index: int, name: str | None = None) -> EvalTarget:
    return EvalTarget(name or f"view{index}", scene, scene.poses[index], scene.images[index], index)


def evaluate(params: GpnrParams, targets: Sequence[EvalTarget], threads: int = 1) -> list[dict]:
    """Per-target PSNR/SSIM rows followed by a ``mean`` row."""
    rows = []
    for t in targets:
        intr = t.scene.intrinsics
        img = np.clip(render_image(params, t.scene, t.pose, intr, exclude=t.exclude, threads=threads), 0.0, 1.0)
        rep = metrics.report(img, t.image)
        rows.append({"view": t.name, "psnr": rep.psnr, "ssim": rep.ssim})
    if rows:
        rows.append(
            {
                "view": "mean",
                "psnr": float(np.mean([r["psnr"] for r in rows])),
                "ssim": float(np.mean([r["ssim"] for r in rows])),
            }
        )
    return rows


def format_table(rows: list[dict], key: str = "view") -> str:
    """Comma-separated table with a header row."""
    cols = [key] + [c for c in rows[0] if c != key] if rows else [key]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    return "\n".join(lines) + "\n"


def view_sweep(
    scenes: Sequence[Scene],
    targets_for: Callable[[], Sequence[EvalTarget]],
    k_values: Sequence[int],
    sampler: SamplerConfig,
    model: ModelConfig,
    cfg: TrainConfig,
    trained: dict[int, GpnrParams] | None = None,
) -> list[dict]:
    """Train (unless supplied in ``trained``) and evaluate one model per K.

    The candidate pool N is raised to K where needed.
    """
    rows = []
    for k in k_values:
        sc = replace(sampler, k=k, n=max(sampler.n, k))
        params = (trained or {}).get(k)
        if params is None:
            params = train(scenes, sc, model, cfg).params
        table = evaluate(params, targets_for())
        mean = table[-1]
        rows.append({"K": k, "psnr": mean["psnr"], "ssim": mean["ssim"]})
    return rows
