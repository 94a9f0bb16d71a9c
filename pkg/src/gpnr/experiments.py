"""Desk-scale experiments: overfit a single synthetic scene, vary K or the head."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

from .model import GpnrParams, ModelConfig
from .sampler import SamplerConfig
from .scenes import Scene, preset_scene
from .trainer import EvalTarget, TrainConfig, evaluate, train, training_view_target

VIEWS = 12
SIZE = 32
HELD_OUT = 6  # interior view of the 3 x 4 grid
TRAIN_VIEW = 5  # interior neighbour that stays in the training set

OVERFIT_SAMPLER = SamplerConfig(patch_size=5, k=4, m=16, n=8, freqs=8, embed_dim=32)
OVERFIT_MODEL = ModelConfig(width=32, blocks=2, heads=4, feature_hidden=64)
OVERFIT_TRAIN = TrainConfig(
    batch_rays=256, total_steps=5000, warmup_steps=200, base_lr=1e-3, seed=0, log_every=100, checkpoint_every=0, eval_every=0
)


def overfit_scene() -> tuple[Scene, Scene]:
    """``(full 12-view scene, 11-view training scene without HELD_OUT)``."""
    full, _ = preset_scene("plane-sphere", VIEWS, SIZE)
    return full, full.subset([i for i in range(VIEWS) if i != HELD_OUT])


@dataclass
class OverfitResult:
    k: int
    head: str
    train_psnr: float
    train_ssim: float
    held_psnr: float
    held_ssim: float
    seconds: float
    params: GpnrParams
    log: list


def overfit_targets(full: Scene, kept: Scene) -> list[EvalTarget]:
    # kept indices below HELD_OUT equal the original ones
    return [
        training_view_target(kept, TRAIN_VIEW, f"train{TRAIN_VIEW}"),
        EvalTarget(f"held{HELD_OUT}", kept, full.poses[HELD_OUT], full.images[HELD_OUT], None),
    ]


def run_overfit(
    k: int = 4, head: str = "blend", steps: int | None = None, progress=None, train_cfg: TrainConfig | None = None
) -> OverfitResult:
    sampler = replace(OVERFIT_SAMPLER, k=k, n=max(OVERFIT_SAMPLER.n, k))
    model = replace(OVERFIT_MODEL, head=head)
    cfg = train_cfg or OVERFIT_TRAIN
    if steps is not None:
        cfg = replace(cfg, total_steps=steps, warmup_steps=min(cfg.warmup_steps, steps // 10))
    full, kept = overfit_scene()
    start = time.perf_counter()
    result = train([kept], sampler, model, cfg, progress=progress)
    seconds = time.perf_counter() - start
    rows = evaluate(result.params, overfit_targets(full, kept))
    return OverfitResult(
        k, head, rows[0]["psnr"], rows[0]["ssim"], rows[1]["psnr"], rows[1]["ssim"], seconds, result.params, result.log
    )
