"""Command-line entry point: gen-scene, train, render, eval, check.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checks, metrics
from .geometry import CameraPose
from .model import CheckpointMismatch, ModelConfig, load_params, pixel_grid, render_image, render_pixels
from .sampler import SamplerConfig
from .scenes import PRESETS, Scene, SceneFormatError, load_scene, preset_scene, random_scene, save_scene, write_ppm
from .trainer import EvalTarget, NonFiniteLoss, TrainConfig, evaluate, format_table, train, view_sweep

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    """Bad flags, config or inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# key = value files


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"{source}:{n}: empty key")
        if key in out:
            raise UsageError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_kv(text, str(path))


def _convert(raw: str, kind, key: str):
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return raw.lower() in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


# ---------------------------------------------------------------------------
# run configuration


def _field_types(cls) -> dict[str, type]:
    hints = {"int": int, "float": float, "str": str, "bool": bool}
    return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in dataclasses.fields(cls)}


SAMPLER_KEYS = _field_types(SamplerConfig)
MODEL_KEYS = _field_types(ModelConfig)
TRAIN_KEYS = _field_types(TrainConfig)
PATH_KEYS = {"scenes": str, "out": str, "holdout": str, "eval_views": str}


def _all_keys() -> dict[str, type]:
    keys: dict[str, type] = {}
    for group in (SAMPLER_KEYS, MODEL_KEYS, TRAIN_KEYS, PATH_KEYS):
        for k, v in group.items():
            if k in keys:
                raise RuntimeError(f"config key {k!r} is ambiguous")
            keys[k] = v
    return keys


RUN_KEYS = _all_keys()


def _int_list(text: str, key: str) -> list[int]:
    if not text.strip():
        return []
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"{key}: expected comma-separated integers, got {text!r}") from None


@dataclasses.dataclass
class RunConfig:
    """Everything a training run needs, parsed and validated up front."""

    sampler: SamplerConfig
    model: ModelConfig
    train: TrainConfig
    scenes: list[str]
    out: str
    holdout: list[int]
    eval_views: list[int]

    @classmethod
    def from_values(cls, values: dict[str, str]) -> "RunConfig":
        unknown = sorted(set(values) - set(RUN_KEYS))
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        typed = {k: _convert(v, RUN_KEYS[k], k) for k, v in values.items()}

        def pick(keys):
            return {k: typed[k] for k in keys if k in typed}

        try:
            sampler = SamplerConfig(**pick(SAMPLER_KEYS))
            model = ModelConfig(**pick(MODEL_KEYS))
            tcfg = TrainConfig(**pick(TRAIN_KEYS))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid configuration: {exc}") from None
        scenes = [s for s in str(typed.get("scenes", "")).split(",") if s.strip()]
        return cls(
            sampler,
            model,
            tcfg,
            [s.strip() for s in scenes],
            str(typed.get("out", "")),
            _int_list(str(typed.get("holdout", "")), "holdout"),
            _int_list(str(typed.get("eval_views", "")), "eval_views"),
        )


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    for key, kind in RUN_KEYS.items():
        if key in ("scenes", "out", "threads"):
            continue
        p.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, metavar=kind.__name__.upper(), default=None)


def _collect_run_values(args) -> dict[str, str]:
    values = read_kv(args.config) if getattr(args, "config", None) else {}
    if getattr(args, "threads", None) is not None:
        values["threads"] = str(args.threads)
    elif "threads" not in values and os.environ.get("GPNR_THREADS", "").strip():
        values["threads"] = str(resolve_threads(None))
    for key in RUN_KEYS:
        flag = getattr(args, "cfg_" + key, None)
        if flag is not None:
            values[key] = str(flag)
    if getattr(args, "scenes", None):
        values["scenes"] = ",".join(args.scenes)
    if getattr(args, "out", None):
        values["out"] = args.out
    return values


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        n = flag
    else:
        env = os.environ.get("GPNR_THREADS", "").strip()
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"GPNR_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _load_scene(path: str) -> Scene:
    try:
        return load_scene(path)
    except FileNotFoundError as exc:
        raise UsageError(f"scene not found: {exc}") from None
    except SceneFormatError as exc:
        raise UsageError(str(exc)) from None


def _load_checkpoint(path: str, dtype=np.float32, config: str | None = None):
    expect = None
    if config:
        run = RunConfig.from_values(read_kv(config))
        expect = (run.sampler, run.model)
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        params, _ = load_params(path, expect, dtype=dtype)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except CheckpointMismatch as exc:
        raise UsageError(f"incompatible checkpoint: {exc}") from None
    return params


# ---------------------------------------------------------------------------
# commands


def cmd_gen_scene(args) -> int:
    values = read_kv(args.spec) if args.spec else {}
    for key in ("preset", "views", "size", "spacing", "distance", "fov", "period", "seed"):
        flag = getattr(args, key)
        if flag is not None:
            values[key] = str(flag)
    allowed = {"preset": str, "views": int, "size": int, "spacing": float, "distance": float, "fov": float, "period": float, "seed": int}
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise UsageError(f"unknown scene key(s): {', '.join(unknown)}")
    v = {k: _convert(values[k], allowed[k], k) for k in values}
    preset = v.get("preset", "plane-sphere")
    try:
        if preset == "random":
            scene, _ = random_scene(np.random.default_rng(v.get("seed", 0)), v.get("views", 6), v.get("size", 32))
        elif preset in PRESETS:
            scene, _ = preset_scene(
                preset,
                v.get("views", 12),
                v.get("size", 32),
                spacing=v.get("spacing", 0.15),
                distance=v.get("distance", 4.0),
                fov_deg=v.get("fov", 50.0),
                period=v.get("period"),
            )
        else:
            raise UsageError(f"unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS) + ['random'])}")
    except ValueError as exc:
        raise UsageError(f"invalid scene spec: {exc}") from None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_scene(scene, out)
    except OSError as exc:
        raise UsageError(f"cannot write scene to {out}: {exc.strerror or exc}") from None
    h, w = scene.images.shape[1:3]
    print(f"views={scene.num_views} size={w}x{h} near={scene.near:.6f} far={scene.far:.6f} -> {out}")
    return EXIT_OK


def _training_scenes(run: RunConfig) -> tuple[list[Scene], list[Scene]]:
    if not run.scenes:
        raise UsageError("no scenes given (use --scenes or 'scenes = dir1,dir2')")
    full = [_load_scene(s) for s in run.scenes]
    kept = []
    for sc in full:
        bad = [i for i in run.holdout if not 0 <= i < sc.num_views]
        if bad:
            raise UsageError(f"holdout view(s) {bad} out of range for a {sc.num_views}-view scene")
        kept.append(sc.subset([i for i in range(sc.num_views) if i not in run.holdout]))
    return full, kept


def heldout_targets(scene: Scene, views: Sequence[int], holdout: Sequence[int]) -> list[EvalTarget]:
    """Render ``views`` of ``scene`` from references that exclude every held-out view
    (and the target itself)."""
    keep = [i for i in range(scene.num_views) if i not in holdout]
    refs = scene.subset(keep)
    return [
        EvalTarget(f"view{v}", refs, scene.poses[v], scene.images[v], keep.index(v) if v in keep else None)
        for v in views
    ]


def cmd_train(args) -> int:
    run = RunConfig.from_values(_collect_run_values(args))
    tcfg = run.train
    threads = tcfg.threads
    if not run.out:
        raise UsageError("no output directory (use --out or 'out = dir')")
    full, kept = _training_scenes(run)
    eval_views = run.eval_views or run.holdout or [0]
    targets = heldout_targets(full[0], eval_views, run.holdout)

    def eval_fn(params):
        return evaluate(params, targets, threads=threads)[-1]["psnr"]

    out = Path(run.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out}: {exc.strerror}") from None
    try:
        result = train(kept, run.sampler, run.model, tcfg, out, resume=args.resume, eval_fn=eval_fn)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointMismatch as exc:
        raise UsageError(f"incompatible checkpoint: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    last = [r for r in result.log if "loss" in r]
    loss = last[-1]["loss"] if last else float("nan")
    psnr = eval_fn(result.params)
    print(f"done steps={tcfg.total_steps} loss={loss:.6g} eval_psnr={psnr:.4f} -> {out / 'final.gpnr'}")
    return EXIT_OK


def _parse_pose(text: str) -> CameraPose:
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError("--pose expects 12 comma-separated numbers (R row-major, then t)") from None
    if len(vals) != 12:
        raise UsageError(f"--pose expects 12 numbers, got {len(vals)}")
    pose = CameraPose(np.array(vals[:9]).reshape(3, 3), np.array(vals[9:]))
    try:
        pose.check()
    except ValueError as exc:
        raise UsageError(f"--pose: {exc}") from None
    return pose


def cmd_render(args) -> int:
    threads = resolve_threads(args.threads)
    dtype = np.float64 if args.fp64 else np.float32
    params = _load_checkpoint(args.checkpoint, dtype, args.config)
    scene = _load_scene(args.scene)
    holdout = _int_list(args.exclude or "", "--exclude")
    keep = [i for i in range(scene.num_views) if i not in holdout]
    refs = scene.subset(keep)
    if args.pose:
        pose, exclude = _parse_pose(args.pose), None
    else:
        if not 0 <= args.view < scene.num_views:
            raise UsageError(f"view {args.view} out of range for a {scene.num_views}-view scene")
        pose = scene.poses[args.view]
        exclude = keep.index(args.view) if args.view in keep else None
    intr = scene.intrinsics
    if args.dump_attention:
        color, alpha, beta, views = render_pixels(
            params, refs, pose, intr, pixel_grid(intr), exclude, threads=threads, keep_weights=True
        )
        image = color.reshape(intr.height, intr.width, 3)
        _dump_attention(Path(args.dump_attention), alpha, beta, views, intr.height, intr.width)
    else:
        image = render_image(params, refs, pose, intr, exclude=exclude, threads=threads)
    image = np.clip(image, 0.0, 1.0)
    try:
        write_ppm(args.out, image)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc.strerror}") from None
    line = f"wrote {args.out}"
    if not args.pose:
        line += f" psnr={metrics.psnr(image, scene.images[args.view]):.4f}"
    print(line)
    return EXIT_OK


def _dump_attention(directory: Path, alpha, beta, views, h: int, w: int) -> None:
    """Per slot k: ``beta_k.ppm`` (gray, beta scaled to [0, 1]) and
    ``depth_k.ppm`` (argmax of alpha over depth samples, scaled by M - 1).
    ``beta.npy`` and ``views.npy`` carry the raw values."""
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {directory}: {exc.strerror}") from None
    K, M = alpha.shape[1], alpha.shape[2]
    np.save(directory / "beta.npy", beta.reshape(h, w, K))
    np.save(directory / "views.npy", views.reshape(h, w, K))
    for k in range(K):
        b = beta[:, k].reshape(h, w)
        write_ppm(directory / f"beta_{k}.ppm", np.repeat(b[..., None], 3, axis=-1))
        idx = alpha[:, k].argmax(axis=-1).reshape(h, w) / max(M - 1, 1)
        write_ppm(directory / f"depth_{k}.ppm", np.repeat(idx[..., None], 3, axis=-1))


def cmd_eval(args) -> int:
    threads = resolve_threads(args.threads)
    if args.sweep_k:
        return _eval_sweep(args)
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint (or --sweep-k with a training config)")
    params = _load_checkpoint(args.checkpoint, config=args.config)
    holdout = _int_list(args.held_out or "", "--held-out")
    rows = []
    for path in args.scenes:
        scene = _load_scene(path)
        views = holdout or list(range(scene.num_views))
        bad = [v for v in views if not 0 <= v < scene.num_views]
        if bad:
            raise UsageError(f"view(s) {bad} out of range for {path}")
        table = evaluate(params, heldout_targets(scene, views, holdout), threads=threads)[:-1]
        prefix = f"{Path(path).name}/" if len(args.scenes) > 1 else ""
        rows += [dict(r, view=prefix + r["view"]) for r in table]
    rows.append({"view": "mean", "psnr": float(np.mean([r["psnr"] for r in rows])), "ssim": float(np.mean([r["ssim"] for r in rows]))})
    _emit(format_table(rows), args.csv)
    return EXIT_OK


def _eval_sweep(args) -> int:
    values = _collect_run_values(args)
    if args.held_out:
        values["holdout"] = args.held_out
    run = RunConfig.from_values(values)
    ks = _int_list(args.sweep_k, "--sweep-k")
    full, kept = _training_scenes(run)
    views = run.eval_views or run.holdout
    if not views:
        raise UsageError("a K sweep needs held-out views (holdout = ... or --held-out)")
    rows = view_sweep(kept, lambda: heldout_targets(full[0], views, run.holdout), ks, run.sampler, run.model, run.train)
    _emit(format_table(rows, key="K"), args.csv)
    return EXIT_OK


def _emit(table: str, csv_path: str | None) -> None:
    sys.stdout.write(table)
    if csv_path:
        try:
            Path(csv_path).write_text(table, encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot write {csv_path}: {exc.strerror}") from None


def cmd_check(args) -> int:
    suite = checks.SUITES[args.mode]
    results = suite(seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"violated: {'; '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpnr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="render a synthetic scene to scene.json + PPM views")
    g.add_argument("--spec", help="key = value scene spec file")
    g.add_argument("--preset", help=f"one of {', '.join(sorted(PRESETS))}, random")
    g.add_argument("--views", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--spacing", type=float)
    g.add_argument("--distance", type=float)
    g.add_argument("--fov", type=float)
    g.add_argument("--period", type=float, help="checker period of the back plane")
    g.add_argument("--seed", type=int, help="seed for the random preset")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="train a model; writes checkpoints and metrics.jsonl")
    t.add_argument("--config", help="key = value run config")
    t.add_argument("--scenes", nargs="+")
    t.add_argument("--out")
    t.add_argument("--resume", help="checkpoint to continue from")
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render one view to PPM")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--pose", help="12 numbers: world-to-camera R (row-major) and t")
    r.add_argument("--exclude", help="comma-separated views never used as references")
    r.add_argument("--out", required=True)
    r.add_argument("--config", help="run config the checkpoint must match")
    r.add_argument("--dump-attention", metavar="DIR")
    prec = r.add_mutually_exclusive_group()
    prec.add_argument("--fp64", action="store_true")
    prec.add_argument("--fp32", action="store_true")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM table for held-out views")
    e.add_argument("--checkpoint")
    e.add_argument("--scenes", nargs="+", required=True)
    e.add_argument("--held-out", help="comma-separated view indices")
    e.add_argument("--csv")
    e.add_argument("--sweep-k", help="comma-separated K values; trains one model per K")
    e.add_argument("--config", help="run config: checked against --checkpoint, or used to train for --sweep-k")
    _add_run_flags(e)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="built-in verification suites")
    c.add_argument("mode", choices=sorted(checks.SUITES))
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)

    for p in (t, r, e):
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: GPNR_THREADS or 1)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
