"""Three-stage transformer renderer.

Stage 1 mixes the K views at each depth, stage 2 aggregates the M depth
samples of each view behind a target-ray token, stage 3 aggregates views
behind a second token. Attention-style weights from the last two stages
blend the sampled reference colors into the output color.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import geometry as geo
from .sampler import POSE_CODE_DIM, PatchGrid, SamplerConfig, assemble_input, build_batch, stage_codes
from .scenes import Scene
from .tensor import (
    Tensor,
    broadcast_to,
    concat,
    layer_norm,
    linear,
    load_tensors,
    matmul,
    mlp_block,
    reshape,
    save_tensors,
    self_attention,
    sigmoid,
    softmax,
    transpose,
)

HEAD_MODES = ("blend", "feature")


class CheckpointMismatch(ValueError):
    """A checkpoint does not fit the requested configuration."""


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64
    blocks: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    head: str = "blend"
    feature_hidden: int = 64

    def __post_init__(self):
        if self.head not in HEAD_MODES:
            raise ValueError(f"head must be one of {HEAD_MODES}, got {self.head!r}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by {self.heads} heads")
        if self.blocks < 1:
            raise ValueError("each stack needs at least one block")


@dataclass
class RenderRecord:
    color: np.ndarray  # (3,)
    alpha: np.ndarray  # (K, M)
    beta: np.ndarray  # (K,)
    views: np.ndarray  # (K,)


@dataclass
class Output:
    """Batched forward result; tensors stay on the tape when one is active."""

    color: Tensor  # (B, 3)
    alpha: Tensor  # (B, K, M)
    beta: Tensor  # (B, K)


# ---------------------------------------------------------------------------
# parameters


class GpnrParams:
    """Named learnable tensors plus the configs they were built for."""

    def __init__(self, tensors: dict[str, Tensor], sampler: SamplerConfig, model: ModelConfig):
        self.tensors = tensors
        self.sampler = sampler
        self.model = model

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def astype(self, dtype) -> "GpnrParams":
        return GpnrParams(
            {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.tensors.items()},
            self.sampler,
            self.model,
        )

    def copy(self) -> "GpnrParams":
        return self.astype(self.dtype)

    def stack_names(self, prefix: str) -> list[str]:
        return [k for k in self.tensors if k.startswith(prefix)]


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.normal(size=shape)
    bad = np.abs(x) > 2
    while np.any(bad):
        x[bad] = rng.normal(size=int(bad.sum()))
        bad = np.abs(x) > 2
    return x * std


def _stack_shapes(prefix: str, cfg: ModelConfig) -> dict[str, tuple]:
    d, h = cfg.width, cfg.width * cfg.mlp_ratio
    shapes = {}
    for i in range(cfg.blocks):
        b = f"{prefix}.blocks.{i}"
        shapes.update(
            {
                f"{b}.ln1.g": (d,),
                f"{b}.ln1.b": (d,),
                f"{b}.attn.wq": (d, d),
                f"{b}.attn.wk": (d, d),
                f"{b}.attn.wv": (d, d),
                f"{b}.attn.wo": (d, d),
                f"{b}.ln2.g": (d,),
                f"{b}.ln2.b": (d,),
                f"{b}.mlp.w1": (d, h),
                f"{b}.mlp.b1": (h,),
                f"{b}.mlp.w2": (h, d),
                f"{b}.mlp.b2": (d,),
            }
        )
    shapes[f"{prefix}.ln.g"] = (d,)
    shapes[f"{prefix}.ln.b"] = (d,)
    return shapes


def param_shapes(sampler: SamplerConfig, cfg: ModelConfig) -> dict[str, tuple]:
    d = cfg.width
    shapes = {
        "embed.w": (sampler.patch_dim, sampler.embed_dim),
        "embed.b": (sampler.embed_dim,),
        "t1.in.w": (sampler.input_dim, d),
        "t1.in.b": (d,),
        **_stack_shapes("t1", cfg),
        "t2.in.w": (d + sampler.code_dim, d),
        "t2.in.b": (d,),
        "t2.token": (d,),
        **_stack_shapes("t2", cfg),
        "alpha.w": (2 * d, 1),
        "t3.in.w": (d + POSE_CODE_DIM, d),
        "t3.in.b": (d,),
        "t3.token": (d,),
        **_stack_shapes("t3", cfg),
        "beta.w": (2 * d, 1),
        "head.w1": (d, cfg.feature_hidden),
        "head.b1": (cfg.feature_hidden,),
        "head.w2": (cfg.feature_hidden, 3),
        "head.b2": (3,),
    }
    return shapes


def init_params(
    sampler: SamplerConfig, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32, std: float = 0.02
) -> GpnrParams:
    """Truncated-normal weights, zero biases, unit LayerNorm gains.

    The feature-head MLP is always allocated; in blend mode it is unused and
    receives zero gradient.
    """
    tensors = {}
    for name, shape in param_shapes(sampler, cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = _trunc_normal(rng, shape, std)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return GpnrParams(tensors, sampler, cfg)


# ---------------------------------------------------------------------------
# network


def transformer_stack(x: Tensor, params: GpnrParams, prefix: str) -> Tensor:
    """Pre-LN blocks ``x += SA(LN x); x += MLP(LN x)`` then a final LN."""
    cfg = params.model
    p = params.tensors
    for i in range(cfg.blocks):
        b = f"{prefix}.blocks.{i}"
        h = layer_norm(x, p[f"{b}.ln1.g"], p[f"{b}.ln1.b"])
        x = x + self_attention(h, cfg.heads, p[f"{b}.attn.wq"], p[f"{b}.attn.wk"], p[f"{b}.attn.wv"], p[f"{b}.attn.wo"])
        h = layer_norm(x, p[f"{b}.ln2.g"], p[f"{b}.ln2.b"])
        x = x + mlp_block(h, p[f"{b}.mlp.w1"], p[f"{b}.mlp.b1"], p[f"{b}.mlp.w2"], p[f"{b}.mlp.b2"])
    return layer_norm(x, p[f"{prefix}.ln.g"], p[f"{prefix}.ln.b"])


def _pair_logits(token_out: Tensor, items: Tensor, w: Tensor) -> Tensor:
    """``W [token || item]`` for every item, split so the token half is shared."""
    d = items.shape[-1]
    return linear(token_out, w[:d]) + linear(items, w[d:])


def view_transformer(f0: Tensor, params: GpnrParams) -> Tensor:
    """(B, K, M, C0) -> (B, K, M, C1); each depth's K views form one set."""
    x = linear(f0, params["t1.in.w"], params["t1.in.b"])
    x = transpose(x, (0, 2, 1, 3))  # (B, M, K, D)
    x = transformer_stack(x, params, "t1")
    return transpose(x, (0, 2, 1, 3))


def epipolar_aggregate(f1: Tensor, codes: np.ndarray, params: GpnrParams):
    """(B, K, M, C1) -> per-view features (B, K, C2) and alpha (B, K, M)."""
    B, K, M, d = f1.shape
    x = linear(concat([f1, Tensor(codes)], axis=-1), params["t2.in.w"], params["t2.in.b"])
    token = broadcast_to(reshape(params["t2.token"], (1, 1, 1, d)), (B, K, 1, d))
    f2 = transformer_stack(concat([token, x], axis=2), params, "t2")
    tok, items = f2[:, :, 0:1, :], f2[:, :, 1:, :]
    logits = _pair_logits(tok, items, params["alpha.w"])  # (B, K, M, 1)
    alpha = softmax(reshape(logits, (B, K, M)), axis=-1)
    pooled = matmul(reshape(alpha, (B, K, 1, M)), items)  # (B, K, 1, D)
    return reshape(pooled, (B, K, d)), alpha


def view_aggregate(f2p: Tensor, cam_codes: np.ndarray, params: GpnrParams):
    """(B, K, C2) -> stage-3 outputs for the K views (B, K, C3) and beta (B, K)."""
    B, K, d = f2p.shape
    x = linear(concat([f2p, Tensor(cam_codes)], axis=-1), params["t3.in.w"], params["t3.in.b"])
    token = broadcast_to(reshape(params["t3.token"], (1, 1, d)), (B, 1, d))
    f3 = transformer_stack(concat([token, x], axis=1), params, "t3")
    tok, items = f3[:, 0:1, :], f3[:, 1:, :]
    logits = _pair_logits(tok, items, params["beta.w"])  # (B, K, 1)
    beta = softmax(reshape(logits, (B, K)), axis=-1)
    return items, beta


def blend_colors(alpha, beta, center_colors):
    """Doubly convex blend: ``sum_k beta_k sum_m alpha_km c_km``.

    Accepts tensors or arrays with shapes (B, K, M), (B, K), (B, K, M, 3).
    """
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha))
    beta = beta if isinstance(beta, Tensor) else Tensor(np.asarray(beta))
    colors = center_colors if isinstance(center_colors, Tensor) else Tensor(np.asarray(center_colors, dtype=alpha.dtype))
    B, K, M = alpha.shape
    per_view = matmul(reshape(alpha, (B, K, 1, M)), colors)  # (B, K, 1, 3)
    return reshape(matmul(reshape(beta, (B, 1, K)), reshape(per_view, (B, K, 3))), (B, 3))


def feature_head(beta: Tensor, f3: Tensor, params: GpnrParams) -> Tensor:
    """Ablation output: ``sigmoid(MLP(sum_k beta_k f3_k))``."""
    B, K, d = f3.shape
    pooled = reshape(matmul(reshape(beta, (B, 1, K)), f3), (B, d))
    p = params.tensors
    return sigmoid(mlp_block(pooled, p["head.w1"], p["head.b1"], p["head.w2"], p["head.b2"]))


def forward(params: GpnrParams, grid: PatchGrid, head: str | None = None) -> Output:
    head = head or params.model.head
    dt = params.dtype
    f0 = assemble_input(grid, params["embed.w"], params["embed.b"])
    f1 = view_transformer(f0, params)
    f2p, alpha = epipolar_aggregate(f1, stage_codes(grid, dt), params)
    f3, beta = view_aggregate(f2p, grid.cam_codes.astype(dt), params)
    if head == "blend":
        color = blend_colors(alpha, beta, Tensor(grid.center_colors.astype(dt)))
    elif head == "feature":
        color = feature_head(beta, f3, params)
    else:
        raise ValueError(f"unknown head {head!r}")
    return Output(color, alpha, beta)


# ---------------------------------------------------------------------------
# rendering


def render_ray(
    params: GpnrParams,
    scene: Scene,
    pose: geo.CameraPose,
    intr: geo.CameraIntrinsics,
    pixel,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    exclude: int | None = None,
) -> RenderRecord:
    grid = build_batch(scene, pose, intr, np.asarray(pixel, dtype=np.float64)[None], params.sampler, mode, rng, exclude)
    out = forward(params, grid)
    return RenderRecord(out.color.data[0], out.alpha.data[0], out.beta.data[0], grid.views[0])


def render_pixels(
    params: GpnrParams,
    scene: Scene,
    pose: geo.CameraPose,
    intr: geo.CameraIntrinsics,
    pixels: np.ndarray,
    exclude: int | None = None,
    chunk: int = 256,
    threads: int = 1,
    keep_weights: bool = False,
):
    """Inference-mode colors for (P, 2) pixels, evaluated in fixed chunks.

    With ``keep_weights`` returns ``(colors, alpha, beta, views)``. Chunk boundaries do not depend on ``threads``, so serial and threaded
    runs produce identical results.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    starts = list(range(0, len(pixels), chunk))

    def run(s):
        grid = build_batch(scene, pose, intr, pixels[s : s + chunk], params.sampler, "infer", exclude=exclude)
        out = forward(params, grid)
        if keep_weights:
            return out.color.data, out.alpha.data, out.beta.data, grid.views
        return (out.color.data,)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    colors = np.concatenate([p[0] for p in parts])
    if not keep_weights:
        return colors
    return (colors, *(np.concatenate([p[i] for p in parts]) for i in (1, 2, 3)))


def pixel_grid(intr: geo.CameraIntrinsics) -> np.ndarray:
    ys, xs = np.mgrid[0 : intr.height, 0 : intr.width]
    return np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)


def render_image(
    params: GpnrParams,
    scene: Scene,
    pose: geo.CameraPose,
    intr: geo.CameraIntrinsics,
    exclude: int | None = None,
    chunk: int = 256,
    threads: int = 1,
) -> np.ndarray:
    """Row-major H x W x 3 inference render (unclamped)."""
    colors = render_pixels(params, scene, pose, intr, pixel_grid(intr), exclude, chunk, threads)
    return colors.reshape(intr.height, intr.width, 3)


# ---------------------------------------------------------------------------
# checkpoints


def _manifest_lines(sampler: SamplerConfig, model: ModelConfig) -> list[str]:
    fields_ = {**{f"sampler.{k}": v for k, v in asdict(sampler).items()}, **{f"model.{k}": v for k, v in asdict(model).items()}}
    return [f"{k} = {v}" for k, v in fields_.items()]


def _parse_manifest(path: Path) -> tuple[SamplerConfig, ModelConfig]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointMismatch(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        values[k] = v

    def build(cls, prefix):
        kw = {}
        for f in fields(cls):
            key = f"{prefix}.{f.name}"
            if key in values:
                kw[f.name] = values[key] if f.type in ("str", str) else int(values[key])
        return cls(**kw)

    return build(SamplerConfig, "sampler"), build(ModelConfig, "model")


def save_params(params: GpnrParams, path: str | Path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write ``<path>`` (GPNR1 tensors) and ``<path>.cfg`` (key = value manifest)."""
    path = Path(path)
    tensors = {k: v.data for k, v in params.tensors.items()}
    if extra:
        tensors.update(extra)
    save_tensors(path, tensors)
    Path(str(path) + ".cfg").write_text("\n".join(_manifest_lines(params.sampler, params.model)) + "\n", encoding="utf-8")


def load_params(path: str | Path, expect: tuple[SamplerConfig, ModelConfig] | None = None, dtype=np.float32):
    """Load a checkpoint; returns ``(params, extra tensors)``.

    With ``expect``, any config field that differs raises
    :class:`CheckpointMismatch` naming the field.
    """
    path = Path(path)
    cfg_path = Path(str(path) + ".cfg")
    if not cfg_path.is_file():
        raise CheckpointMismatch(f"{cfg_path}: config manifest not found")
    sampler, model = _parse_manifest(cfg_path)
    if expect is not None:
        for got, want, prefix in ((sampler, expect[0], "sampler"), (model, expect[1], "model")):
            for f in fields(got):
                if getattr(got, f.name) != getattr(want, f.name):
                    raise CheckpointMismatch(
                        f"checkpoint field {prefix}.{f.name} = {getattr(got, f.name)!r}, expected {getattr(want, f.name)!r}"
                    )
    raw = load_tensors(path)
    shapes = param_shapes(sampler, model)
    tensors = {}
    for name, shape in shapes.items():
        if name not in raw:
            raise CheckpointMismatch(f"checkpoint is missing tensor {name!r}")
        if raw[name].shape != shape:
            raise CheckpointMismatch(f"tensor {name!r} has shape {raw[name].shape}, expected {shape}")
        tensors[name] = Tensor(raw[name].astype(dtype), requires_grad=True, name=name)
    extra = {k: v for k, v in raw.items() if k not in shapes}
    return GpnrParams(tensors, sampler, model), extra
