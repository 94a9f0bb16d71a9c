"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the rendering network needs are provided. Operations
record themselves on the innermost active :class:`Tape`; outside a tape
they are plain numpy evaluations with no bookkeeping.

    >>> x = Tensor(np.array(3.0), requires_grad=True)
    >>> with Tape():
    ...     loss = x * x
    >>> backward(loss)[x]
    array(6.)
"""

from __future__ import annotations

import math
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
CHECKPOINT_MAGIC = b"GPNR1"

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigError(ValueError):
    """Raised for invalid layer configuration (e.g. width vs head count)."""


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Tapes are thread-local: each thread that builds a graph does so on its
    own tape. Use as a context manager; ops executed inside are recorded.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def record(self, out: "Tensor", parents: Sequence["Tensor"], backward: Callable) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")
        out._tape = self
        self.nodes.append(_Node(out, tuple(parents), backward))

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """An n-dimensional array that may participate in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "_tape", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._tape = None
    tape = active_tape()
    out.requires_grad = tape is not None and any(p.requires_grad for p in parents)
    if out.requires_grad:
        tape.record(out, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 1 and grad.shape[-1] == shape[0]:
        # bias-style reduction over all leading axes; GEMV beats ufunc.reduce here
        g2 = grad.reshape(-1, shape[0])
        return np.ones(g2.shape[0], dtype=grad.dtype) @ g2
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        s = float(b)
        a = as_tensor(a)
        return _result(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,))
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    k = xd.dtype.type(_GELU_K)
    c = xd.dtype.type(_GELU_C)
    # in-place passes: these arrays are large and temporaries dominate
    h = xd * xd
    h *= k * c
    h += k
    h *= xd
    np.tanh(h, out=h)
    h += 1.0
    h *= 0.5  # h = (1 + tanh(inner)) / 2
    out = xd * h

    def back(g):
        a = xd * xd
        a *= 3.0 * c * k
        a += k
        b = 1.0 - h
        b *= h
        b *= 2.0
        b *= xd
        b *= a
        b += h
        b *= g
        return (b,)

    return _result(out, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, src),))


def getitem(x: Tensor, index) -> Tensor:
    src, dt = x.shape, x.dtype

    def back(g):
        full = np.zeros(src, dtype=dt)
        if _has_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[index]), (x,), back)


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    try:
        data = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from exc

    def back(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            sl[ax] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _result(data, tensors, back)


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra and layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch shapes not broadcastable: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` shaped (in, out), as one tape node.

    The leading axes are flattened into one GEMM, which is much faster than
    a broadcast batched product.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise ShapeError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear bias {b.shape} does not match output width {w.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    wd = w.data
    y = x2 @ wd
    if b is not None:
        y += b.data

    def back(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],))
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, np.ones(g2.shape[0], dtype=g2.dtype) @ g2

    parents = (x, w) if b is None else (x, w, b)
    return _result(y.reshape(lead + (wd.shape[1],)), parents, back)


def _row_sum(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    return (x.reshape(-1, n) @ np.ones(n, dtype=x.dtype)).reshape(x.shape[:-1] + (1,))


def _row_max(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if n > 32:
        return x.max(axis=-1, keepdims=True)
    # a short strided loop is several times faster than a reduce over a short axis
    m = x[..., 0].copy()
    for j in range(1, n):
        np.maximum(m, x[..., j], out=m)
    return m[..., None]


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Normalized exponential along ``axis`` with max subtraction."""
    last = axis in (-1, x.ndim - 1)
    xd = x.data if last else np.moveaxis(x.data, axis, -1)
    e = np.exp(xd - _row_max(xd))
    out = e / _row_sum(e)

    def back(g):
        g = g if last else np.moveaxis(g, axis, -1)
        dx = out * (g - _row_sum(g * out))
        return (dx if last else np.moveaxis(dx, -1, axis),)

    if not last:
        return _result(np.ascontiguousarray(np.moveaxis(out, -1, axis)), (x,), back)

    return _result(out, (x,), back)


def _row_mean(x: np.ndarray) -> np.ndarray:
    # GEMV sum then divide: fast on short rows, exact on constant rows
    out = _row_sum(x)
    out /= x.shape[-1]
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm params {gain.shape}/{bias.shape} do not match features {x.shape[-1]}")
    xd = x.data
    xhat = xd - _row_mean(xd)
    sq = xhat * xhat
    inv = 1.0 / np.sqrt(_row_mean(sq) + eps)
    xhat *= inv
    gd = gain.data
    out = xhat * gd
    out += bias.data

    def back(g):
        dxhat = g * gd
        tmp = dxhat * xhat
        m2 = _row_mean(tmp)
        dx = dxhat - _row_mean(dxhat)
        np.multiply(xhat, m2, out=tmp)
        dx -= tmp
        dx *= inv
        np.multiply(g, xhat, out=tmp)
        ones = np.ones(g.size // g.shape[-1], dtype=g.dtype)
        return dx, ones @ tmp.reshape(-1, g.shape[-1]), ones @ g.reshape(-1, g.shape[-1])

    return _result(out, (x, gain, bias), back)


def self_attention(x: Tensor, heads: int, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    """Multi-head scaled dot-product attention over the second-to-last axis.

    ``x`` is (..., S, D); all weight matrices are (D, D). No mask: the
    sequence is treated as a set. Recorded as a single node with a
    hand-written backward; the composed version is several times slower.
    """
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    for w in (wq, wk, wv, wo):
        if w.shape != (d, d):
            raise ShapeError(f"attention weight {w.shape} does not match width {d}")
    dh = d // heads
    lead, s = x.shape[:-2], x.shape[-2]
    n = int(np.prod(lead, dtype=np.int64))
    scale = x.dtype.type(1.0 / math.sqrt(dh))
    x2 = x.data.reshape(-1, d)
    wqkv = np.concatenate([wq.data, wk.data, wv.data], axis=1)
    # (N*S, 3D) -> (3, N, H, S, dh)
    qkv = np.ascontiguousarray((x2 @ wqkv).reshape(n, s, 3, heads, dh).transpose(2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    q *= scale
    scores = q @ k.transpose(0, 1, 3, 2)
    e = np.exp(scores - _row_max(scores), out=scores)
    attn = e / _row_sum(e)
    ctx = attn @ v
    c2 = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(-1, d)
    wod = wo.data
    out = (c2 @ wod).reshape(x.shape)

    def back(g):
        g2 = g.reshape(-1, d)
        gwo = c2.T @ g2
        gctx = np.ascontiguousarray((g2 @ wod.T).reshape(n, s, heads, dh).transpose(0, 2, 1, 3))
        gqkv = np.empty_like(qkv)
        np.matmul(attn.transpose(0, 1, 3, 2), gctx, out=gqkv[2])
        ga = gctx @ v.transpose(0, 1, 3, 2)
        ga -= _row_sum(ga * attn)
        ga *= attn
        np.matmul(ga, k, out=gqkv[0])
        gqkv[0] *= scale
        np.matmul(ga.transpose(0, 1, 3, 2), q, out=gqkv[1])
        gflat = np.ascontiguousarray(gqkv.transpose(1, 3, 0, 2, 4)).reshape(-1, 3 * d)
        gx = (gflat @ wqkv.T).reshape(x.shape)
        gw = x2.T @ gflat
        return gx, gw[:, :d], gw[:, d : 2 * d], gw[:, 2 * d :], gwo

    return _result(out, (x, wq, wk, wv, wo), back)


def mlp_block(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """linear -> GELU -> linear."""
    return linear(gelu(linear(x, w1, b1)), w2, b2)


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Replay the loss's tape in reverse and return the gradient map.

    The map holds an entry for every requires-grad leaf reachable from the
    loss (tensors not produced on this tape), keyed by tensor identity.
    Intermediate gradients are dropped as soon as they are consumed. The
    tape is consumed.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = loss._tape
    if tape is None or tape.consumed:
        raise TapeError("loss is not on a live tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    nodes = tape.nodes
    tape.nodes = []
    tape.consumed = True
    while nodes:
        node = nodes.pop()
        g = grads.pop(id(node.out), None)
        owners.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.dtype)
                owners[key] = parent
    return {owners[k]: v for k, v in grads.items()}


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar loss from ``leaves`` each call. Leaves are
    perturbed in place and restored. Intended for 64-bit tensors.
    """
    with Tape():
        loss = f()
    gmap = backward(loss)
    worst = 0.0
    for leaf in leaves:
        analytic = gmap.get(leaf)
        if analytic is None:
            analytic = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        an = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(an[i] - num) / max(abs(an[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> None:
    """Write named arrays to the GPNR1 container (32-bit LE scalars)."""
    items = tensors.items() if isinstance(tensors, dict) else tensors
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in items:
            arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a GPNR1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        out[name] = arr.astype(np.float32)
    return out
