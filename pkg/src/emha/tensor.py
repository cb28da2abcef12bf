"""
Dense arrays with a recording tape for reverse-mode differentiation.

Every op in this module takes :class:`Tensor` operands, computes its result
with numpy, and, when a :class:`Tape` is active and some operand requires a
gradient, appends a node holding the vector-Jacobian product for the op.
``Tape.backward`` replays the nodes in exact reverse recording order, so
gradient accumulation order is fixed and repeated runs are bitwise identical.

Outside a tape nothing is recorded, which is what evaluation code relies on.

Randomness is drawn from numpy's counter-based Philox generator keyed by a
seed plus an explicit stream id (see :func:`make_rng`).
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    NondeterminismError,
    NonFiniteError,
    ShapeError,
    UsageError,
)

__all__ = [
    "Tensor",
    "Tape",
    "make_rng",
    "matmul",
    "conv2d",
    "softmax_rows",
    "log_softmax_rows",
    "renormalize_rows",
    "relu",
    "add",
    "mul",
    "scale",
    "layer_norm",
    "embedding_lookup",
    "dropout",
    "reshape",
    "swapaxes",
    "take",
    "sum",
    "mean",
    "backward",
    "finite_diff_grad",
    "max_relative_error",
]

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("emha_tape", default=None)


def make_rng(*key: int) -> np.random.Generator:
    """Philox generator keyed by ``(seed, stream, ...)``.

    Distinct keys give statistically independent streams, so every stochastic
    site can own a key without coordinating with the others.
    """
    if not key:
        raise UsageError("make_rng needs at least a seed")
    flat = []
    for k in key:
        if isinstance(k, (tuple, list)):
            flat.extend(int(v) for v in k)
        else:
            flat.append(int(k))
    if any(v < 0 for v in flat):
        raise ConfigError(f"rng key entries must be non-negative, got {flat}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(flat)))


class Tensor:
    """A dense row-major array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "biu":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded. Tapes are per-context (thread/task local).
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss) back through the recorded nodes.

        Leaf tensors that require grad get their ``.grad`` accumulated. The
        returned mapping is keyed by ``id(tensor)`` and covers every tensor
        that received a gradient.
        """
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced: set[int] = set()
        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            produced.add(id(node.output))
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
        return {k: grads[k] for k in leaves if k in grads}


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# plumbing


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    result = Tensor(out)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.nodes.append(Node(op, inputs, result, vjp))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _emit("matmul", (a, b), out, vjp)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation, stride 1, SAME zero padding.

    ``x`` is ``(C_in, H, W)`` or ``(B, C_in, H, W)``; ``kernel`` is
    ``(C_out, C_in // groups, kh, kw)`` with odd ``kh`` and ``kw``.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be (C,H,W) or (B,C,H,W), got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4, got {kernel.shape}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    B, C_in, H, W = xd.shape
    C_out, cpg, kh, kw = kernel.shape
    if groups < 1 or C_in % groups or C_out % groups:
        raise ConfigError(f"channels ({C_in} in, {C_out} out) not divisible by groups={groups}")
    if cpg != C_in // groups:
        raise ShapeError(f"kernel expects {cpg * groups} input channels, input has {C_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel extents must be odd, got {kh}x{kw}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (C_out,):
            raise ShapeError(f"bias must have shape ({C_out},), got {bias.shape}")

    g, opg = groups, C_out // groups
    ph, pw = kh // 2, kw // 2
    N = B * H * W
    # channel-first layout so each group is a single GEMM over all positions
    xt = np.ascontiguousarray(np.moveaxis(xd, 1, 0))
    if ph or pw:
        xt = np.pad(xt, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    offsets = [(dy, dx) for dy in range(kh) for dx in range(kw)]
    if len(offsets) == 1:
        cols = xt.reshape(g, cpg, N)
    else:
        cols = np.stack([xt[:, :, dy:dy + H, dx:dx + W] for dy, dx in offsets], axis=1)
        cols = cols.reshape(C_in, len(offsets), N).reshape(g, cpg * len(offsets), N)
    # kernel (C_out, cpg, kh, kw) -> (g, opg, cpg*kh*kw), matching the cols order
    wmat = kernel.data.reshape(g, opg, cpg * kh * kw)
    out = np.matmul(wmat, cols).reshape(C_out, B, H, W)
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    out = np.moveaxis(out, 0, 1)
    out = out[0] if unbatched else np.ascontiguousarray(out)

    def vjp(gout):
        go = gout[None] if unbatched else gout
        go_t = np.ascontiguousarray(np.moveaxis(go, 1, 0)).reshape(g, opg, N)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(np.swapaxes(wmat, -1, -2), go_t)
            if len(offsets) == 1:
                gxt = gcols.reshape(C_in, B, H, W)
            else:
                gcols = gcols.reshape(C_in, len(offsets), B, H, W)
                gxt = np.zeros_like(xt)
                for n, (dy, dx) in enumerate(offsets):
                    gxt[:, :, dy:dy + H, dx:dx + W] += gcols[:, n]
                gxt = gxt[:, :, ph:ph + H, pw:pw + W]
            gx = np.moveaxis(gxt, 0, 1)
            gx = gx[0] if unbatched else np.ascontiguousarray(gx)
        if kernel.requires_grad:
            gw = np.matmul(go_t, np.swapaxes(cols, -1, -2)).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = go_t.reshape(C_out, N).sum(axis=1)
        return gx, gw, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", inputs, out, vjp)


# ---------------------------------------------------------------------------
# row-wise normalizers


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax_rows needs a non-empty last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", (x,), y, vjp)


def log_softmax_rows(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax_rows", (x,), y, vjp)


def renormalize_rows(x: Tensor, keep: np.ndarray | None = None, floor: float = 1e-12) -> Tensor:
    """Clamp at zero, zero out ``keep == False`` entries, divide by the row sum.

    Rows whose clamped mass falls below ``floor`` become uniform over the kept
    positions and pass no gradient.
    """
    x = _as_tensor(x)
    pos = x.data > 0
    if keep is not None:
        keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
        pos = pos & keep
    y0 = np.where(pos, x.data, 0.0)
    s = y0.sum(axis=-1, keepdims=True)
    dead = s < floor
    safe = np.where(dead, 1.0, s)
    y = y0 / safe
    if dead.any():
        support = np.ones(x.shape, dtype=bool) if keep is None else keep
        uniform = support / np.maximum(support.sum(axis=-1, keepdims=True), 1)
        y = np.where(dead, uniform, y)

    def vjp(g):
        gy0 = (g - (g * y).sum(axis=-1, keepdims=True)) / safe
        return (np.where(pos & ~dead, gy0, 0.0),)

    return _emit("renormalize_rows", (x,), y.astype(x.dtype, copy=False), vjp)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    on = x.data > 0
    out = np.maximum(x.data, 0)
    return _emit("relu", (x,), out, lambda g: (g * on,))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit("add", (a, b), out, vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _emit("mul", (a, b), out, vjp)


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply the affine map."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm affine params must be ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        return gx, gg, gb

    return _emit("layer_norm", (x, gain, bias), out, vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise UsageError(f"ids must be integers, got dtype {ids.dtype}")
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise UsageError(f"token id out of range [0, {V})")
    out = table.data[ids]

    def vjp(g):
        flat_ids = ids.reshape(-1)
        rows = g.reshape(flat_ids.size, -1)
        if V <= 4096:
            onehot = np.zeros((flat_ids.size, V), dtype=rows.dtype)
            onehot[np.arange(flat_ids.size), flat_ids] = 1
            gt = (onehot.T @ rows).reshape(table.shape)
        else:
            gt = np.zeros_like(table.data)
            np.add.at(gt, flat_ids, g.reshape(-1, *table.shape[1:]))
        return (gt,)

    return _emit("embedding_lookup", (table,), out, vjp)


def dropout(x: Tensor, p: float, seed, train: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``.

    ``seed`` is an int or a tuple key passed to :func:`make_rng`, so the mask
    is a pure function of the key.
    """
    if not 0 <= p < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    x = _as_tensor(x)
    if not train or p == 0:
        return x
    keep = make_rng(seed).random(x.shape) >= p
    factor = np.where(keep, 1.0 / (1.0 - p), 0.0).astype(x.dtype)
    return _emit("dropout", (x,), x.data * factor, lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# shape ops and reductions


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    x = _as_tensor(x)
    out = np.swapaxes(x.data, a1, a2)
    return _emit("swapaxes", (x,), out, lambda g: (np.swapaxes(g, a1, a2),))


def take(x: Tensor, index: Sequence[int], axis: int) -> Tensor:
    """Gather entries along ``axis``; repeated indices accumulate in backward."""
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    out = np.take(x.data, idx, axis=axis)
    ax = axis % x.ndim

    def vjp(g):
        gx = np.zeros_like(x.data)
        gm = np.moveaxis(gx, ax, 0)
        gs = np.moveaxis(g, ax, 0)
        for j, i in enumerate(idx):
            gm[i] += gs[j]
        return (gx,)

    return _emit("take", (x,), out, vjp)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), out, vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate.

    Only float64 inputs are accepted; f32 differences are too noisy to serve
    as an oracle.
    """
    x = _as_tensor(x)
    if x.dtype != np.float64:
        raise UsageError("finite_diff_grad requires float64 input")

    def ev(arr):
        v = f(Tensor(arr))
        v = v.data if isinstance(v, Tensor) else np.asarray(v)
        if v.size != 1:
            raise UsageError("finite_diff_grad needs a scalar-valued function")
        return float(v.reshape(-1)[0])

    base = x.data.copy()
    if ev(base) != ev(base.copy()):
        raise NondeterminismError("function gave different values on identical input")
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = ev(base)
        flat[i] = orig - eps
        fm = ev(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())
