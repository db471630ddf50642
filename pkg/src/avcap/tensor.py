"""Dense tensors with taped reverse-mode differentiation.

Forward ops run on plain numpy arrays. While a Tape is active, each op
records a closure; replaying the tape in reverse propagates gradients.
Shapes are limited to rank <= 3 (batched matrices), which is all the
model needs, and broadcasting is restricted to trailing-axis bias adds.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "backward", "grad_check",
    "add", "mul", "scale", "matmul", "relu", "softmax", "masked_softmax",
    "layer_norm", "cross_entropy", "embedding", "dropout", "concat",
    "slice_last", "reshape", "transpose_last2", "tsum", "tmean",
    "set_default_dtype", "get_default_dtype",
]

_DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A dense array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} tensor not supported (max 3)")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, s):
        return scale(self, s)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Ops append themselves in execution order, so the list is topologically
    sorted; replaying it in reverse visits every node once.
    """

    def __init__(self):
        self._records = []

    def record(self, backward_fn) -> None:
        self._records.append(backward_fn)

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


_ACTIVE: list[Tape] = []


def _tape():
    return _ACTIVE[-1] if _ACTIVE else None


def _accum(t: Tensor, delta) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += delta


def _out(data, *parents) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = rg
    return t


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate grads of every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for fn in reversed(tape._records):
        fn()


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may broadcast over a's leading axes (bias add)."""
    if a.shape != b.shape:
        if b.ndim >= a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
            raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = _out(a.data + b.data, a, b)
    tape = _tape()
    if tape is not None and out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            if a.requires_grad:
                _accum(a, out.grad)
            if b.requires_grad:
                g = out.grad
                if b.shape != g.shape:
                    g = g.sum(axis=tuple(range(g.ndim - b.ndim)))
                _accum(b, g)
        tape.record(bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
    out = _out(a.data * b.data, a, b)
    tape = _tape()
    if tape is not None and out.requires_grad:
        ad, bd = a.data, b.data
        def bwd():
            if out.grad is None:
                return
            if a.requires_grad:
                _accum(a, out.grad * bd)
            if b.requires_grad:
                _accum(b, out.grad * ad)
        tape.record(bwd)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _out(a.data * s, a)
    tape = _tape()
    if tape is not None and out.requires_grad:
        def bwd():
            if out.grad is not None and a.requires_grad:
                _accum(a, out.grad * s)
        tape.record(bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2x2, batched 3x3, or batched 3x2 (shared weight)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch sizes disagree: {a.shape} x {b.shape}")
    if a.ndim == 2 and b.ndim == 3:
        raise ShapeError(f"matmul: unsupported case {a.shape} x {b.shape}")
    out = _out(a.data @ b.data, a, b)
    tape = _tape()
    if tape is not None and out.requires_grad:
        ad, bd = a.data, b.data
        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, g @ np.swapaxes(bd, -1, -2))
            if b.requires_grad:
                if ad.ndim == 3 and bd.ndim == 2:
                    _accum(b, np.tensordot(ad, g, axes=([0, 1], [0, 1])))
                else:
                    _accum(b, np.swapaxes(ad, -1, -2) @ g)
        tape.record(bwd)
    return out


def relu(x: Tensor) -> Tensor:
    out = _out(np.maximum(x.data, 0.0), x)
    tape = _tape()
    if tape is not None and out.requires_grad:
        mask = x.data > 0  # subgradient at 0 is 0
        def bwd():
            if out.grad is not None and x.requires_grad:
                _accum(x, out.grad * mask)
        tape.record(bwd)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along axis (max-subtraction)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _out(y, x)
    tape = _tape()
    if tape is not None and out.requires_grad:
        def bwd():
            g = out.grad
            if g is None or not x.requires_grad:
                return
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(x, y * (g - dot))
        tape.record(bwd)
    return out


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Softmax over the last axis with masked positions excluded.

    mask is a boolean array broadcastable to scores; True marks valid
    positions. Rows with no valid position produce all-zero output
    rather than NaN.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    z = np.where(mask, scores.data, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s == 0.0, 1.0, s)
    out = _out(y, scores)
    tape = _tape()
    if tape is not None and out.requires_grad:
        def bwd():
            g = out.grad
            if g is None or not scores.requires_grad:
                return
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(scores, y * (g - dot))
        tape.record(bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _out(xhat * gain.data + bias.data, x, gain, bias)
    tape = _tape()
    if tape is not None and out.requires_grad:
        gd = gain.data
        def bwd():
            g = out.grad
            if g is None:
                return
            lead = tuple(range(g.ndim - 1))
            if gain.requires_grad:
                _accum(gain, (g * xhat).sum(axis=lead))
            if bias.requires_grad:
                _accum(bias, g.sum(axis=lead))
            if x.requires_grad:
                dxhat = g * gd
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                _accum(x, inv * (dxhat - m1 - xhat * m2))
        tape.record(bwd)
    return out


def cross_entropy(logits: Tensor, targets, ignore_id: int = 0) -> Tensor:
    """Mean negative log-softmax probability of targets.

    Positions whose target equals ignore_id are excluded from the mean;
    a fully ignored batch yields loss 0 with zero gradient. logits may be
    (N, V) or (B, T, V) with targets shaped accordingly.
    """
    tg = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tflat = tg.reshape(-1)
    if tflat.shape[0] != flat.shape[0]:
        raise ShapeError(
            f"cross_entropy: {logits.shape} logits vs {tg.shape} targets")
    valid = tflat != ignore_id
    n_valid = int(valid.sum())
    vt = tflat[valid]
    if vt.size and (vt.min() < 0 or vt.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    if n_valid == 0:
        return _out(np.zeros((), dtype=flat.dtype), logits)
    z = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, vt].sum() / n_valid
    out = _out(np.asarray(loss, dtype=flat.dtype), logits)
    tape = _tape()
    if tape is not None and out.requires_grad:
        def bwd():
            g = out.grad
            if g is None or not logits.requires_grad:
                return
            p = np.exp(logp)
            d = np.zeros_like(flat)
            d[rows] = p[rows]
            d[rows, vt] -= 1.0
            d *= float(g) / n_valid
            _accum(logits, d.reshape(logits.shape))
        tape.record(bwd)
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of table by integer ids (1-D or 2-D)."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = _out(table.data[idx], table)
    tape = _tape()
    if tape is not None and out.requires_grad:
        def bwd():
            g = out.grad
            if g is None or not table.requires_grad:
                return
            d = np.zeros_like(table.data)
            np.add.at(d, idx.reshape(-1), g.reshape(-1, table.shape[1]))
            _accum(table, d)
        tape.record(bwd)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero units with probability rate, scale by 1/(1-rate)."""
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError(f"dropout rate must be < 1, got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.data.dtype)
    out = _out(x.data * keep, x)
    tape = _tape()
    if tape is not None and out.requires_grad:
        def bwd():
            if out.grad is not None and x.requires_grad:
                _accum(x, out.grad * keep)
        tape.record(bwd)
    return out


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    out = _out(np.concatenate([p.data for p in parts], axis=axis), *parts)
    tape = _tape()
    if tape is not None and out.requires_grad:
        sizes = [p.shape[axis] for p in parts]
        def bwd():
            g = out.grad
            if g is None:
                return
            offset = 0
            for p, n in zip(parts, sizes):
                if p.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(offset, offset + n)
                    _accum(p, g[tuple(sl)])
                offset += n
        tape.record(bwd)
    return out


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    out = _out(x.data[..., start:stop], x)
    tape = _tape()
    if tape is not None and out.requires_grad:
        def bwd():
            g = out.grad
            if g is None or not x.requires_grad:
                return
            d = np.zeros_like(x.data)
            d[..., start:stop] = g
            _accum(x, d)
        tape.record(bwd)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = _out(x.data.reshape(shape), x)
    tape = _tape()
    if tape is not None and out.requires_grad:
        def bwd():
            if out.grad is not None and x.requires_grad:
                _accum(x, out.grad.reshape(x.shape))
        tape.record(bwd)
    return out


def transpose_last2(x: Tensor) -> Tensor:
    out = _out(np.swapaxes(x.data, -1, -2), x)
    tape = _tape()
    if tape is not None and out.requires_grad:
        def bwd():
            if out.grad is not None and x.requires_grad:
                _accum(x, np.swapaxes(out.grad, -1, -2))
        tape.record(bwd)
    return out


def tsum(x: Tensor) -> Tensor:
    out = _out(np.asarray(x.data.sum(), dtype=x.data.dtype), x)
    tape = _tape()
    if tape is not None and out.requires_grad:
        def bwd():
            if out.grad is not None and x.requires_grad:
                _accum(x, np.full_like(x.data, float(out.grad)))
        tape.record(bwd)
    return out


def tmean(x: Tensor) -> Tensor:
    out = _out(np.asarray(x.data.mean(), dtype=x.data.dtype), x)
    tape = _tape()
    if tape is not None and out.requires_grad:
        n = x.data.size
        def bwd():
            if out.grad is not None and x.requires_grad:
                _accum(x, np.full_like(x.data, float(out.grad) / n))
        tape.record(bwd)
    return out


# ---------------------------------------------------------------- validation


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Compare analytic gradients of scalar f(x) against central differences.

    Returns the max relative error with denominator max(|a|, |n|, 1e-8).
    f must be deterministic (reseed any rng it uses per call).
    """
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    backward(y, tape)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        y1 = f(x).item()
        flat[i] = orig - h
        y2 = f(x).item()
        flat[i] = orig
        nflat[i] = (y1 - y2) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0
