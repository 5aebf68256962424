"""Dense float tensors with reverse-mode automatic differentiation.

Just enough operator coverage for a small decoder-only transformer, the
feature-prediction draft head, and their losses.  Arrays are stored in
float32 (float64 is accepted for verification tooling such as finite
difference checks).  Every matrix product accumulates in float64 before
rounding back to the storage dtype; on top of being more accurate, this
makes each output row independent of how many rows were computed in the
same call, so incremental decoding reproduces monolithic forward passes
bit for bit.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "OptimizerState",
    "no_grad",
    "add",
    "mul",
    "scale",
    "matmul",
    "softmax",
    "rmsnorm",
    "silu",
    "embedding",
    "concat",
    "reshape",
    "transpose",
    "rotary",
    "mask_fill",
    "tensor_sum",
    "tensor_mean",
    "smooth_l1",
    "soft_cross_entropy",
    "cross_entropy_indices",
    "adamw_step",
    "clip_grad_norm",
    "gradient_check",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in _FLOAT_DTYPES:
        return arr.astype(np.float32)
    return arr


class Tensor:
    """N-dimensional float array, optionally tracked by the autodiff tape.

    ``grad`` is populated by :meth:`backward` and accumulates across calls
    until reset via :meth:`zero_grad`.

    A float64 view of the payload is cached for the matmul fast path and
    invalidated whenever ``data`` is rebound (optimizer steps, checkpoint
    loads).  Code that mutates the payload in place must rebind it
    (``t.data = t.data``) to flush the cache.
    """

    __slots__ = ("_data", "requires_grad", "grad", "_backward", "_parents", "_f64")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self._data = _as_array(data, dtype)
        self._f64: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self._data = value
        self._f64 = None

    def f64(self) -> np.ndarray:
        """Float64 view of the payload, cached until ``data`` is rebound."""
        if self._data.dtype == np.float64:
            return self._data
        if self._f64 is None:
            self._f64 = self._data.astype(np.float64)
        return self._f64

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` of every reachable tensor with d(self)/d(tensor).

        ``self`` must be scalar.  Repeated calls accumulate into existing
        gradients unless they are reset in between.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.accumulate_grad(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] += pg
                else:
                    grads[id(parent)] = np.array(pg, dtype=parent.data.dtype, copy=True)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar used sparingly by the model code.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracks(*xs: Tensor) -> bool:
    if not _grad_enabled:
        return False
    return any(x.requires_grad or x._backward is not None for x in xs)


def _make(out_data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(out_data)
    if _tracks(*parents):
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(out, (a, b), bw)


def scale(a, s: float) -> Tensor:
    a = _coerce(a)
    out = a.data * a.data.dtype.type(s)

    def bw(g):
        return (g * s,)

    return _make(out, (a,), bw)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, rounded to the input dtype.

    Row results are bit-identical no matter how the row batch is split,
    which forwards rely on for exact cache/monolithic agreement.
    """
    out = np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    target = np.result_type(a.dtype, b.dtype)
    return out.astype(target, copy=False)


def matmul(a, b) -> Tensor:
    """2-D or batched 3-D matrix product.  Inner dimensions must agree."""
    a, b = _coerce(a), _coerce(b)
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2 or da.ndim > 3 or db.ndim > 3:
        raise DimensionError(f"matmul supports 2-D/3-D operands, got {da.shape} @ {db.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {da.shape} @ {db.shape}")
    if da.ndim == 3 and db.ndim == 3 and da.shape[0] != db.shape[0]:
        raise DimensionError(f"matmul batch dimensions disagree: {da.shape} @ {db.shape}")
    target = da.dtype if da.dtype == db.dtype else np.result_type(da.dtype, db.dtype)
    out = np.matmul(a.f64(), b.f64()).astype(target, copy=False)

    def bw(g):
        if da.ndim == 2 and db.ndim == 2:
            return _mm(g, db.T), _mm(da.T, g)
        if da.ndim == 3 and db.ndim == 3:
            return _mm(g, db.transpose(0, 2, 1)), _mm(da.transpose(0, 2, 1), g)
        if da.ndim == 3 and db.ndim == 2:
            ga = _mm(g, db.T)
            gb = _mm(da.reshape(-1, da.shape[-1]).T, g.reshape(-1, g.shape[-1]))
            return ga, gb
        # 2-D @ 3-D
        ga = _mm(g, db.transpose(0, 2, 1)).sum(axis=0)
        gb = _mm(da.T[None, :, :].repeat(db.shape[0], axis=0), g)
        return ga, gb

    return _make(out, (a, b), bw)


def softmax(logits, temperature: float = 1.0) -> Tensor:
    """Softmax along the last axis at the given temperature.

    temperature > 0 normalizes exp((x - max)/T); temperature == 0 yields a
    one-hot at the argmax with lowest-index tie-breaking (not
    differentiable, returned as a constant).
    """
    x = _coerce(logits)
    if x.data.shape[-1] < 1:
        raise DimensionError("softmax requires a non-empty last axis")
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0.0:
        idx = np.argmax(x.data, axis=-1)
        out = np.zeros_like(x.data)
        np.put_along_axis(out, idx[..., None], x.data.dtype.type(1.0), axis=-1)
        return Tensor(out)
    z = x.data.astype(np.float64) / float(temperature)
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y64 = e / e.sum(axis=-1, keepdims=True)
    y = y64.astype(x.data.dtype)

    def bw(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - inner) * y / temperature,)

    return _make(y, (x,), bw)


def rmsnorm(x, weight, eps: float) -> Tensor:
    """x * weight / sqrt(mean(x^2, last axis) + eps)."""
    x, weight = _coerce(x), _coerce(weight)
    if eps <= 0:
        raise ValueError(f"rmsnorm eps must be > 0, got {eps}")
    if weight.data.ndim != 1 or weight.data.shape[0] != x.data.shape[-1]:
        raise DimensionError(
            f"rmsnorm weight shape {weight.data.shape} does not match last axis of {x.data.shape}"
        )
    d = x.data.shape[-1]
    x64 = x.data.astype(np.float64)
    inv = 1.0 / np.sqrt((x64 * x64).mean(axis=-1, keepdims=True) + eps)
    normed = x64 * inv
    out = (normed * weight.data.astype(np.float64)).astype(x.data.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        w64 = weight.data.astype(np.float64)
        gw = g64 * w64
        dot = (gw * x64).sum(axis=-1, keepdims=True)
        gx = inv * gw - (inv**3 / d) * dot * x64
        gwt = (g64 * normed).reshape(-1, d).sum(axis=0)
        return gx.astype(x.data.dtype), gwt.astype(weight.data.dtype)

    return _make(out, (x, weight), bw)


def silu(x) -> Tensor:
    x = _coerce(x)
    x64 = x.data.astype(np.float64)
    sig = 1.0 / (1.0 + np.exp(-x64))
    out = (x64 * sig).astype(x.data.dtype)

    def bw(g):
        return ((g * (sig * (1.0 + x64 * (1.0 - sig)))).astype(x.data.dtype),)

    return _make(out, (x,), bw)


def embedding(table, ids) -> Tensor:
    """Row gather from an embedding table; gradient scatter-adds back."""
    table = _coerce(table)
    idx = np.asarray(ids, dtype=np.int64)
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out, (table,), bw)


def concat(a, b, axis: int = -1) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = np.concatenate([a.data, b.data], axis=axis)
    split_at = a.data.shape[axis]

    def bw(g):
        ga, gb = np.split(g, [split_at], axis=axis)
        return ga, gb

    return _make(out, (a, b), bw)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _coerce(x)
    orig = x.data.shape
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(orig),)

    result = _make(out, (x,), bw)
    if x._f64 is not None:
        result._f64 = x._f64.reshape(shape)
    return result


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _coerce(x)
    out = x.data.transpose(axes)

    def bw(g):
        return (g.transpose(np.argsort(axes)),)

    result = _make(out, (x,), bw)
    if x._f64 is not None:
        result._f64 = x._f64.transpose(axes)
    return result


def rotary(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position mixing: x*cos + rotate_half(x)*sin.

    ``x`` has shape (..., dim); ``cos``/``sin`` broadcast against it and are
    treated as constants.  rotate_half maps (x1, x2) -> (-x2, x1) over the
    two halves of the last axis.
    """
    x = _coerce(x)
    xd = x.data
    half = xd.shape[-1] // 2
    out = xd * cos
    out[..., :half] -= xd[..., half:] * sin[..., :half]
    out[..., half:] += xd[..., :half] * sin[..., half:]
    out = out.astype(xd.dtype, copy=False)

    def bw(g):
        gx = g * cos
        gs = g * sin
        gx[..., :half] += gs[..., half:]
        gx[..., half:] -= gs[..., :half]
        return (gx.astype(xd.dtype, copy=False),)

    return _make(out, (x,), bw)


def mask_fill(scores, mask: np.ndarray) -> Tensor:
    """Set entries where ``mask`` is False to -inf (pre-softmax masking)."""
    scores = _coerce(scores)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), scores.data.shape)
    out = np.where(m, scores.data, scores.data.dtype.type(-np.inf))

    def bw(g):
        return (np.where(m, g, 0.0),)

    return _make(out, (scores,), bw)


def tensor_sum(x) -> Tensor:
    x = _coerce(x)
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)

    def bw(g):
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype),)

    return _make(out, (x,), bw)


def tensor_mean(x) -> Tensor:
    x = _coerce(x)
    n = x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype)

    def bw(g):
        return (np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype),)

    return _make(out, (x,), bw)


def smooth_l1(pred, target) -> Tensor:
    """Mean Huber penalty with transition point 1: 0.5 d^2 if |d|<1 else |d|-0.5."""
    pred, target = _coerce(pred), _coerce(target)
    if pred.data.shape != target.data.shape:
        raise DimensionError(
            f"smooth_l1 shapes disagree: {pred.data.shape} vs {target.data.shape}"
        )
    d = pred.data.astype(np.float64) - target.data.astype(np.float64)
    absd = np.abs(d)
    elems = np.where(absd < 1.0, 0.5 * d * d, absd - 0.5)
    n = d.size
    out = np.asarray(elems.mean(), dtype=pred.data.dtype)

    def bw(g):
        gd = np.clip(d, -1.0, 1.0) * (float(g) / n)
        return gd.astype(pred.data.dtype), (-gd).astype(target.data.dtype)

    return _make(out, (pred, target), bw)


def soft_cross_entropy(target_dist, logits) -> Tensor:
    """Mean over rows of -sum(target * log_softmax(logits)).

    ``target_dist`` rows must sum to 1 within 1e-4; it is treated as a
    constant (no gradient flows into the target).
    """
    target = _coerce(target_dist)
    logits = _coerce(logits)
    if target.data.shape != logits.data.shape:
        raise DimensionError(
            f"soft_cross_entropy shapes disagree: {target.data.shape} vs {logits.data.shape}"
        )
    t64 = target.data.astype(np.float64)
    sums = t64.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        raise ValueError("soft_cross_entropy target rows must sum to 1 within 1e-4")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = -(t64 * logp).sum(axis=-1)
    n_rows = int(np.prod(rows.shape)) if rows.shape else 1
    out = np.asarray(rows.mean() if rows.shape else rows, dtype=logits.data.dtype)

    def bw(g):
        p = np.exp(logp)
        gl = (p - t64) * (float(g) / n_rows)
        return None, gl.astype(logits.data.dtype)

    return _make(out, (target, logits), bw)


def cross_entropy_indices(logits, ids, row_mask=None) -> Tensor:
    """Mean negative log-likelihood of integer targets under the logits.

    ``row_mask`` (boolean, one entry per row) restricts the mean to the
    selected rows; masked rows contribute neither loss nor gradient.
    """
    logits = _coerce(logits)
    idx = np.asarray(ids, dtype=np.int64)
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = -np.take_along_axis(logp, idx[..., None], axis=-1)[..., 0]
    if row_mask is not None:
        keep = np.asarray(row_mask, dtype=bool)
        n = int(keep.sum())
        if n == 0:
            raise ValueError("cross_entropy_indices row_mask selects no rows")
        out = np.asarray(rows[keep].mean(), dtype=logits.data.dtype)
    else:
        keep = None
        n = rows.size
        out = np.asarray(rows.mean(), dtype=logits.data.dtype)

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
        gl = (p - onehot) * (float(g) / n)
        if keep is not None:
            gl = np.where(keep[..., None], gl, 0.0)
        return (gl,)

    return _make(out, (logits,), bw)


class OptimizerState:
    """Per-parameter Adam moments plus a shared step counter."""

    def __init__(self, params: Iterable[Tensor]):
        self.params = list(params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step = 0


def adamw_step(
    state: OptimizerState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> None:
    """Decoupled-weight-decay Adam update with bias correction.

    Parameters with no gradient are treated as zero-gradient (their moments
    still decay).  Update math runs in float64 and rounds to storage dtype.
    """
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        g64 = g.astype(np.float64)
        m64 = m.astype(np.float64) * b1 + (1.0 - b1) * g64
        v64 = v.astype(np.float64) * b2 + (1.0 - b2) * g64 * g64
        m[...] = m64.astype(m.dtype)
        v[...] = v64.astype(v.dtype)
        mhat = m64 / c1
        vhat = v64 / c2
        new = p.data.astype(np.float64) * (1.0 - lr * weight_decay) - lr * mhat / (np.sqrt(vhat) + eps)
        p.data = new.astype(p.data.dtype)


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global L2 norm is at most max_norm.

    Returns the pre-clip global norm.  A no-op when already within bounds,
    which also makes repeated clipping idempotent.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be > 0, got {max_norm}")
    total = 0.0
    for g in grads:
        if g is None:
            continue
        g64 = g.astype(np.float64, copy=False)
        total += float((g64 * g64).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            if g is not None:
                g *= g.dtype.type(factor)
    return norm


def gradient_check(
    function: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-3,
    max_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``function`` must map the parameter list to a scalar Tensor.  Coordinates
    are sampled (at most ``max_coords`` across all parameters, favoring the
    largest reverse-mode magnitudes so the comparison happens where there is
    signal).  The relative error denominator is floored at 1% of the largest
    gradient magnitude to keep near-zero coordinates from dominating.
    """
    if not (1e-5 <= epsilon <= 1e-2):
        raise ValueError(f"epsilon must lie in [1e-5, 1e-2], got {epsilon}")
    loss = function(params)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("function must return a scalar Tensor")
    for p in params:
        p.zero_grad()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    gmax = max((float(np.abs(a).max()) for a in analytic if a.size), default=0.0)
    floor = max(1e-2 * gmax, 1e-12)

    coords: list[tuple[int, tuple[int, ...], float]] = []
    for pi, a in enumerate(analytic):
        for flat_idx in range(a.size):
            coords.append((pi, np.unravel_index(flat_idx, a.shape), float(abs(a.flat[flat_idx]))))
    if len(coords) > max_coords:
        coords.sort(key=lambda c: -c[2])
        head = coords[: max_coords // 2]
        rng = np.random.default_rng(seed)
        tail_pool = coords[max_coords // 2 :]
        picks = rng.choice(len(tail_pool), size=max_coords - len(head), replace=False)
        coords = head + [tail_pool[i] for i in picks]

    worst = 0.0
    for pi, idx, _ in coords:
        p = params[pi]
        orig = p.data[idx]
        # Rebinding after each in-place write flushes the f64 matmul cache.
        p.data[idx] = orig + epsilon
        p.data = p.data
        f_plus = function(params).item()
        p.data[idx] = orig - epsilon
        p.data = p.data
        f_minus = function(params).item()
        p.data[idx] = orig
        p.data = p.data
        fd = (f_plus - f_minus) / (2.0 * epsilon)
        an = float(analytic[pi][idx])
        rel = abs(fd - an) / max(abs(fd), abs(an), floor)
        worst = max(worst, rel)
    return worst
