"""Tape-based reverse-mode differentiation over numpy arrays.

Ops record themselves on the active :class:`Tape` only when some input
requires a gradient, so inference outside a tape costs plain numpy.

    with Tape() as tape:
        loss = mean(relu(matmul(x, w)))
    backward(tape, loss)
    w.grad

Shapes are explicit: the only broadcasting is :func:`add_bias` and
:func:`cond_affine`. Storage is float32 by default; every op keeps the
dtype of its inputs, so casting parameters to float64 gives a float64
graph for gradient checking. Reductions accumulate in float64.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable ops; also records branch decisions.

    ``branches`` (relu masks, max-pool argmaxes) are kept only when
    ``track_branches`` is set; gradient checking uses them to detect
    finite-difference steps that cross a kink.
    """

    track_branches: bool = False
    records: list[_Record] = field(default_factory=list)
    branches: list[np.ndarray] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def signature(self) -> str:
        h = hashlib.sha1()
        for b in self.branches:
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()


_TAPES: list[Tape] = []


def _tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _branch(arr: np.ndarray) -> None:
    tape = _tape()
    if tape is not None and tape.track_branches:
        tape.branches.append(arr)


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.records.append(_Record(op, out, inputs, vjp))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


_BLOCK = 256
_ONES = np.ones(_BLOCK, dtype=np.float32)


def _colsum(x2: np.ndarray) -> np.ndarray:
    """Column sums of a 2D float32 array: BLAS over 256-row blocks, blocks combined in float64."""
    n = x2.shape[0]
    nb = n // _BLOCK
    if nb < 2:
        return np.sum(x2, axis=0, dtype=np.float64)
    out = np.sum(_ONES @ x2[: nb * _BLOCK].reshape(nb, _BLOCK, -1), axis=0, dtype=np.float64)
    if n > nb * _BLOCK:
        out += np.sum(x2[nb * _BLOCK :], axis=0, dtype=np.float64)
    return out


def _sum64(x: np.ndarray, axis=None, dtype=None) -> np.ndarray:
    """Sum with float64 accumulation (exact-ish for float32 data, fast for big row counts)."""
    dtype = dtype or x.dtype
    if x.dtype == np.float32 and axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(sorted(a % x.ndim for a in axes))
        if axes == tuple(range(len(axes))) and len(axes) < x.ndim:
            rest = x.shape[len(axes):]
            return _colsum(x.reshape(-1, int(np.prod(rest)))).reshape(rest).astype(dtype)
        if x.ndim == 3 and axes == (1,):
            return np.stack([_colsum(x[i]) for i in range(x.shape[0])]).astype(dtype)
    return np.sum(x, axis=axis, dtype=np.float64).astype(dtype)


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mul", a, b)
    return _make("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    return _make("scale", x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., f] + b[f]."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _make("add_bias", x.data + b.data, (x, b), lambda g: (g, _sum64(g, lead, b.dtype)))


def relu(x: Tensor) -> Tensor:
    tape = _tape()
    if tape is not None and tape.track_branches:
        tape.branches.append(np.packbits(x.data > 0))
    return _make("relu", np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = _softmax(x.data, axis)

    def vjp(g):
        dot = _sum64(g * s, axis, s.dtype)
        return (s * (g - np.expand_dims(dot, axis)),)

    return _make("softmax", s, (x,), vjp)


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True, dtype=np.float64)).astype(x.dtype)
    out = z - lse
    s = np.exp(out)

    def vjp(g):
        return (g - s * np.expand_dims(_sum64(g, axis), axis),)

    return _make("log_softmax", out, (x,), vjp)


# -- linear algebra & structure ---------------------------------------------


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """(..., i) @ (i, o) -> (..., o)."""
    a, w = _as_tensor(a), _as_tensor(w)
    if w.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {w.shape}")

    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, a.shape[-1])

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ w.data.T).reshape(a.shape) if a.requires_grad else None
        gw = a2.T @ g2 if w.requires_grad else None
        return ga, gw

    out = (a2 @ w.data).reshape(lead + (w.shape[1],))
    return _make("matmul", out, (a, w), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(_as_tensor(x) for x in xs)
    ax = axis % xs[0].data.ndim
    for x in xs[1:]:
        if x.data.ndim != xs[0].data.ndim or any(
            x.shape[i] != xs[0].shape[i] for i in range(x.data.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shape mismatch {xs[0].shape} vs {x.shape}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs))
        )

    return _make("concat", np.concatenate([x.data for x in xs], axis=ax), xs, vjp)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.data.ndim
    n = x.shape[ax]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice: range [{start}, {stop}) outside axis of length {n} in {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make("slice", x.data[idx], (x,), vjp)


def repeat(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and tile ``x`` ``n`` times along it."""
    out = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _make("repeat", out, (x,), lambda g: (_sum64(g, axis, x.dtype),))


# -- reductions -------------------------------------------------------------


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    out = _sum64(x.data, axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.dtype),)

    return _make("sum", out, (x,), vjp)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    out = (np.sum(x.data, axis=axis, dtype=np.float64) / n).astype(x.dtype)

    def vjp(g):
        g = g / x.dtype.type(n)
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.dtype),)

    return _make("mean", out, (x,), vjp)


def max_pool(x: Tensor, axis: int) -> Tensor:
    """Max over ``axis``; the gradient goes to the first maximal entry."""
    arg = np.argmax(x.data, axis=axis)
    _branch(arg)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis).squeeze(axis)

    def vjp(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return _make("max_pool", out, (x,), vjp)


# -- normalisation ----------------------------------------------------------


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, features: int, dtype=DEFAULT_DTYPE) -> "BatchNormState":
        return cls(np.zeros(features, dtype=dtype), np.ones(features, dtype=dtype))


def batchnorm(
    x: Tensor,
    state: BatchNormState,
    mode: str,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-feature normalisation over every axis but the last.

    train: batch statistics; running stats <- m * running + (1 - m) * batch
    (unbiased variance). eval: running statistics, a per-element affine map.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    f = x.shape[-1]
    if state.running_mean.shape != (f,):
        raise ShapeError(f"batchnorm: shape mismatch {x.shape} vs state {state.running_mean.shape}")
    red = tuple(range(x.data.ndim - 1))
    m = x.data.size // f
    dt = x.dtype
    if mode == "train":
        if m < 2:
            raise ShapeError(f"batchnorm(train) needs >= 2 rows, got input {x.shape}")
        mu = _sum64(x.data, red, np.float64) / m
        xc64 = x.data - mu.astype(dt)
        var = _sum64(xc64 * xc64, red, np.float64) / m
        state.running_mean[...] = momentum * state.running_mean + (1 - momentum) * mu
        state.running_var[...] = momentum * state.running_var + (1 - momentum) * var * m / (m - 1)
        inv = (1.0 / np.sqrt(var + eps)).astype(dt)
        xhat = xc64.astype(dt) * inv
    else:
        inv = (1.0 / np.sqrt(state.running_var.astype(np.float64) + eps)).astype(dt)
        xhat = (x.data - state.running_mean.astype(dt)) * inv

    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    inputs = (x,) + tuple(t for t in (gamma, beta) if t is not None)

    def vjp_packed(g):
        gx, gg, gb = _bn_grads(g)
        return (gx,) + tuple(v for v, t in ((gg, gamma), (gb, beta)) if t is not None)

    def _bn_grads(g):
        gg = _sum64(g * xhat, red, dt) if gamma is not None else None
        gb = _sum64(g, red, dt) if beta is not None else None
        dxhat = g * gamma.data if gamma is not None else g
        if mode == "train":
            s1 = _sum64(dxhat, red, dt)
            s2 = _sum64(dxhat * xhat, red, dt)
            gx = (inv / dt.type(m)) * (dt.type(m) * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv
        return gx, gg, gb

    return _make("batchnorm", out.astype(dt), inputs, vjp_packed)


def cond_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-sample feature modulation: x (S, N, F) * gamma (S, F) + beta (S, F)."""
    if (
        x.data.ndim != 3
        or gamma.shape != (x.shape[0], x.shape[2])
        or beta.shape != gamma.shape
    ):
        raise ShapeError(
            f"cond_affine: shape mismatch {x.shape} vs gamma {gamma.shape}, beta {beta.shape}"
        )
    gm = gamma.data[:, None, :]
    out = x.data * gm + beta.data[:, None, :]

    def vjp(g):
        return g * gm, _sum64(g * x.data, 1), _sum64(g, 1)

    return _make("cond_affine", out, (x, gamma, beta), vjp)


# -- losses -----------------------------------------------------------------


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross entropy on sigmoid(logits), stable logit form."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: shape mismatch {logits.shape} vs {y.shape}")
    x = logits.data
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    out = (np.sum(per, dtype=np.float64) / n).astype(x.dtype)
    return _make(
        "bce_with_logits", out, (logits,), lambda g: (g * (_sigmoid(x) - y) / x.dtype.type(n),)
    )


def cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean softmax cross entropy over rows of ``logits`` (n, K) selected by ``mask``.

    With an all-false mask the result is 0 and no gradient flows.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: shape mismatch {logits.shape} vs {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)]
        # only rows that count must be valid
        if mask is None or np.any(mask[(labels < 0) | (labels >= k)]):
            raise ValueError(f"cross_entropy: label {int(bad[0])} outside [0, {k})")
        labels = np.clip(labels, 0, k - 1)
    m = np.ones(logits.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(m.sum())
    x = logits.data
    dt = x.dtype
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1, dtype=np.float64)).astype(dt)
    nll = lse - z[np.arange(len(z)), labels]
    if count == 0:
        return _make("cross_entropy", np.zeros((), dt), (logits,), lambda g: (np.zeros_like(x),))
    out = (np.sum(nll[m], dtype=np.float64) / count).astype(dt)

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(p)), labels] -= 1
        p *= (m[:, None] * (g / dt.type(count))).astype(dt)
        return (p,)

    return _make("cross_entropy", out, (logits,), vjp)


# -- backward ---------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d loss / d leaf into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        tensors.pop(id(rec.out), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                tensors[key] = t
    for key, g in grads.items():
        t = tensors[key]
        g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


# -- gradient checking ------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_tensor: dict[str, float]
    checked: int
    skipped: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-3,
    max_coords: int = 24,
    rng: np.random.Generator | None = None,
    zero_tol: float = 1e-6,
) -> GradCheckResult:
    """Compare analytic gradients of ``fn()`` to central differences.

    ``fn`` must rebuild the scalar loss from the current tensor values. Run
    it on float64 tensors. Coordinates whose +/-h step changes a relu mask
    or a max-pool argmax straddle a kink; they are skipped and counted.
    The error per tensor is ||analytic - numeric|| / max(||analytic||,
    ||numeric||, zero_tol) over the checked coordinates; the floor keeps
    identically-zero gradients (e.g. a bias feeding a train-mode batchnorm)
    from comparing finite-difference roundoff against itself.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    with Tape(track_branches=True) as tape:
        loss = fn()
    backward(tape, loss)
    base_sig = tape.signature()

    def eval_at() -> tuple[float, str]:
        with Tape(track_branches=True) as t2:
            val = fn().item()
        return val, t2.signature()

    per_tensor: dict[str, float] = {}
    checked = skipped = 0
    for i, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        grad = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        ana, num = [], []
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp, sp = eval_at()
            flat[c] = orig - h
            fm, sm = eval_at()
            flat[c] = orig
            if sp != base_sig or sm != base_sig:
                skipped += 1
                continue
            checked += 1
            ana.append(float(grad[c]))
            num.append((fp - fm) / (2 * h))
        if ana:
            a, b = np.array(ana), np.array(num)
            denom = max(np.linalg.norm(a), np.linalg.norm(b), zero_tol)
            per_tensor[t.name or f"tensor{i}"] = float(np.linalg.norm(a - b) / denom)
    return GradCheckResult(max(per_tensor.values(), default=0.0), per_tensor, checked, skipped)
