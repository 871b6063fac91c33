"""Minimal reverse-mode differentiation over dense float64 arrays.

Values live in :class:`DArray`. Operations executed inside an active
:class:`Tape` are recorded in execution order together with a local gradient
rule; :func:`backward` replays the record in reverse.

Broadcasting is deliberately absent. The only mixed-shape operations are the
explicitly named ones (``scale``, ``add_bias``, ``rowscale``), so a shape bug
fails loudly instead of silently broadcasting.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An operation was called outside its preconditions."""


class NumericalError(FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class DArray:
    __slots__ = ("data", "requires_grad", "grad", "name", "tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self.tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"DArray(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other: DArray) -> DArray:
        return add(self, other)

    def __sub__(self, other: DArray) -> DArray:
        return sub(self, other)

    def __mul__(self, other: DArray) -> DArray:
        return mul(self, other)

    def __matmul__(self, other: DArray) -> DArray:
        return matmul(self, other)

    def __neg__(self) -> DArray:
        return scale(self, -1.0)


@dataclass
class _Node:
    outputs: tuple[DArray, ...]
    inputs: tuple[DArray, ...]
    rule: Callable[..., Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations run while it is active (and having
    at least one input that requires a gradient) are appended to ``nodes``.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def owns(self, a: DArray) -> bool:
        return a.tape is self

    def _record(self, outputs, inputs, rule) -> None:
        self.nodes.append(_Node(tuple(outputs), tuple(inputs), rule))
        for o in outputs:
            o.tape = self


_TAPES: list[Tape] = []


def _active() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _as(a) -> DArray:
    return a if isinstance(a, DArray) else DArray(a)


def _emit(values: Sequence[np.ndarray], inputs: Sequence[DArray], rule) -> tuple[DArray, ...]:
    tape = _active()
    track = tape is not None and any(x.requires_grad for x in inputs)
    outs = []
    for v in values:
        o = DArray.__new__(DArray)
        o.data = v
        o.requires_grad = track
        o.grad = None
        o.name = None
        o.tape = None
        outs.append(o)
    if track:
        tape._record(outs, inputs, rule)
    return tuple(outs)


def _one(value: np.ndarray, inputs: Sequence[DArray], rule) -> DArray:
    return _emit((value,), inputs, lambda g: rule(g[0]))[0]


def _same_shape(op: str, a: DArray, b: DArray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- linear algebra

def matmul(a: DArray, b: DArray) -> DArray:
    a, b = _as(a), _as(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _one(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a: DArray) -> DArray:
    a = _as(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {a.shape}")
    return _one(a.data.T, (a,), lambda g: (g.T,))


# ------------------------------------------------------------------ elementwise

def add(a: DArray, b: DArray) -> DArray:
    a, b = _as(a), _as(b)
    _same_shape("add", a, b)
    return _one(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: DArray, b: DArray) -> DArray:
    a, b = _as(a), _as(b)
    _same_shape("sub", a, b)
    return _one(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: DArray, b: DArray) -> DArray:
    a, b = _as(a), _as(b)
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _one(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: DArray, c: float) -> DArray:
    """Multiply every entry by the constant ``c``."""
    a = _as(a)
    c = float(c)
    return _one(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a: DArray) -> DArray:
    a = _as(a)
    s = _sigmoid(a.data)
    return _one(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: DArray) -> DArray:
    a = _as(a)
    t = np.tanh(a.data)
    return _one(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a: DArray) -> DArray:
    a = _as(a)
    on = a.data > 0
    return _one(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


_ELEMENTWISE = {"add": add, "mul": mul, "sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def elementwise(op: str, *args: DArray) -> DArray:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * np.tanh(0.5 * x) + 0.5


# ----------------------------------------------------- explicit mixed-shape ops

def add_bias(a: DArray, b: DArray) -> DArray:
    """Add the vector ``b`` (K,) to every row of ``a`` (N, K)."""
    a, b = _as(a), _as(b)
    if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: cannot add {b.shape} to rows of {a.shape}")
    return _one(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))


def rowscale(a: DArray, s: DArray) -> DArray:
    """Multiply row ``n`` of ``a`` (N, K) by ``s[n, 0]`` for ``s`` of shape (N, 1)."""
    a, s = _as(a), _as(s)
    if a.data.ndim != 2 or s.shape != (a.shape[0], 1):
        raise DimensionError(f"rowscale: cannot scale rows of {a.shape} by {s.shape}")
    A, S = a.data, s.data
    return _one(A * S, (a, s), lambda g: (g * S, (g * A).sum(axis=1, keepdims=True)))


def row_mean(a: DArray) -> DArray:
    """Mean of each row of ``a`` (N, K), shape (N, 1)."""
    a = _as(a)
    if a.data.ndim != 2:
        raise DimensionError(f"row_mean: expected a matrix, got {a.shape}")
    k = a.shape[1]
    return _one(a.data.mean(axis=1, keepdims=True), (a,),
                lambda g: (np.repeat(g / k, k, axis=1),))


# --------------------------------------------------------------- restructuring

def concat(parts: Sequence[DArray], axis: int = 0) -> DArray:
    parts = [_as(p) for p in parts]
    if not parts:
        raise ContractError("concat: nothing to concatenate")
    ndim = parts[0].data.ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.data.ndim != ndim or any(
            p.shape[d] != parts[0].shape[d] for d in range(ndim) if d != ax
        ):
            raise DimensionError(
                f"concat: {parts[0].shape} and {p.shape} disagree off axis {axis}"
            )
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def rule(g):
        index = [slice(None)] * ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[ax] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return _one(np.concatenate([p.data for p in parts], axis=ax), parts, rule)


def slice_(a: DArray, axis: int, start: int, stop: int) -> DArray:
    a = _as(a)
    ax = axis % a.data.ndim
    n = a.shape[ax]
    if not (0 <= start < stop <= n):
        raise IndexError(f"slice: range {start}..{stop} outside axis {axis} of length {n}")
    index = [slice(None)] * a.data.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def rule(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _one(a.data[index].copy(), (a,), rule)


def reshape(a: DArray, shape: tuple[int, ...]) -> DArray:
    a = _as(a)
    out = a.data.reshape(shape)
    return _one(out, (a,), lambda g: (g.reshape(a.shape),))


def take_rows(a: DArray, rows: np.ndarray) -> DArray:
    """Rows ``rows`` (integer indices) of the matrix ``a``."""
    a = _as(a)
    rows = np.asarray(rows, dtype=np.int64)

    def rule(g):
        full = np.zeros_like(a.data)
        np.add.at(full, rows, g)
        return (full,)

    return _one(a.data[rows], (a,), rule)


def put_rows(a: DArray, rows: np.ndarray, n: int) -> DArray:
    """An (n, K) matrix of zeros with ``a``'s rows placed at distinct indices ``rows``."""
    a = _as(a)
    rows = np.asarray(rows, dtype=np.int64)
    if a.data.ndim != 2 or len(rows) != a.shape[0]:
        raise DimensionError(f"put_rows: {len(rows)} indices for rows of {a.shape}")
    out = np.zeros((n, a.shape[1]), dtype=a.data.dtype)
    out[rows] = a.data
    return _one(out, (a,), lambda g: (g[rows],))


def sum_(a: DArray) -> DArray:
    a = _as(a)
    return _one(np.array(a.data.sum()), (a,), lambda g: (np.full_like(a.data, g),))


def mse(pred: DArray, label: DArray) -> DArray:
    """Mean squared difference over every entry (horizon and batch)."""
    pred, label = _as(pred), _as(label)
    if pred.shape != label.shape or pred.data.size == 0:
        raise DimensionError(f"mse: prediction {pred.shape} vs label {label.shape}")
    diff = pred.data - label.data
    n = diff.size
    return _one(np.array(np.mean(diff * diff)), (pred, label),
                lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


# ----------------------------------------------------------------- fused LSTM

def lstm_cell(x: DArray, h: DArray, c: DArray, w_ih: DArray, w_hh: DArray,
              b: DArray) -> tuple[DArray, DArray]:
    """One LSTM step for a batch, recorded as a single tape operation.

    ``x`` (N, D), ``h``/``c`` (N, H), ``w_ih`` (4H, D), ``w_hh`` (4H, H),
    ``b`` (4H,). Gate order is input, forget, cell candidate, output.
    """
    x, h, c = _as(x), _as(h), _as(c)
    H = w_hh.shape[1]
    N = x.shape[0]
    if (x.data.ndim != 2 or w_ih.shape != (4 * H, x.shape[1]) or w_hh.shape != (4 * H, H)
            or b.shape != (4 * H,) or h.shape != (N, H) or c.shape != (N, H)):
        raise DimensionError(
            f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape} incompatible with "
            f"w_ih {w_ih.shape}, w_hh {w_hh.shape}, b {b.shape}"
        )
    X, Hp, Cp, Wi, Wh = x.data, h.data, c.data, w_ih.data, w_hh.data
    z = X @ Wi.T + Hp @ Wh.T + b.data
    ifo = _sigmoid(np.concatenate((z[:, :2 * H], z[:, 3 * H:]), axis=1))
    i, f, o = ifo[:, :H], ifo[:, H:2 * H], ifo[:, 2 * H:]
    gg = np.tanh(z[:, 2 * H:3 * H])
    c_new = f * Cp + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc

    def rule(grads):
        dh, dc = grads
        if dh is None:
            dh = np.zeros_like(h_new)
        dc = np.zeros_like(c_new) if dc is None else dc.copy()
        dc += dh * o * (1.0 - tc * tc)
        dz = np.empty_like(z)
        dz[:, :H] = dc * gg * i * (1.0 - i)
        dz[:, H:2 * H] = dc * Cp * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
        dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
        return (dz @ Wi, dz @ Wh, dc * f, dz.T @ X, dz.T @ Hp, dz.sum(axis=0))

    return _emit((h_new, c_new), (x, h, c, w_ih, w_hh, b), rule)


def lstm_layer(xs: DArray, w_ih: DArray, w_hh: DArray, b: DArray,
               reverse: bool = False) -> DArray:
    """Run one LSTM direction over a whole sequence as a single tape operation.

    ``xs`` is (T, N, D); returns every hidden state, (T, N, H), indexed by input
    time. States start at zero. With ``reverse`` the recurrence runs from the
    last step to the first.
    """
    xs = _as(xs)
    H = w_hh.shape[1]
    if (xs.data.ndim != 3 or w_ih.shape != (4 * H, xs.shape[2]) or w_hh.shape != (4 * H, H)
            or b.shape != (4 * H,)):
        raise DimensionError(
            f"lstm_layer: xs {xs.shape} incompatible with w_ih {w_ih.shape}, "
            f"w_hh {w_hh.shape}, b {b.shape}"
        )
    T, N, D = xs.shape
    X = xs.data[::-1] if reverse else xs.data
    Wi, Wh = w_ih.data, w_hh.data
    Z = (X.reshape(T * N, D) @ Wi.T + b.data).reshape(T, N, 4 * H)
    hs = np.zeros((T + 1, N, H), dtype=Z.dtype)
    cs = np.zeros((T + 1, N, H), dtype=Z.dtype)
    acts = np.empty((T, N, 4 * H), dtype=Z.dtype)
    tcs = np.empty((T, N, H), dtype=Z.dtype)
    for t in range(T):
        z = Z[t] + hs[t] @ Wh.T
        a = acts[t]
        a[:, :2 * H] = _sigmoid(z[:, :2 * H])
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        a[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
        cs[t + 1] = a[:, H:2 * H] * cs[t] + a[:, :H] * a[:, 2 * H:3 * H]
        tcs[t] = np.tanh(cs[t + 1])
        hs[t + 1] = a[:, 3 * H:] * tcs[t]
    out = hs[1:][::-1] if reverse else hs[1:]

    def rule(g):
        G = g[::-1] if reverse else g
        dZ = np.empty_like(Z)
        dh_next = np.zeros((N, H), dtype=Z.dtype)
        dc_next = np.zeros((N, H), dtype=Z.dtype)
        for t in range(T - 1, -1, -1):
            a = acts[t]
            i, f, gg, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            dh = G[t] + dh_next
            tc = tcs[t]
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dZ[t]
            dz[:, :H] = dc * gg * i * (1.0 - i)
            dz[:, H:2 * H] = dc * cs[t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dh_next = dz @ Wh
            dc_next = dc * f
        flat = dZ.reshape(T * N, 4 * H)
        dX = None
        if xs.requires_grad:
            dX = (flat @ Wi).reshape(T, N, D)
            dX = dX[::-1] if reverse else dX
        return (dX,
                flat.T @ X.reshape(T * N, D),
                flat.T @ hs[:-1].reshape(T * N, H),
                flat.sum(axis=0))

    return _one(np.ascontiguousarray(out), (xs, w_ih, w_hh, b), rule)


# ------------------------------------------------------------------- backward

def backward(loss: DArray) -> None:
    """Accumulate dloss/dleaf into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise ContractError("backward: loss was not produced on a tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        gouts = [grads.pop(id(o), None) for o in node.outputs]
        if all(g is None for g in gouts):
            continue
        gins = node.rule(gouts)
        for inp, g in zip(node.inputs, gins):
            if g is None or not inp.requires_grad:
                continue
            if tape.owns(inp):
                key = id(inp)
                prev = grads.get(key)
                grads[key] = g if prev is None else prev + g
            else:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += g


def zero_grads(params: Sequence[DArray]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_errors: dict[str, np.ndarray]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(f: Callable[[], DArray], params: Sequence[DArray], eps: float = 1e-5,
               tol: float = 1e-4, extended: bool = True, max_entries: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` must rebuild its computation from the current ``params`` values on
    every call. Relative error per entry is
    ``|ga - gfd| / max(|ga|, |gfd|, 1e-8)``.

    The analytic side always runs in float64. With ``extended`` the difference
    quotients are evaluated with parameters held in ``np.longdouble``, which
    keeps rounding noise well below 1e-8 * eps so gradients near the 1e-8
    floor are still checkable. ``max_entries`` checks a seeded random subset
    of each parameter's entries instead of all of them.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ContractError(f"grad_check: eps={eps} outside [1e-6, 1e-4]")
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    with Tape():
        loss = f()
        _check_finite(loss.data, "loss")
        if loss.tape is not None:  # otherwise f ignores params and every gradient is 0
            backward(loss)
    analytic = [p.grad.copy() for p in params]
    originals = [p.data for p in params]
    dtype = np.longdouble if extended else np.float64
    rng = np.random.default_rng(seed)
    rel: dict[str, np.ndarray] = {}
    worst = 0.0
    try:
        for p in params:
            p.data = p.data.astype(dtype)
        for k, p in enumerate(params):
            flat = p.data.reshape(-1)
            entries = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
            ga = analytic[k].reshape(-1)[entries]
            numeric = np.zeros(len(entries))
            step = dtype(eps)
            for n, j in enumerate(entries):
                orig = flat[j]
                flat[j] = orig + step
                up = f().data.reshape(-1)[0]
                flat[j] = orig - step
                down = f().data.reshape(-1)[0]
                flat[j] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NumericalError(
                        f"grad_check: non-finite loss perturbing parameter {k} entry {j}")
                numeric[n] = float((up - down) / (2 * step))
            _check_finite(ga, f"gradient of parameter {k}")
            err = np.abs(ga - numeric) / np.maximum(
                np.maximum(np.abs(ga), np.abs(numeric)), 1e-8)
            rel[p.name or str(k)] = err
            if err.size:
                worst = max(worst, float(err.max()))
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
    return GradCheckReport(worst, rel, tol)


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite value in {what}")
