"""Dense float64 tensors with taped reverse-mode differentiation.

Everything is numpy-backed and double precision. Differentiable ops are
module-level functions that record onto the innermost active ``Tape``;
without an active tape they are plain forward computations. Gradients
are checked against central finite differences (see ``grad_check``).

Two properties the rest of the package relies on:

* every op validates its output for NaN/Inf and raises ``NumericError``
  instead of letting non-finite values propagate silently;
* reduction order inside segment ops is the edge-list order, so repeated
  runs on identical inputs are bitwise identical.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor",
    "Tape",
    "NumericError",
    "tensor",
    "add",
    "sub",
    "mul",
    "div_eps",
    "matmul",
    "transpose",
    "reshape",
    "reduce_sum",
    "reduce_mean",
    "gather_rows",
    "slice_cols",
    "concat_rows",
    "linear",
    "leaky_relu",
    "gelu",
    "layer_norm",
    "segment_softmax",
    "segment_weighted_sum",
    "segment_sum",
    "backward",
    "grad_check",
    "GradCheckReport",
    "RowScatterPlan",
    "SegmentPlan",
    "mac_counter",
    "macs_enabled",
]


class NumericError(RuntimeError):
    """Raised when an operation produces NaN or Inf."""


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    # One-pass screen: the sum is finite iff no NaN/Inf is present
    # (barring overflow of astronomically large finite values, which is
    # itself an error condition at the scales this package works at).
    with np.errstate(all="ignore"):
        total = float(np.sum(arr))
    if not math.isfinite(total):
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """A dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if check:
            _ensure_finite(arr, "tensor construction")
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
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's values, outside the tape."""
        return Tensor(self.data, requires_grad=False, check=False)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # -- reductions / shape ops as methods, arithmetic as operators --

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class _Record:
    """One executed op: its output and a closure producing input grads."""

    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: tuple, backward_fn: Callable):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops.

    Execution order is topological by construction (an op's inputs exist
    before it runs), so the backward pass is a single reverse sweep that
    visits each record exactly once. Leaf tensors (those not produced by
    any record on this tape) receive gradients in ``.grad``; calling
    ``backward`` again without resetting accumulates.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad."""
        if loss.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        produced = {id(rec.output) for rec in self._records}
        if id(loss) not in produced:
            raise ValueError("loss was not produced on this tape")

        # Pass-local flow keeps repeated backward calls independent; only
        # leaves fold their pass total into the persistent .grad buffer.
        flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self._records):
            g = flow.pop(id(rec.output), None)
            if g is None:
                continue
            holders.pop(id(rec.output), None)
            grads = rec.backward_fn(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in flow:
                    flow[key] = flow[key] + gi
                else:
                    flow[key] = gi
                    holders[key] = inp
        for key, g in flow.items():
            t = holders[key]
            _ensure_finite(g, "backward")
            t.grad = g.copy() if t.grad is None else t.grad + g


_TAPE_STACK: list[Tape] = []


def backward(loss: Tensor) -> None:
    """Run the innermost active tape's backward pass from ``loss``."""
    if not _TAPE_STACK:
        raise ValueError("backward called with no active tape")
    _TAPE_STACK[-1].backward(loss)


def _apply(out_data: np.ndarray, inputs: tuple, backward_fn: Callable, op: str) -> Tensor:
    _ensure_finite(out_data, op)
    out = Tensor(out_data, requires_grad=False, check=False)
    if _TAPE_STACK and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE_STACK[-1]._records.append(_Record(out, inputs, backward_fn))
    return out


# ---------------------------------------------------------------------------
# multiply-accumulate counter (complexity instrumentation)
# ---------------------------------------------------------------------------


class _MacCounter:
    __slots__ = ("enabled", "total")

    def __init__(self):
        self.enabled = False
        self.total = 0


_MACS = _MacCounter()


class mac_counter:
    """Context manager counting multiply-accumulates of the ops inside it."""

    def __init__(self):
        self.total = 0

    def __enter__(self) -> "mac_counter":
        self._prev = (_MACS.enabled, _MACS.total)
        _MACS.enabled = True
        _MACS.total = 0
        return self

    def __exit__(self, exc_type, exc, tb):
        self.total = _MACS.total
        _MACS.enabled, _MACS.total = self._prev
        return False


def macs_enabled() -> bool:
    return _MACS.enabled


def _count(n: int) -> None:
    if _MACS.enabled:
        _MACS.total += int(n)


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------


def add(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    out = x.data + y.data
    _count(out.size)

    def bw(g):
        return (_unbroadcast(g, x.data.shape) if x.requires_grad else None,
                _unbroadcast(g, y.data.shape) if y.requires_grad else None)

    return _apply(out, (x, y), bw, "add")


def sub(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    out = x.data - y.data
    _count(out.size)

    def bw(g):
        return (_unbroadcast(g, x.data.shape) if x.requires_grad else None,
                _unbroadcast(-g, y.data.shape) if y.requires_grad else None)

    return _apply(out, (x, y), bw, "sub")


def mul(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    out = x.data * y.data
    _count(out.size)

    def bw(g):
        return (_unbroadcast(g * y.data, x.data.shape) if x.requires_grad else None,
                _unbroadcast(g * x.data, y.data.shape) if y.requires_grad else None)

    return _apply(out, (x, y), bw, "mul")


def div_eps(x, y, eps: float = 1e-6) -> Tensor:
    """Elementwise x / (y + eps); the guard keeps the op total."""
    if eps <= 0:
        raise ValueError("div_eps requires eps > 0")
    x, y = _as_tensor(x), _as_tensor(y)
    denom = y.data + eps
    out = x.data / denom
    _count(out.size)

    def bw(g):
        gx = _unbroadcast(g / denom, x.data.shape) if x.requires_grad else None
        gy = _unbroadcast(-g * out / denom, y.data.shape) if y.requires_grad else None
        return (gx, gy)

    return _apply(out, (x, y), bw, "div_eps")


def leaky_relu(x, negative_slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    neg = x.data < 0
    out = np.where(neg, negative_slope * x.data, x.data)
    _count(out.size)

    def bw(g):
        return (np.where(neg, negative_slope * g, g),)

    return _apply(out, (x,), bw, "leaky_relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """Gaussian error linear unit (tanh form)."""
    x = _as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)
    _count(4 * out.size)

    def bw(g):
        # d/dv [0.5 v (1 + tanh(inner))]
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * sech2 * d_inner),)

    return _apply(out, (x,), bw, "gelu")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ValueError("layer_norm affine parameters must match the last axis")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gamma.data * xhat + beta.data
    _count(6 * out.size)

    def bw(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = inv_std * (gg - m1 - xhat * m2) if x.requires_grad else None
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        gbeta = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        return (gx, ggamma, gbeta)

    return _apply(out, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# linear algebra / structure
# ---------------------------------------------------------------------------


def matmul(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise ValueError(f"matmul shape mismatch: {x.shape} @ {y.shape}")
    out = x.data @ y.data
    _count(x.shape[0] * x.shape[1] * y.shape[1])

    def bw(g):
        gx = g @ y.data.T if x.requires_grad else None
        gy = x.data.T @ g if y.requires_grad else None
        return (gx, gy)

    return _apply(out, (x, y), bw, "matmul")


def linear(x, w, b) -> Tensor:
    """Affine map: out[i, j] = sum_k x[i, k] w[k, j] + b[j]."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, w {w.shape}")
    if b.data.shape != (w.shape[1],):
        raise ValueError(f"linear bias shape {b.shape} does not match width {w.shape[1]}")
    out = x.data @ w.data + b.data
    _count(x.shape[0] * x.shape[1] * w.shape[1] + out.size)

    def bw(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return (gx, gw, gb)

    return _apply(out, (x, w, b), bw, "linear")


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")

    def bw(g):
        return (g.T,)

    return _apply(x.data.T, (x,), bw, "transpose")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.data.shape

    def bw(g):
        return (g.reshape(old),)

    return _apply(x.data.reshape(shape), (x,), bw, "reshape")


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    _count(x.size)
    shape = x.data.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _apply(np.asarray(out), (x,), bw, "reduce_sum")


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.data.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ValueError("slice_cols expects a 2-D tensor")
    shape = x.data.shape

    def bw(g):
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        return (gx,)

    return _apply(x.data[:, start:stop].copy(), (x,), bw, "slice_cols")


def concat_rows(x, y) -> Tensor:
    """Concatenate two tensors row-wise along the last axis."""
    x, y = _as_tensor(x), _as_tensor(y)
    if x.data.shape[:-1] != y.data.shape[:-1]:
        raise ValueError(f"concat_rows shape mismatch: {x.shape} vs {y.shape}")
    nx = x.data.shape[-1]

    def bw(g):
        return (g[..., :nx] if x.requires_grad else None,
                g[..., nx:] if y.requires_grad else None)

    return _apply(np.concatenate([x.data, y.data], axis=-1), (x, y), bw, "concat_rows")


# ---------------------------------------------------------------------------
# indexed / segment ops
# ---------------------------------------------------------------------------


class RowScatterPlan:
    """Reusable scatter-add of row blocks into ``n_rows`` target rows.

    Wraps a sparse incidence matrix so repeated scatters over the same
    index array (one graph topology) avoid per-call index processing.
    """

    __slots__ = ("idx", "n_rows", "_matrix")

    def __init__(self, idx: np.ndarray, n_rows: int):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("index array must be 1-D")
        if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
            raise IndexError("scatter index out of range")
        self.idx = idx
        self.n_rows = n_rows
        self._matrix = sparse.csr_matrix(
            (np.ones(idx.size), (idx, np.arange(idx.size))),
            shape=(n_rows, idx.size),
        )

    def scatter(self, rows: np.ndarray) -> np.ndarray:
        if rows.ndim == 1:
            return self._matrix @ rows
        return self._matrix @ rows


def _scatter_rows(idx: np.ndarray, rows: np.ndarray, n_rows: int,
                  plan: RowScatterPlan | None) -> np.ndarray:
    if plan is not None:
        return plan.scatter(rows)
    out_shape = (n_rows,) + rows.shape[1:]
    out = np.zeros(out_shape)
    np.add.at(out, idx, rows)
    return out


def gather_rows(x, idx, plan: RowScatterPlan | None = None) -> Tensor:
    """Select rows of ``x`` by index; backward scatter-adds into them."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError("gather index out of range")
    n = x.data.shape[0]

    def bw(g):
        return (_scatter_rows(idx, g, n, plan),)

    return _apply(x.data[idx], (x,), bw, "gather_rows")


class SegmentPlan:
    """Precomputed structure of a target-index array for segment ops.

    Segment ops are fastest when targets are already sorted (the edge
    ordering the graph builders emit); unsorted targets are handled via a
    stable sort so within-segment order still follows the edge list.
    """

    __slots__ = ("targets", "n_segments", "order", "sorted_targets", "starts",
                 "seg_ids", "scatter")

    def __init__(self, targets: np.ndarray, n_segments: int):
        targets = np.asarray(targets, dtype=np.int64)
        if targets.ndim != 1 or targets.size == 0:
            raise ValueError("segment targets must be a non-empty 1-D array")
        if targets.min() < 0 or targets.max() >= n_segments:
            raise IndexError("segment target out of range")
        self.targets = targets
        self.n_segments = n_segments
        if np.all(targets[1:] >= targets[:-1]):
            self.order = None
            self.sorted_targets = targets
        else:
            self.order = np.argsort(targets, kind="stable")
            self.sorted_targets = targets[self.order]
        st = self.sorted_targets
        self.starts = np.flatnonzero(np.r_[True, st[1:] != st[:-1]])
        # segment id (position in the unique list) of every sorted entry
        self.seg_ids = np.cumsum(np.r_[0, st[1:] != st[:-1]])
        self.scatter = RowScatterPlan(targets, n_segments)


def _plan_for(targets, n_segments, plan: SegmentPlan | None) -> SegmentPlan:
    if plan is not None:
        if plan.n_segments != n_segments or plan.targets.shape != np.shape(targets):
            raise ValueError("segment plan does not match the given targets")
        return plan
    return SegmentPlan(np.asarray(targets), n_segments)


def segment_softmax(scores, targets, n_nodes: int, plan: SegmentPlan | None = None) -> Tensor:
    """Softmax of scores grouped by target node (max-subtracted).

    ``scores`` may be (E,) or (E, H); groups are normalized independently
    per trailing column. Nodes with no incoming entries simply have no
    rows; a single-entry group maps to exactly 1.0.
    """
    scores = _as_tensor(scores)
    p = _plan_for(targets, n_nodes, plan)
    s = scores.data if p.order is None else scores.data[p.order]
    seg_max = np.maximum.reduceat(s, p.starts, axis=0)
    shifted = s - seg_max[p.seg_ids]
    e = np.exp(shifted)
    seg_sum = np.add.reduceat(e, p.starts, axis=0)
    alpha_sorted = e / seg_sum[p.seg_ids]
    if p.order is None:
        alpha = alpha_sorted
    else:
        alpha = np.empty_like(alpha_sorted)
        alpha[p.order] = alpha_sorted
    _count(4 * alpha.size)

    def bw(g):
        ga = g * alpha
        if p.order is None:
            seg_dot = np.add.reduceat(ga, p.starts, axis=0)
            return (ga - alpha * seg_dot[p.seg_ids],)
        gs = ga[p.order]
        seg_dot = np.add.reduceat(gs, p.starts, axis=0)
        ds_sorted = gs - alpha_sorted * seg_dot[p.seg_ids]
        ds = np.empty_like(ds_sorted)
        ds[p.order] = ds_sorted
        return (ds,)

    return _apply(alpha, (scores,), bw, "segment_softmax")


def segment_weighted_sum(weights, values, targets, n_nodes: int,
                         plan: SegmentPlan | None = None) -> Tensor:
    """out[i] = sum over edges e with target i of weights[e] * values[e].

    Nodes with no incoming edges get the zero row.
    """
    weights, values = _as_tensor(weights), _as_tensor(values)
    if weights.ndim != 1 or values.ndim != 2 or weights.shape[0] != values.shape[0]:
        raise ValueError(
            f"segment_weighted_sum shape mismatch: weights {weights.shape}, values {values.shape}")
    p = _plan_for(targets, n_nodes, plan)
    weighted = weights.data[:, None] * values.data
    out = p.scatter.scatter(weighted)
    _count(2 * weighted.size)
    tgt = p.targets

    def bw(g):
        g_rows = g[tgt]
        gw = (g_rows * values.data).sum(axis=1) if weights.requires_grad else None
        gv = weights.data[:, None] * g_rows if values.requires_grad else None
        return (gw, gv)

    return _apply(out, (weights, values), bw, "segment_weighted_sum")


def segment_sum(values, targets, n_nodes: int, plan: SegmentPlan | None = None) -> Tensor:
    """Sum value rows into their target node; empty nodes get zero rows."""
    values = _as_tensor(values)
    p = _plan_for(targets, n_nodes, plan)
    out = p.scatter.scatter(values.data)
    _count(values.size)
    tgt = p.targets

    def bw(g):
        return (g[tgt],)

    return _apply(out, (values,), bw, "segment_sum")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


class GradCheckReport:
    """Per-parameter reverse-mode vs central-difference discrepancies."""

    def __init__(self):
        self.entries: dict[str, float] = {}
        self.failures: dict[str, str] = {}

    @property
    def max_rel_error(self) -> float:
        return max(self.entries.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return not self.failures

    def __repr__(self):
        return (f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, "
                f"params={len(self.entries)}, failures={len(self.failures)})")


def grad_check(f: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]] | dict,
               step: float = 1e-5, atol_floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` must be a deterministic closure returning a scalar Tensor built
    from the given parameters. Relative discrepancy per entry is
    |a - d| / max(|a|, |d|, atol_floor); the report carries the max per
    parameter. Non-finite values are reported against the offending
    parameter rather than raised.
    """
    if not 0.0 < step <= 1e-3:
        raise ValueError("step must lie in (0, 1e-3]")
    if isinstance(params, dict):
        params = list(params.items())
    report = GradCheckReport()
    if not params:
        return report

    for _, t in params:
        t.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params}

    for name, t in params:
        flat = t.data.reshape(-1)
        an = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + step
                up = float(f().data)
                flat[i] = orig - step
                down = float(f().data)
            except NumericError:
                report.failures[name] = f"non-finite values while perturbing entry {i}"
                flat[i] = orig
                break
            finally:
                flat[i] = orig
            fd = (up - down) / (2.0 * step)
            if not (math.isfinite(fd) and math.isfinite(an[i])):
                report.failures[name] = f"non-finite gradient at entry {i}"
                break
            rel = abs(an[i] - fd) / max(abs(an[i]), abs(fd), atol_floor)
            worst = max(worst, rel)
        report.entries[name] = worst
    return report
