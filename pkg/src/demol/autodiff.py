"""Minimal dense-matrix reverse-mode differentiation.

Every tensor is a 2-D float64 matrix; scalars are (1, 1). A ``Tape`` records
operations in execution order, which is already topological, so the backward
pass visits each node exactly once in reverse. Tensors built without a tape
compute values only (inference mode). Any operation that produces NaN or Inf
raises ``NonFiniteError``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NonFiniteError, ShapeError

_SQRT2 = math.sqrt(2.0)
_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D matrices, got shape {arr.shape}")
    return arr


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # single-pass screen: any NaN/Inf makes the sum non-finite; desk-scale
    # magnitudes cannot overflow a finite sum
    if arr.size and not math.isfinite(float(arr.sum())):
        if np.isfinite(arr).all():  # pathological overflow of the screen only
            return arr
        raise NonFiniteError(f"operation {op!r} produced non-finite values")
    return arr


class Tape:
    """Execution-ordered record of operations for one forward pass."""

    __slots__ = ("_parents", "_backward", "_param_views")

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._backward: list[Callable[[np.ndarray], Sequence[np.ndarray | None]] | None] = []
        self._param_views: dict[int, "TapeParams"] = {}

    def __len__(self) -> int:
        return len(self._parents)

    def _record(self, parents, backward) -> int:
        self._parents.append(parents)
        self._backward.append(backward)
        return len(self._parents) - 1

    def leaf(self, value) -> "Tensor":
        arr = _check_finite(_as_matrix(value), "leaf")
        return Tensor(arr, self, self._record((), None))


class Tensor:
    __slots__ = ("value", "tape", "node_id")

    def __init__(self, value: np.ndarray, tape: Tape | None = None, node_id: int = -1):
        self.value = value
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() needs a (1, 1) tensor, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, taped={self.tape is not None})"

    # operator sugar
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def constant(value, tape: Tape | None = None) -> Tensor:
    """Wrap an array as a non-differentiable input."""
    arr = _check_finite(_as_matrix(value), "constant")
    return Tensor(arr, None, -1) if tape is None else tape.leaf(arr)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ShapeError("operands recorded on different tapes")
    return tape


def _emit(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    value = _check_finite(value, op)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value, None, -1)
    parents = tuple(t.node_id for t in inputs)
    return Tensor(value, tape, tape._record(parents, backward))


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------


def _need_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape("add", a, b)
    return _emit("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape("sub", a, b)
    return _emit("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.value * c, (a,), lambda g: (g * c,))


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply a matrix by a (1, 1) tensor."""
    if s.value.shape != (1, 1):
        raise ShapeError(f"scale_by: scale must be (1, 1), got {s.value.shape}")
    av, sv = a.value, s.value
    return _emit(
        "scale_by",
        av * sv[0, 0],
        (a, s),
        lambda g: (g * sv[0, 0], np.array([[float(np.sum(g * av))]])),
    )


def add_rowvec(a: Tensor, row: Tensor) -> Tensor:
    """Add a (1, d) row vector to every row of an (n, d) matrix."""
    if row.value.shape != (1, a.value.shape[1]):
        raise ShapeError(
            f"add_rowvec: row shape {row.value.shape} does not match matrix {a.value.shape}"
        )
    return _emit(
        "add_rowvec",
        a.value + row.value,
        (a, row),
        lambda g: (g, g.sum(axis=0, keepdims=True)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: shapes {a.value.shape} and {b.value.shape} incompatible")
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    if a.value.size != rows * cols:
        raise ShapeError(f"reshape: cannot view {a.value.shape} as ({rows}, {cols})")
    old = a.value.shape
    return _emit(
        "reshape", a.value.reshape(rows, cols).copy(), (a,), lambda g: (g.reshape(old),)
    )


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_rows needs at least one tensor")
    cols = tensors[0].value.shape[1]
    for t in tensors:
        if t.value.shape[1] != cols:
            raise ShapeError("concat_rows: column counts differ")
    sizes = [t.value.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[offsets[k] : offsets[k + 1]] for k in range(len(sizes)))

    return _emit("concat_rows", np.vstack([t.value for t in tensors]), tuple(tensors), backward)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = tensors[0].value.shape[0]
    for t in tensors:
        if t.value.shape[0] != rows:
            raise ShapeError("concat_cols: row counts differ")
    sizes = [t.value.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, offsets[k] : offsets[k + 1]] for k in range(len(sizes)))

    return _emit("concat_cols", np.hstack([t.value for t in tensors]), tuple(tensors), backward)


def mean_rows(a: Tensor) -> Tensor:
    n = a.value.shape[0]
    if n < 1:
        raise ShapeError("mean_rows needs at least one row")
    return _emit(
        "mean_rows",
        a.value.mean(axis=0, keepdims=True),
        (a,),
        lambda g: (np.repeat(g / n, n, axis=0),),
    )


def sum_all(a: Tensor) -> Tensor:
    shape = a.value.shape
    return _emit(
        "sum_all",
        np.array([[float(a.value.sum())]]),
        (a,),
        lambda g: (np.full(shape, g[0, 0]),),
    )


def sum_cols(a: Tensor) -> Tensor:
    """Row sums: (n, d) -> (n, 1)."""
    d = a.value.shape[1]
    return _emit(
        "sum_cols",
        a.value.sum(axis=1, keepdims=True),
        (a,),
        lambda g: (np.repeat(g, d, axis=1),),
    )


def abs_elem(a: Tensor) -> Tensor:
    sign = np.sign(a.value)
    return _emit("abs", np.abs(a.value), (a,), lambda g: (g * sign,))


def gather_rows(a: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp).reshape(-1)
    n = a.value.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"gather_rows: id out of range for {n} rows")
    shape = a.value.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return _emit("gather_rows", a.value[ids].copy(), (a,), backward)


def scatter_pairs(
    values: Tensor, value_idx: np.ndarray, rows: np.ndarray, cols: np.ndarray, shape
) -> Tensor:
    """Build a dense matrix by adding values[value_idx[e]] at (rows[e], cols[e])."""
    value_idx = np.asarray(value_idx, dtype=np.intp)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if values.value.shape[1] != 1:
        raise ShapeError("scatter_pairs: values must be a column vector")
    out = np.zeros(shape)
    np.add.at(out, (rows, cols), values.value[value_idx, 0])
    vshape = values.value.shape

    def backward(g):
        gv = np.zeros(vshape)
        np.add.at(gv[:, 0], value_idx, g[rows, cols])
        return (gv,)

    return _emit("scatter_pairs", out, (values,), backward)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF form x * Phi(x)."""
    x = a.value
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = np.exp(-0.5 * x * x) / _SQRT_2PI
    return _emit("gelu", x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def row_normalize(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance per row (parameter-free normalization)."""
    x = a.value
    d = x.shape[1]
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv

    def backward(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    del d
    return _emit("row_normalize", y, (a,), backward)


def softmax_bias_mask(logits: Tensor, bias: Tensor, mask: np.ndarray) -> Tensor:
    """Per-row masked softmax over logits + bias.

    Masked entries get exactly zero weight and never enter the normalization;
    rows with no unmasked entries return all zeros.
    """
    _need_same_shape("softmax_bias_mask", logits, bias)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.value.shape:
        raise ShapeError(
            f"softmax_bias_mask: mask shape {mask.shape} != logits {logits.value.shape}"
        )
    z = np.where(mask, logits.value + bias.value, -np.inf)
    if z.size:
        rowmax = z.max(axis=1, keepdims=True)
        rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
        e = np.where(mask, np.exp(z - rowmax), 0.0)
        s = e.sum(axis=1, keepdims=True)
        w = e / np.where(s > 0.0, s, 1.0)  # all-masked rows stay exactly zero
    else:
        w = np.zeros_like(z)

    def backward(g):
        inner = (g * w).sum(axis=1, keepdims=True)
        dz = w * (g - inner)
        return (dz, dz)

    return _emit("softmax_bias_mask", w, (logits, bias), backward)


def gaussian_kernel_features(
    alpha: Tensor, beta: Tensor, x: np.ndarray, mu: np.ndarray, sigma: float
) -> Tensor:
    """Kernel bank responses for P scalars: (P, 1) params -> (P, K).

    f[p, k] = -(1 / (sqrt(2 pi) sigma)) * exp(-((alpha_p x_p + beta_p - mu_k) / sigma)^2 / 2)
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    if alpha.value.shape != x.shape or beta.value.shape != x.shape:
        raise ShapeError(
            f"gaussian_kernel_features: params {alpha.value.shape}/{beta.value.shape} "
            f"do not match inputs {x.shape}"
        )
    sigma = abs(float(sigma))
    u = alpha.value * x + beta.value
    z = (u - mu.reshape(1, -1)) / sigma
    f = -np.exp(-0.5 * z * z) / (_SQRT_2PI * sigma)

    def backward(g):
        du = g * (-z * f) / sigma  # (P, K)
        du = du.sum(axis=1, keepdims=True)
        return (du * x, du)

    return _emit("gaussian_kernel_features", f, (alpha, beta), backward)


# ---------------------------------------------------------------------------
# Fused losses
# ---------------------------------------------------------------------------


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Sum over rows of -log softmax(logits)[target]."""
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    n, c = logits.value.shape
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy_rows: {targets.shape[0]} targets for {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ShapeError(f"cross_entropy_rows: target id out of range for {c} classes")
    x = logits.value
    rowmax = x.max(axis=1, keepdims=True)
    e = np.exp(x - rowmax)
    s = e.sum(axis=1, keepdims=True)
    logp = (x - rowmax) - np.log(s)
    loss = -logp[np.arange(n), targets].sum()
    p = e / s

    def backward(g):
        dx = p.copy()
        dx[np.arange(n), targets] -= 1.0
        return (dx * g[0, 0],)

    return _emit("cross_entropy_rows", np.array([[loss]]), (logits,), backward)


def bce_with_logits_mean(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy with a stable logit formulation."""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if labels.shape != logits.value.shape or logits.value.shape[1] != 1:
        raise ShapeError("bce_with_logits_mean: logits and labels must be (P, 1)")
    x = logits.value
    n = x.shape[0]
    if n == 0:
        raise ShapeError("bce_with_logits_mean: empty input")
    per = np.maximum(x, 0.0) - x * labels + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))  # overflow-free logistic
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        return ((sig - labels) * (g[0, 0] / n),)

    return _emit("bce_with_logits_mean", np.array([[per.mean()]]), (logits,), backward)


# ---------------------------------------------------------------------------
# Backward pass and parameter registry
# ---------------------------------------------------------------------------


class Gradients:
    """Per-node adjoints produced by one backward pass."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def wrt(self, t: Tensor) -> np.ndarray | None:
        return self._grads.get(t.node_id)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse accumulation from a scalar loss; each node visited once."""
    if loss.tape is not tape or loss.node_id < 0:
        raise ShapeError("loss was not recorded on this tape")
    if loss.value.shape != (1, 1):
        raise ShapeError(f"loss must be a (1, 1) scalar, got {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
    for node_id in range(loss.node_id, -1, -1):
        g = grads.pop(node_id, None)
        if g is None:
            continue
        fn = tape._backward[node_id]
        if fn is None:
            grads[node_id] = g  # leaf: keep its accumulated adjoint
            continue
        parent_grads = fn(g)
        for pid, pg in zip(tape._parents[node_id], parent_grads):
            if pg is None:
                continue
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
    return Gradients(grads)


class ModelParams:
    """Named registry of learnable arrays with a stable flat view."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}

    def register(self, name: str, value) -> np.ndarray:
        if name in self._arrays:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.ascontiguousarray(np.asarray(value, dtype=np.float64))
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        self._arrays[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def names(self) -> tuple[str, ...]:
        return tuple(self._arrays)

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return self._arrays.items()

    @property
    def size(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def slices(self) -> dict[str, slice]:
        out: dict[str, slice] = {}
        offset = 0
        for name, arr in self._arrays.items():
            out[name] = slice(offset, offset + arr.size)
            offset += arr.size
        return out

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def set_flat(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64).ravel()
        if vector.size != self.size:
            raise ShapeError(f"flat vector has {vector.size} entries, expected {self.size}")
        offset = 0
        for arr in self._arrays.values():
            arr[...] = vector[offset : offset + arr.size].reshape(arr.shape)
            offset += arr.size


class TapeParams:
    """Lazily wraps registry arrays as tape leaves; one leaf per used array.

    Use ``TapeParams.for_tape`` so that every computation on one tape shares
    the same leaf per parameter; gradients then accumulate on a single node.
    """

    def __init__(self, params: ModelParams, tape: Tape | None):
        self.params = params
        self.tape = tape
        self._leaves: dict[str, Tensor] = {}

    @classmethod
    def for_tape(cls, params: ModelParams, tape: Tape | None) -> "TapeParams":
        if tape is None:
            return cls(params, None)
        view = tape._param_views.get(id(params))
        if view is None:
            view = cls(params, tape)
            tape._param_views[id(params)] = view
        return view

    def __getitem__(self, name: str) -> Tensor:
        leaf = self._leaves.get(name)
        if leaf is None:
            arr = self.params[name]
            leaf = self.tape.leaf(arr) if self.tape is not None else Tensor(arr, None, -1)
            self._leaves[name] = leaf
        return leaf

    def flat_gradients(self, grads: Gradients) -> np.ndarray:
        """Gradient vector aligned with the registry flat view; unused -> 0."""
        out = np.zeros(self.params.size)
        slices = self.params.slices()
        for name, leaf in self._leaves.items():
            g = grads.wrt(leaf)
            if g is not None:
                out[slices[name]] = g.ravel()
        return out


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    mean_rel_err: float
    n_coordinates: int
    per_param: dict[str, float]  # name -> worst relative error in that array

    def worst(self, k: int = 5) -> list[tuple[str, float]]:
        ranked = sorted(self.per_param.items(), key=lambda kv: -kv[1])
        return ranked[:k]


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


def grad_check(
    f: Callable[[Tape | None], tuple[Tensor | float, TapeParams | None]],
    params: ModelParams,
    step: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` must be deterministic given the current parameter values and return
    ``(loss, tape_params)``: the analytic call receives a tape and must hand
    back the ``TapeParams`` view it read parameters through, so leaf
    gradients can be collected; finite-difference calls receive ``None`` and
    may return ``(float, None)``. Relative error per coordinate is
    |a - b| / max(1e-8, |a| + |b|).
    """
    tape = Tape()
    loss, tp = f(tape)
    if not isinstance(loss, Tensor) or loss.tape is not tape or tp is None:
        raise ShapeError("grad_check: analytic call must return (taped Tensor, TapeParams)")
    analytic = tp.flat_gradients(backward(tape, loss))

    def value_only() -> float:
        out, _ = f(None)
        return out.item() if isinstance(out, Tensor) else float(out)

    n = params.size
    errors = np.zeros(n)
    idx = 0
    for _, arr in params.items():
        view = arr.reshape(-1)
        for k in range(view.size):
            original = view[k]
            view[k] = original + step
            up = value_only()
            view[k] = original - step
            down = value_only()
            view[k] = original
            fd = (up - down) / (2.0 * step)
            errors[idx] = relative_error(analytic[idx], fd)
            idx += 1

    per_param = {
        name: float(errors[sl].max()) if errors[sl].size else 0.0
        for name, sl in params.slices().items()
    }
    return GradCheckReport(
        max_rel_err=float(errors.max()) if n else 0.0,
        mean_rel_err=float(errors.mean()) if n else 0.0,
        n_coordinates=n,
        per_param=per_param,
    )
