"""Small reverse-mode autodiff on top of numpy.

Only the operations the reasoning model needs are provided: dense linear
maps, concatenation, row gathers, segment sums, elementwise nonlinearities,
grouped softmax and log-sum-exp.  Every op checks its output for NaN/Inf.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    """A numpy array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        # iterative topological sort; recursion would overflow on long tapes
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def take(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(x.data[index], (x,), backward)


def _segment_sum_np(values: np.ndarray, segments: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    if values.shape[0]:
        np.add.at(out, segments, values)
    return out


def segment_sum(x: Tensor, segments, n: int) -> Tensor:
    """Sum rows of ``x`` that share a segment id; output has ``n`` rows."""
    segments = np.asarray(segments, dtype=np.int64)
    return _make(_segment_sum_np(x.data, segments, n), (x,), lambda g: (g[segments],))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def total(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(x.data)   # overflow surfaces as the non-finite check below
    return _make(e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def cos(x: Tensor) -> Tensor:
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def grouped_softmax_np(values: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    groups = np.asarray(groups, dtype=np.int64)
    counts = np.bincount(groups, minlength=n_groups)
    if np.any(counts == 0):
        raise ValueError("grouped_softmax: empty group")
    gmax = np.full(n_groups, -np.inf, dtype=values.dtype)
    np.maximum.at(gmax, groups, values)
    e = np.exp(values - gmax[groups])
    denom = np.bincount(groups, weights=e, minlength=n_groups)
    return e / denom[groups]


def grouped_softmax(values: Tensor, groups, n_groups: int | None = None) -> Tensor:
    """Softmax of a 1-D tensor within each group of a partition.

    ``groups[i]`` names the group of entry ``i``.  Every group id in
    ``range(n_groups)`` must occur at least once.
    """
    groups = np.asarray(groups, dtype=np.int64)
    if n_groups is None:
        n_groups = int(groups.max()) + 1 if groups.size else 0
    if values.data.ndim != 1 or values.shape[0] != groups.shape[0]:
        raise ShapeError("grouped_softmax expects a 1-D tensor aligned with groups")
    y = grouped_softmax_np(values.data, groups, n_groups)

    def backward(g):
        dot = np.bincount(groups, weights=y * g, minlength=n_groups)
        return (y * (g - dot[groups]),)

    return _make(y, (values,), backward)


def logsumexp_rows(x: Tensor) -> Tensor:
    """Row-wise log-sum-exp of a 2-D tensor, max-shifted."""
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    p = e / s
    return _make(out, (x,), lambda g: (g[:, None] * p,))


# ---------------------------------------------------------------------------
# model building blocks


@dataclass
class TimeEncoderParams:
    w: Tensor
    b: Tensor

    @property
    def dim(self) -> int:
        return self.w.shape[0]


def time_encode(t, p: TimeEncoderParams) -> Tensor:
    """Cosine time features sqrt(1/d_t) * cos(w*t + b), one row per time value.

    ``t`` may be a scalar or a 1-D array; the result always has shape
    ``(len(t), d_t)``.
    """
    t = np.atleast_1d(np.asarray(t, dtype=p.w.data.dtype))
    if not np.all(np.isfinite(t)):
        raise FloatingPointError("non-finite time value")
    d_t = p.dim
    wt = mul(Tensor(t[:, None]), reshape(p.w, (1, d_t)))
    return mul(cos(add(wt, reshape(p.b, (1, d_t)))), np.sqrt(1.0 / d_t))


@dataclass
class GruParams:
    """Stacked gate weights; column blocks are (update, reset, candidate)."""
    w_in: Tensor    # (d_in, 3d)
    w_hid: Tensor   # (d, 3d)
    b: Tensor       # (3d,)

    @property
    def hidden(self) -> int:
        return self.w_hid.shape[0]


def gru_cell(u: Tensor, h: Tensor, p: GruParams) -> Tensor:
    """Batched GRU update on row vectors.

    z = sig(W_z u + U_z h + b_z), r = sig(W_r u + U_r h + b_r),
    h~ = tanh(W_h u + U_h (r*h) + b_h), h' = (1 - z) * h + z * h~.
    """
    d = p.hidden
    if u.data.ndim != 2 or h.data.ndim != 2:
        raise ShapeError("gru_cell expects 2-D inputs")
    if u.shape[1] != p.w_in.shape[0] or h.shape[1] != d or u.shape[0] != h.shape[0]:
        raise ShapeError(f"gru_cell: input {u.shape}, hidden {h.shape} vs params d={d}")
    wu = matmul(u, p.w_in)
    # columns of the hidden weight matrix are sliced via matmul with fixed selectors
    b = reshape(p.b, (1, 3 * d))
    w_zr = _cols(p.w_hid, 0, 2 * d)
    w_h = _cols(p.w_hid, 2 * d, 3 * d)
    zr = sigmoid(add(add(_cols(wu, 0, 2 * d), matmul(h, w_zr)), _cols(b, 0, 2 * d)))
    z = _cols(zr, 0, d)
    r = _cols(zr, d, 2 * d)
    cand = tanh(add(add(_cols(wu, 2 * d, 3 * d), matmul(mul(r, h), w_h)), _cols(b, 2 * d, 3 * d)))
    return add(mul(sub(1.0, z), h), mul(z, cand))


def _cols(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _make(x.data[:, start:stop], (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
               n_coords: int = 20, rng: np.random.Generator | None = None,
               atol: float = 1e-9) -> float:
    """Largest relative error between backprop and central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    each call.  Up to ``n_coords`` coordinates per parameter are probed.
    Relative error is ``|a - n| / max(|a|, |n|, atol)``.
    """
    params = list(params)
    rng = rng or np.random.default_rng(0)
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check needs 64-bit parameters")
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss")
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        k = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with no_grad():
                up = float(loss_fn().data)
            flat[c] = orig - eps
            with no_grad():
                down = float(loss_fn().data)
            flat[c] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint io

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, Tensor], meta: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in tensors.items()
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_tensors(path, expected_shapes: dict[str, tuple] | None = None):
    """Read a checkpoint; returns (arrays by name, meta)."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version in {path}")
    arrays = {}
    try:
        for name, entry in payload["params"].items():
            shape = tuple(entry["shape"])
            arr = np.asarray(entry["values"], dtype=np.float64)
            if arr.size != int(np.prod(shape)):
                raise CheckpointError(f"{name}: {arr.size} values for shape {shape}")
            arrays[name] = arr.reshape(shape)
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    if expected_shapes is not None:
        missing = set(expected_shapes) - set(arrays)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, shape in expected_shapes.items():
            if arrays[name].shape != tuple(shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {arrays[name].shape}, model {tuple(shape)}")
    return arrays, payload.get("meta", {})
