"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: a ``DiffArray`` wraps a numpy array, a
``Tape`` records every primitive applied while it is active, and
``Tape.backward`` replays the records in reverse, accumulating
vector-Jacobian products into ``.grad``. Recording order is forward
execution order, so the reversed tape is a valid reverse topological
order and every node is visited exactly once.

All data is float64 and C-contiguous (row-major). Reductions use numpy's
fixed left-to-right order, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "DiffArray",
    "Tape",
    "ParamStore",
    "GradCheckReport",
    "init_params",
    "gradcheck",
    "save_checkpoint",
    "load_checkpoint",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "concat",
    "slice_cols",
    "gather_rows",
    "scatter_rows",
    "scatter_max",
    "segment_softmax",
    "segment_sum",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "softmax",
    "relu",
    "gelu",
    "sigmoid",
    "softplus",
    "log",
    "exp",
    "powc",
    "huber",
    "batch_norm",
    "linear",
    "mlp2",
]


class ShapeMismatch(ValueError):
    """Raised when an operation receives incompatible array shapes."""


class DiffArray:
    """Dense real array participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        data = np.asarray(data, dtype=np.float64)
        if not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"DiffArray(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> DiffArray:
    """Wrap raw values as a non-differentiable input."""
    return DiffArray(data, requires_grad=False)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records (output, backward-rule) pairs while active as a context."""

    def __init__(self):
        self.entries = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, root: DiffArray):
        """Seed d(root)/d(root) = 1 and propagate through the tape in reverse."""
        if root.size != 1:
            raise ShapeMismatch(f"backward root must be scalar, got shape {root.shape}")
        root.ensure_grad()[...] = 1.0
        for out, rule in reversed(self.entries):
            if out.grad is not None:
                rule(out.grad)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _result(data, inputs, rule) -> DiffArray:
    """Build the output node and record its backward rule if needed."""
    needs = any(isinstance(x, DiffArray) and x.requires_grad for x in inputs)
    out = DiffArray(data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.entries.append((out, rule))
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _acc(x: DiffArray, g: np.ndarray):
    if x.requires_grad:
        x.ensure_grad()[...] += g


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------

def add(a: DiffArray, b: DiffArray) -> DiffArray:
    out = a.data + b.data

    def rule(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _result(out, (a, b), rule)


def sub(a: DiffArray, b: DiffArray) -> DiffArray:
    out = a.data - b.data

    def rule(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, -_unbroadcast(g, b.shape))

    return _result(out, (a, b), rule)


def mul(a: DiffArray, b: DiffArray) -> DiffArray:
    out = a.data * b.data

    def rule(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), rule)


def scale(a: DiffArray, c: float) -> DiffArray:
    c = float(c)

    def rule(g):
        _acc(a, g * c)

    return _result(a.data * c, (a,), rule)


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul needs (n,k)@(k,m), got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def rule(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _result(out, (a, b), rule)


def concat(arrays, axis: int = 0) -> DiffArray:
    arrays = list(arrays)
    out = np.concatenate([x.data for x in arrays], axis=axis)
    sizes = [x.shape[axis] for x in arrays]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        for x, piece in zip(arrays, np.split(g, splits, axis=axis)):
            _acc(x, piece)

    return _result(out, tuple(arrays), rule)


def slice_cols(a: DiffArray, start: int, stop: int) -> DiffArray:
    out = a.data[:, start:stop]

    def rule(g):
        if a.requires_grad:
            a.ensure_grad()[:, start:stop] += g

    return _result(out, (a,), rule)


def gather_rows(a: DiffArray, idx) -> DiffArray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows index out of range for {a.shape[0]} rows")
    out = a.data[idx]

    def rule(g):
        if a.requires_grad:
            np.add.at(a.ensure_grad(), idx, g)

    return _result(out, (a,), rule)


def scatter_rows(a: DiffArray, idx, num_rows: int) -> DiffArray:
    """Place row i of `a` at output row idx[i]; idx entries must be unique."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((num_rows,) + a.shape[1:])
    out[idx] = a.data

    def rule(g):
        _acc(a, g[idx])

    return _result(out, (a,), rule)


# ---------------------------------------------------------------------------
# Segmented operations (ragged attention windows, grid pooling)
# ---------------------------------------------------------------------------

def _segment_starts(seg: np.ndarray, num_segments: int) -> np.ndarray:
    starts = np.searchsorted(seg, np.arange(num_segments), side="left")
    if num_segments and (np.diff(np.append(starts, len(seg))) == 0).any():
        raise ValueError("segmented op requires every segment to be non-empty")
    return starts


def segment_max_forward(x: np.ndarray, index: np.ndarray, num_out: int):
    """Per-segment columnwise max of `x` grouped by `index` (not sorted).

    Returns (max values num_out x C, row index of each winning entry). Ties
    go to the lowest input row. Helper shared with the plain pooling path.
    """
    order = np.argsort(index, kind="stable")
    sorted_idx = index[order]
    xs = x[order]
    starts = _segment_starts(sorted_idx, num_out)
    out = np.maximum.reduceat(xs, starts, axis=0)
    is_max = xs == out[sorted_idx]
    pos = np.where(is_max, np.arange(len(order))[:, None], len(order))
    first = np.minimum.reduceat(pos, starts, axis=0)
    arg_rows = order[first]
    return out, arg_rows


def scatter_max(a: DiffArray, index, num_out: int) -> DiffArray:
    """Columnwise max over rows sharing index; every output row must be hit."""
    index = np.asarray(index, dtype=np.int64)
    out, arg_rows = segment_max_forward(a.data, index, num_out)
    cols = np.broadcast_to(np.arange(a.shape[1]), arg_rows.shape)

    def rule(g):
        if a.requires_grad:
            np.add.at(a.ensure_grad(), (arg_rows, cols), g)

    return _result(out, (a,), rule)


def segment_sum(a: DiffArray, seg, num_segments: int) -> DiffArray:
    """Sum rows of `a` per segment; `seg` must be sorted ascending."""
    seg = np.asarray(seg, dtype=np.int64)
    starts = _segment_starts(seg, num_segments)
    out = np.add.reduceat(a.data, starts, axis=0)

    def rule(g):
        _acc(a, g[seg])

    return _result(out, (a,), rule)


def segment_softmax(a: DiffArray, seg, num_segments: int) -> DiffArray:
    """Columnwise softmax within each segment of rows; `seg` sorted ascending."""
    seg = np.asarray(seg, dtype=np.int64)
    starts = _segment_starts(seg, num_segments)
    seg_max = np.maximum.reduceat(a.data, starts, axis=0)
    z = np.exp(a.data - seg_max[seg])
    denom = np.add.reduceat(z, starts, axis=0)
    y = z / denom[seg]

    def rule(g):
        if not a.requires_grad:
            return
        gy = g * y
        tot = np.add.reduceat(gy, starts, axis=0)
        a.ensure_grad()[...] += gy - y * tot[seg]

    return _result(y, (a,), rule)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def reduce_sum(a: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if not a.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.ensure_grad()[...] += np.broadcast_to(g, a.shape)

    return _result(out, (a,), rule)


def reduce_mean(a: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    n = a.size if axis is None else a.shape[axis]
    out = a.data.sum(axis=axis, keepdims=keepdims) / n

    def rule(g):
        if not a.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.ensure_grad()[...] += np.broadcast_to(g, a.shape) / n

    return _result(out, (a,), rule)


def reduce_max(a: DiffArray, axis: int, keepdims: bool = False) -> DiffArray:
    """Max along one axis; the gradient routes to the first maximal entry."""
    out = a.data.max(axis=axis, keepdims=keepdims)
    arg = a.data.argmax(axis=axis)

    def rule(g):
        if not a.requires_grad:
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(arg, axis), g, axis=axis)
        a.ensure_grad()[...] += ga

    return _result(out, (a,), rule)


def softmax(a: DiffArray, axis: int = -1) -> DiffArray:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    z = np.exp(shifted)
    y = z / z.sum(axis=axis, keepdims=True)

    def rule(g):
        if not a.requires_grad:
            return
        gy = g * y
        a.ensure_grad()[...] += gy - y * gy.sum(axis=axis, keepdims=True)

    return _result(y, (a,), rule)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def relu(a: DiffArray) -> DiffArray:
    mask = a.data > 0.0

    def rule(g):
        _acc(a, g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), rule)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: DiffArray) -> DiffArray:
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)

    def rule(g):
        _acc(a, g * (cdf + a.data * pdf))

    return _result(a.data * cdf, (a,), rule)


def sigmoid(a: DiffArray) -> DiffArray:
    y = expit(a.data)

    def rule(g):
        _acc(a, g * y * (1.0 - y))

    return _result(y, (a,), rule)


def softplus(a: DiffArray) -> DiffArray:
    # log(1 + e^x) computed stably for both signs of x
    y = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    s = expit(a.data)

    def rule(g):
        _acc(a, g * s)

    return _result(y, (a,), rule)


def log(a: DiffArray) -> DiffArray:
    def rule(g):
        _acc(a, g / a.data)

    return _result(np.log(a.data), (a,), rule)


def exp(a: DiffArray) -> DiffArray:
    y = np.exp(a.data)

    def rule(g):
        _acc(a, g * y)

    return _result(y, (a,), rule)


def powc(a: DiffArray, c: float) -> DiffArray:
    """Elementwise a**c for a >= 0 and constant exponent c."""
    c = float(c)
    y = a.data**c

    def rule(g):
        _acc(a, g * c * a.data ** (c - 1.0))

    return _result(y, (a,), rule)


def huber(a: DiffArray, beta: float = 1.0) -> DiffArray:
    """Elementwise smooth-L1: 0.5 x^2/beta inside |x|<beta, |x|-beta/2 outside."""
    beta = float(beta)
    absx = np.abs(a.data)
    inside = absx < beta
    y = np.where(inside, 0.5 * a.data * a.data / beta, absx - 0.5 * beta)

    def rule(g):
        _acc(a, g * np.where(inside, a.data / beta, np.sign(a.data)))

    return _result(y, (a,), rule)


# ---------------------------------------------------------------------------
# Batch normalization and composite layers
# ---------------------------------------------------------------------------

def batch_norm(
    x: DiffArray,
    gamma: DiffArray,
    beta: DiffArray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> DiffArray:
    """Normalize over the point dimension (rows); running stats use
    `momentum` as the fraction of the old value kept per update."""
    if x.data.ndim != 2 or x.shape[1] != gamma.size:
        raise ShapeMismatch(f"batch_norm got x {x.shape} vs gamma {gamma.shape}")
    if training:
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data

    n = x.shape[0]

    def rule(g):
        _acc(gamma, (g * xhat).sum(axis=0))
        _acc(beta, g.sum(axis=0))
        if not x.requires_grad:
            return
        if training:
            gxhat = g * gamma.data
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=0)
                - xhat * (gxhat * xhat).sum(axis=0) / n
            )
        else:
            gx = g * gamma.data * inv_std
        x.ensure_grad()[...] += gx

    return _result(out, (x, gamma, beta), rule)


def linear(x: DiffArray, w: DiffArray, b: DiffArray | None = None) -> DiffArray:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def mlp2(x: DiffArray, w1, b1, w2, b2, activation=relu) -> DiffArray:
    """Two-layer MLP: linear, activation, linear."""
    return linear(activation(linear(x, w1, b1)), w2, b2)


# ---------------------------------------------------------------------------
# Parameter stores and initialization
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameters with deterministic iteration order."""

    def __init__(self):
        self._params: dict[str, DiffArray] = {}

    def add(self, name: str, arr: DiffArray) -> DiffArray:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not arr.requires_grad:
            raise ValueError(f"parameter {name!r} must require grad")
        self._params[name] = arr
        return arr

    def __getitem__(self, name: str) -> DiffArray:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()


def init_array(shape, kind: str, rng: np.random.Generator) -> np.ndarray:
    """Initial values for one parameter tensor.

    kind "weight": uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)),
    fan taken from the first and last dims. kind "zeros"/"ones": constants.
    """
    shape = tuple(int(d) for d in shape)
    if kind == "weight":
        fan_in, fan_out = shape[0], shape[-1]
        s = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-s, s, size=shape)
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    raise ValueError(f"unknown init kind {kind!r}")


def init_params(spec, rng: np.random.Generator) -> ParamStore:
    """Build a store from (name, shape, kind) triples; deterministic per seed."""
    store = ParamStore()
    for name, shape, kind in spec:
        store.add(name, DiffArray(init_array(shape, kind, rng), requires_grad=True))
    return store


class ParamBuilder:
    """Registers named parameters and batch-norm buffers while a model is
    being assembled. Creation order fixes both the store iteration order
    and the rng consumption, so one seed pins every initial value."""

    def __init__(self, store: ParamStore, rng: np.random.Generator, buffers: dict | None = None):
        self.store = store
        self.rng = rng
        self.buffers = buffers if buffers is not None else {}

    def weight(self, name: str, shape) -> DiffArray:
        return self.store.add(name, DiffArray(init_array(shape, "weight", self.rng), requires_grad=True))

    def zeros(self, name: str, shape) -> DiffArray:
        return self.store.add(name, DiffArray(init_array(shape, "zeros", self.rng), requires_grad=True))

    def ones(self, name: str, shape) -> DiffArray:
        return self.store.add(name, DiffArray(init_array(shape, "ones", self.rng), requires_grad=True))

    def buffer(self, name: str, value: np.ndarray) -> str:
        if name in self.buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.asarray(value, dtype=np.float64)
        return name


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    def __init__(self, max_rel_err: float, failures: list, checked: int, tol: float):
        self.max_rel_err = max_rel_err
        self.failures = failures
        self.checked = checked
        self.tol = tol

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"GradCheckReport({status}, max_rel_err={self.max_rel_err:.3e}, "
            f"checked={self.checked}, failures={len(self.failures)})"
        )


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def gradcheck(
    f,
    params: ParamStore,
    eps: float = 1e-4,
    tol: float = 1e-4,
    entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare f's analytic parameter gradients against central differences.

    f() must evaluate the composite at the current parameter values and
    return a scalar DiffArray. With entries_per_param set, only that many
    randomly chosen entries of each parameter are perturbed (the analytic
    pass always covers everything); otherwise every entry is checked.
    """
    params.zero_grad()
    tape = Tape()
    with tape:
        out = f()
    if out.size != 1:
        raise ShapeMismatch(f"gradcheck target must be scalar, got {out.shape}")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("gradcheck: function value is not finite")
    tape.backward(out)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    max_err = 0.0
    failures = []
    checked = 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if entries_per_param is not None and entries_per_param < n:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=entries_per_param, replace=False)
        else:
            idxs = range(n)
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data.reshape(()))
            flat[i] = orig - eps
            f_minus = float(f().data.reshape(()))
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(
                    f"gradcheck: non-finite value while perturbing {name}[{i}]"
                )
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = _rel_err(a_flat[i], numeric)
            checked += 1
            if err > max_err:
                max_err = err
            if err > tol:
                failures.append((name, int(i), float(a_flat[i]), float(numeric), float(err)))
    return GradCheckReport(max_err, failures, checked, tol)


# ---------------------------------------------------------------------------
# Checkpoint format: text header of (name, shape) lines, then one line
# "data", then the raw little-endian float64 payload in header order.
# Lines starting with "#" before the entries carry an optional echo of the
# run configuration and are ignored by the loader's array logic.
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed."""


def save_checkpoint(path, store: ParamStore, buffers: dict | None = None,
                    echo: list[str] | None = None):
    entries = [(name, p.data) for name, p in store.items()]
    if buffers:
        entries.extend((name, np.asarray(arr, dtype=np.float64)) for name, arr in buffers.items())
    with open(path, "wb") as fh:
        for line in echo or []:
            fh.write(f"# {line}\n".encode("ascii"))
        for name, arr in entries:
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name} {dims}\n".encode("ascii"))
        fh.write(b"data\n")
        for _, arr in entries:
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (name -> array mapping, echo lines)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"data\n")
    if sep < 0:
        raise CheckpointError(f"{path}: missing 'data' separator line")
    header = blob[:sep].decode("ascii").splitlines()
    payload = blob[sep + len(b"data\n"):]
    echo = []
    entries = []
    for line in header:
        if line.startswith("#"):
            echo.append(line[1:].strip())
            continue
        parts = line.split()
        if not parts:
            continue
        name, dims = parts[0], tuple(int(d) for d in parts[1:])
        entries.append((name, dims))
    total = sum(int(np.prod(d)) if d else 1 for _, d in entries)
    if len(payload) != total * 8:
        raise CheckpointError(
            f"{path}: payload holds {len(payload)} bytes, header wants {total * 8}"
        )
    arrays = {}
    offset = 0
    for name, dims in entries:
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset * 8)
        arrays[name] = arr.reshape(dims).astype(np.float64)
        offset += count
    return arrays, echo


def restore_params(store: ParamStore, arrays: dict):
    """Copy checkpoint arrays into an existing store by name."""
    for name, p in store.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(
                f"checkpoint shape {arrays[name].shape} != {p.data.shape} for {name!r}"
            )
        p.data[...] = arrays[name]


def restore_buffers(buffers: dict, arrays: dict):
    """Copy checkpoint arrays into existing non-gradient buffers by name."""
    for name, value in buffers.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing buffer {name!r}")
        if arrays[name].shape != value.shape:
            raise CheckpointError(
                f"checkpoint shape {arrays[name].shape} != {value.shape} for buffer {name!r}"
            )
        value[...] = arrays[name]
