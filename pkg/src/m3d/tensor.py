"""Dense tensors over a fixed catalog of differentiable primitives.

Each primitive computes its forward value with numpy and attaches a
hand-written backward rule. ``Tensor.backward`` walks the recorded graph in
reverse topological order; there is no general-purpose tracing beyond the
catalog in :data:`PRIMITIVES`.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
import zlib
from pathlib import Path

import numpy as np
import scipy.sparse as sp

_GRAD_CHECK_DEPTH = 0


class PreconditionError(RuntimeError):
    """An operation was called in a state its contract forbids."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_same_dtype(*ts):
    dtypes = {t.dtype for t in ts if np.issubdtype(t.dtype, np.floating)}
    if len(dtypes) > 1:
        raise TypeError(f"mixed float dtypes: {sorted(str(d) for d in dtypes)}")


# ---------------------------------------------------------------------------
# Primitives


def matmul(a, b, transpose_b=False) -> Tensor:
    """``a @ b`` (or ``a @ b^T``) for 2-d or equally batched 3-d operands."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b)
    right = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    if a.shape[-1] != right.shape[-2] or a.ndim != right.ndim or a.shape[:-2] != right.shape[:-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {right.shape}")
    out = np.matmul(a.data, right)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(right, -1, -2))
        gr = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, (np.swapaxes(gr, -1, -2) if transpose_b else gr)

    return _result(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}") from None
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    """Broadcasting elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}") from None
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def mul_scalar(a, scalar: float) -> Tensor:
    a = as_tensor(a)
    s = a.dtype.type(scalar) if np.issubdtype(a.dtype, np.floating) else scalar
    return _result(a.data * s, (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (np.where(pos, g, 0).astype(g.dtype),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    k = a.dtype.type(slope)
    pos = a.data > 0
    out = np.where(pos, a.data, a.data * k)
    return _result(out, (a,), lambda g: (np.where(pos, g, g * k),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def rmsnorm(x, scale, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2, -1) + eps) * scale`` row by row."""
    x, scale = as_tensor(x), as_tensor(scale)
    _check_same_dtype(x, scale)
    if scale.shape != x.shape[-1:]:
        raise ValueError(f"rmsnorm scale shape {scale.shape} does not match feature dim {x.shape[-1]}")
    d = x.shape[-1]
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + x.dtype.type(eps))
    normed = x.data * r
    out = normed * scale.data

    def backward(g):
        gs = g * scale.data
        gx = r * gs - x.data * (r**3) * np.sum(gs * x.data, axis=-1, keepdims=True) / d
        gscale = np.sum((g * normed).reshape(-1, d), axis=0)
        return gx, gscale

    return _result(out, (x, scale), backward)


def row_softmax_masked(scores, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; empty rows give zeros."""
    scores = as_tensor(scores)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    s = np.where(m, scores.data, -np.inf)
    mx = np.max(s, axis=-1, keepdims=True) if s.shape[-1] else np.zeros(s.shape[:-1] + (1,), scores.dtype)
    mx = np.where(np.isfinite(mx), mx, 0).astype(scores.dtype)
    e = np.where(m, np.exp(np.where(m, scores.data - mx, 0)), 0).astype(scores.dtype)
    z = e.sum(axis=-1, keepdims=True)
    p = np.where(z > 0, e / np.where(z > 0, z, 1), 0).astype(scores.dtype)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _result(p, (scores,), backward)


def _segments(rows):
    rows = np.asarray(rows)
    if len(rows) == 0:
        return None, rows, np.zeros(0, dtype=np.int64)
    order = None if np.all(rows[1:] >= rows[:-1]) else np.argsort(rows, kind="stable")
    r = rows if order is None else rows[order]
    starts = np.flatnonzero(np.concatenate([[True], r[1:] != r[:-1]]))
    return order, r, starts


def segment_reduce(values, rows, n_rows, ufunc, fill):
    """Reduce ``values`` (first axis) into ``n_rows`` buckets, fixed left-to-right order."""
    values = np.asarray(values)
    out = np.full((n_rows,) + values.shape[1:], fill, dtype=values.dtype)
    order, r, starts = _segments(rows)
    if len(starts):
        v = values if order is None else values[order]
        out[r[starts]] = ufunc.reduceat(v, starts, axis=0)
    return out


def scatter_row_softmax(scores, row_index, n_rows: int) -> Tensor:
    """Softmax over entries sharing a row id (first axis); other axes are batch.

    Rows without entries contribute nothing. Each row is shifted by its own
    maximum before exponentiation.
    """
    scores = as_tensor(scores)
    rows = np.asarray(row_index, dtype=np.int64)
    if rows.shape[0] != scores.shape[0]:
        raise ValueError("row_index needs one id per score entry")
    if len(rows) and (rows.min() < 0 or rows.max() >= n_rows):
        raise ValueError(f"row id outside [0, {n_rows})")
    if not np.all(np.isfinite(scores.data)):
        raise FloatingPointError("scatter_row_softmax needs finite scores")
    mx = segment_reduce(scores.data, rows, n_rows, np.maximum, 0)
    e = np.exp(scores.data - mx[rows])
    z = segment_reduce(e, rows, n_rows, np.add, 0)
    p = e / z[rows]

    def backward(g):
        dot = segment_reduce(g * p, rows, n_rows, np.add, 0)
        return (p * (g - dot[rows]),)

    return _result(p, (scores,), backward)


def concat_last_dim(tensors) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    _check_same_dtype(*ts)
    out = np.concatenate([t.data for t in ts], axis=-1)
    bounds = np.cumsum([0] + [t.shape[-1] for t in ts])

    def backward(g):
        return tuple(g[..., lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(out, ts, backward)


def dropout(x, p: float, key=None, uniforms=None, training: bool = True) -> Tensor:
    """Inverted dropout: kept values are divided by ``1 - p``.

    Randomness comes either from ``uniforms`` (same shape as ``x``) or from
    a counter-based stream named by ``key`` (a tuple starting with the seed).
    """
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if _GRAD_CHECK_DEPTH:
        raise PreconditionError("dropout is active inside a finite-difference check")
    if uniforms is None:
        if key is None:
            raise ValueError("dropout needs a key or precomputed uniforms")
        uniforms = counter_rng(*key).random(x.shape)
    keep = (np.asarray(uniforms) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy_rows(logits, targets, row_ids) -> Tensor:
    """Mean softmax cross-entropy over the selected rows."""
    logits = as_tensor(logits)
    ids = np.asarray(row_ids, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if len(ids) == 0:
        raise ValueError("cross_entropy_rows needs at least one row")
    if ids.shape != targets.shape:
        raise ValueError("targets and row_ids must align")
    z = logits.data[ids]
    mx = z.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(z - mx).sum(axis=1))
    loss = np.mean(lse - z[np.arange(len(ids)), targets])
    out = np.asarray(loss, dtype=logits.dtype)

    def backward(g):
        prob = np.exp(z - lse[:, None])
        prob[np.arange(len(ids)), targets] -= 1
        full = np.zeros_like(logits.data)
        np.add.at(full, ids, prob * (g / len(ids)))
        return (full,)

    return _result(out, (logits,), backward)


def _scatter_matrix(idx, n_rows, dtype):
    m = len(idx)
    return sp.csr_matrix((np.ones(m, dtype=dtype), (idx, np.arange(m))), shape=(n_rows, m))


def _row_width(shape) -> int:
    return int(np.prod(shape[1:], dtype=np.int64))


def gather_rows(x, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather index outside [0, {x.shape[0]})")
    out = x.data[idx]

    def backward(g):
        mat = _scatter_matrix(idx, x.shape[0], g.dtype)
        return (np.asarray(mat @ g.reshape(len(idx), _row_width(x.shape))).reshape(x.shape),)

    return _result(out, (x,), backward)


def scatter_add_rows(x, idx, n_rows: int) -> Tensor:
    """``out[idx[j]] += x[j]``; summation order per row is fixed."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != x.shape[0]:
        raise ValueError("scatter index needs one id per input row")
    if len(idx) and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"scatter index outside [0, {n_rows})")
    mat = _scatter_matrix(idx, n_rows, x.dtype)
    out = np.asarray(mat @ x.data.reshape(len(idx), _row_width(x.shape))).reshape((n_rows,) + x.shape[1:])
    return _result(out, (x,), lambda g: (g[idx],))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def sum_last(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.sum(axis=-1), (x,), lambda g: (np.broadcast_to(g[..., None], x.shape).copy(),))


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "mul_scalar": mul_scalar,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "rmsnorm": rmsnorm,
    "row_softmax_masked": row_softmax_masked,
    "scatter_row_softmax": scatter_row_softmax,
    "concat_last_dim": concat_last_dim,
    "dropout": dropout,
    "cross_entropy_rows": cross_entropy_rows,
    "gather_rows": gather_rows,
    "scatter_add_rows": scatter_add_rows,
    "reshape": reshape,
    "transpose": transpose,
    "sum_last": sum_last,
}


def apply_primitive(kind: str, inputs, **attrs) -> Tensor:
    """Dispatch by name: ``apply_primitive("relu", [x])``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    if kind == "concat_last_dim":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# Randomness, parameters, checkpoints


def counter_rng(seed: int, *stream) -> np.random.Generator:
    """Philox generator keyed by ``(seed, hash(stream))``.

    The same (seed, stream) always yields the same sequence, independent of
    what other streams were drawn before.
    """
    digest = hashlib.blake2b(repr(tuple(stream)).encode(), digest_size=8).digest()
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest, "little")], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


INIT_KINDS = ("zeros", "ones", "glorot", "identity")


class ParameterStore:
    """Named trainable tensors with a per-parameter init rule."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.specs: dict[str, tuple[tuple, str]] = {}
        self.params: dict[str, Tensor] = {}

    def declare(self, name: str, shape, init: str = "glorot"):
        if name in self.specs:
            raise KeyError(f"duplicate parameter {name!r}")
        if init not in INIT_KINDS:
            raise ValueError(f"unknown init {init!r}")
        self.specs[name] = (tuple(shape), init)

    def initialize(self, seed: int) -> "ParameterStore":
        for name, (shape, init) in self.specs.items():
            if init == "zeros":
                data = np.zeros(shape)
            elif init == "ones":
                data = np.ones(shape)
            elif init == "identity":
                if len(shape) != 2 or shape[0] != shape[1]:
                    raise ValueError(f"identity init needs a square matrix, {name} is {shape}")
                data = np.eye(shape[0])
            else:
                fan_in, fan_out = (shape[-2], shape[-1]) if len(shape) >= 2 else (shape[0], shape[0])
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                data = counter_rng(seed, "init", zlib.crc32(name.encode())).uniform(-limit, limit, size=shape)
            self.params[name] = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        return self

    def __getitem__(self, name) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise KeyError(f"parameter {name!r} is not initialized") from None

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self.specs) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, (shape, _) in self.specs.items():
            arr = np.asarray(state[name])
            if arr.shape != shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != declared {shape}")
            self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True, name=name)
        return self

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(dtype)
        out.specs = dict(self.specs)
        return out.load_state_dict(self.state_dict())


def save_checkpoint(path, state: dict, meta: dict | None = None) -> Path:
    """One JSON header line, then raw little-endian blobs in manifest order."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "length": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {"format": "m3d-checkpoint/1", "meta": meta or {}, "tensors": entries}
    with path.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for raw in blobs:
            fh.write(raw)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with Path(path).open("rb") as fh:
        header = json.loads(fh.readline())
        body = fh.read()
    state = {}
    for e in header["tensors"]:
        raw = body[e["offset"] : e["offset"] + e["length"]]
        state[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return state, header.get("meta", {})


# ---------------------------------------------------------------------------
# Gradient verification


@contextlib.contextmanager
def grad_check_mode():
    """While active, dropout in training mode raises :class:`PreconditionError`."""
    global _GRAD_CHECK_DEPTH
    _GRAD_CHECK_DEPTH += 1
    try:
        yield
    finally:
        _GRAD_CHECK_DEPTH -= 1


def finite_diff_check(fn, store: ParameterStore, epsilon: float = 1e-6, n_coords=None, seed=0, return_details=False):
    """Compare backward gradients against central differences.

    ``fn(store)`` must rebuild and return a scalar loss from the store's
    current values. Returns the max over sampled coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if store.dtype != np.float64:
        raise PreconditionError("finite-difference checks need a float64 parameter store")
    coords = [(name, i) for name, t in store.items() for i in range(t.data.size)]
    if n_coords is not None and n_coords < len(coords):
        pick = np.random.default_rng(seed).choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in np.sort(pick)]
    with grad_check_mode():
        store.zero_grad()
        loss = fn(store)
        if not np.isfinite(loss.data):
            raise FloatingPointError("loss is not finite")
        loss.backward()
        analytic = {
            name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in store.items()
        }
        details = []
        worst = 0.0
        for name, i in coords:
            flat = store[name].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(fn(store).data)
            flat[i] = orig - epsilon
            f_minus = float(fn(store).data)
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
            details.append((name, i, a, numeric, err))
    store.zero_grad()
    return (worst, details) if return_details else worst
