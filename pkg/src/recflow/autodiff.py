"""Reverse-mode autodiff on dense numpy arrays.

Small tape-based engine: every operation returns a ``Tensor`` that remembers
its parents and a vector-Jacobian closure. ``backward`` walks the tape in
reverse topological order. 64-bit floats are the default; 32-bit is allowed
for throughput (gradient checks are only reliable in 64-bit).
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float64
PARAM_DTYPE = np.float64

_F64_TAG = 0
_F32_TAG = 1
CHECKPOINT_VERSION = 1


class NonScalarLoss(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class NonFinite(FloatingPointError):
    pass


class DuplicateParameter(ValueError):
    pass


_grad_enabled = True


def set_param_dtype(dtype):
    """Storage dtype for newly registered parameters (the 32-bit speed
    path); gradient checks remain reliable only in 64-bit."""
    global PARAM_DTYPE
    PARAM_DTYPE = np.dtype(dtype).type


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_vjp", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        elif dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad = None
        self._parents = ()
        self._vjp = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return take(self, key)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def constant(value, dtype=None):
    return as_tensor(value, dtype=dtype)


def _make(data, parents, vjp):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic --------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), vjp)


def power(a, exponent):
    a = as_tensor(a)
    c = float(exponent)
    out = a.data ** c

    def vjp(g):
        return (g * c * a.data ** (c - 1.0),)

    return _make(out, (a,), vjp)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), vjp)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), vjp)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp)


def log(a):
    a = as_tensor(a)
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make(out, (a,), vjp)


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape ops ---------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), vjp)


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    out = np.swapaxes(a.data, ax1, ax2)

    def vjp(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _make(out, (a,), vjp)


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor; use swapaxes")
    return swapaxes(a, 0, 1)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp)


def take(a, key):
    """Generic indexing; gradients scatter-add into the source."""
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _make(out, (a,), vjp)


def rows(a, indices):
    """Gather rows along axis 0 (embedding lookup)."""
    idx = np.asarray(indices, dtype=np.intp)
    return take(a, idx)


def take_pairs(a, row_idx, col_idx):
    """Gather a[row_i, col_i] for paired index vectors (2-D input)."""
    a = as_tensor(a)
    r = np.asarray(row_idx, dtype=np.intp)
    c = np.asarray(col_idx, dtype=np.intp)
    out = a.data[r, c]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (r, c), g)
        return (ga,)

    return _make(out, (a,), vjp)


def aggregate_rows(values, dst, weights, num_rows):
    """Weighted scatter-add of rows: out[dst[e]] += weights[e] * values[e].

    Used for per-relation graph message aggregation; ``weights`` carries the
    1/degree normalization and is treated as constant.
    """
    values = as_tensor(values)
    dst = np.asarray(dst, dtype=np.intp)
    w = np.asarray(weights, dtype=values.data.dtype).reshape(-1, 1)
    out = np.zeros((num_rows, values.data.shape[1]), dtype=values.data.dtype)
    np.add.at(out, dst, values.data * w)

    def vjp(g):
        return (g[dst] * w,)

    return _make(out, (values,), vjp)


# -- softmax family ----------------------------------------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


# -- backward ----------------------------------------------------------------

def _topo_order(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Accumulate gradients of a scalar ``loss`` back to the leaves.

    Returns a name -> ndarray map for the reachable parameters of ``params``
    when given, otherwise None; leaf tensors also get their ``.grad`` set.
    """
    if not isinstance(loss, Tensor):
        raise NonScalarLoss("loss must be a Tensor")
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.data.shape}")
    if params is not None:
        for p in params._params.values():
            p.grad = None
    if not loss.requires_grad:
        return {} if params is not None else None

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g  # fresh per backward call
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    if params is None:
        return None
    out = {}
    for name, p in params.items():
        if p.grad is not None:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(name)
            out[name] = p.grad
            p.grad = None
    return out


# -- parameters and optimizer ------------------------------------------------

class ParamStore:
    """Named trainable tensors plus per-parameter optimizer state."""

    def __init__(self):
        self._params = {}
        self._state = {}
        self.step_count = 0

    def add(self, name, value, dtype=None):
        if name in self._params:
            raise DuplicateParameter(name)
        t = Tensor(np.array(value, copy=True), requires_grad=True,
                   dtype=dtype or PARAM_DTYPE)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def values_dict(self):
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_values(self, values):
        for name, arr in values.items():
            p = self._params[name]
            arr = np.asarray(arr, dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"{arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def zero_grads(self):
        for p in self._params.values():
            p.grad = None

    def checksum(self):
        import hashlib
        h = hashlib.sha256()
        for name, p in self._params.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def optimizer_step(store, grads, lr, weight_decay=0.0,
                   betas=(0.9, 0.999), eps=1e-8):
    """One AdamW step over the parameters named in ``grads``.

    Weight decay is decoupled: it subtracts lr*wd*param directly, independent
    of the gradient moments. Parameters absent from ``grads`` are untouched.
    """
    b1, b2 = betas
    for name, g in grads.items():
        g = np.asarray(g.data if isinstance(g, Tensor) else g)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
        p = store[name]
        g = g.astype(p.data.dtype, copy=False)  # params keep their dtype
        st = store._state.get(name)
        if st is None:
            st = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            store._state[name] = st
        st["t"] += 1
        t = st["t"]
        st["m"] = b1 * st["m"] + (1.0 - b1) * g
        st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
        m_hat = st["m"] / (1.0 - b1 ** t)
        v_hat = st["v"] / (1.0 - b2 ** t)
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps)
                                + weight_decay * p.data)
    store.step_count += 1
    return store


def grad_check(f, store, eps=1e-5, names=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the store to a scalar Tensor and must be evaluable repeatedly.
    Relative error per coordinate is |a - d| / max(|a|, |d|, 1e-12).
    """
    analytic = backward(f(store), store)
    worst = 0.0
    for name in (names if names is not None else store.names()):
        p = store[name]
        a = analytic.get(name)
        if a is None:
            a = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        a_flat = np.asarray(a, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(store).data)
            flat[i] = orig - eps
            lo = float(f(store).data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFinite(f"non-finite evaluation at {name}[{i}]")
            d = (hi - lo) / (2.0 * eps)
            err = abs(a_flat[i] - d) / max(abs(a_flat[i]), abs(d), 1e-12)
            worst = max(worst, err)
    if not np.isfinite(worst):
        raise NonFinite("non-finite gradient-check error")
    return worst


# -- initializers --------------------------------------------------------------

def xavier_uniform(shape, rng, gain=1.0):
    fan_in, fan_out = shape[-1], shape[-2] if len(shape) > 1 else shape[-1]
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, store):
    """Binary parameter dump; see load_checkpoint for the inverse.

    Layout: header (version uint32, entry count uint32), then per entry
    name length uint32 + UTF-8 name, dtype tag uint8, rank uint8,
    dims uint32 each, little-endian value payload.
    """
    params = store.items() if isinstance(store, ParamStore) else store.items()
    entries = [(name, p.data if isinstance(p, Tensor) else np.asarray(p))
               for name, p in params]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            tag = _F32_TAG if arr.dtype == np.float32 else _F64_TAG
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            dt = "<f4" if tag == _F32_TAG else "<f8"
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_checkpoint(path):
    """Read a checkpoint into an ordered name -> ndarray mapping."""
    out = {}
    with open(path, "rb") as fh:
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            tag, rank = struct.unpack("<BB", fh.read(2))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            dt = np.dtype("<f4") if tag == _F32_TAG else np.dtype("<f8")
            n = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(fh.read(n * dt.itemsize), dtype=dt).reshape(dims)
            out[name] = arr.astype(dt.base, copy=True)
    return out
