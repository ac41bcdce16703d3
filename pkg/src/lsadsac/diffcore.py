"""Small reverse-mode autodiff over numpy arrays.

Everything is float64.  A :class:`Tensor` records the operation that made
it; :func:`backward` walks the record in reverse and returns a
:class:`GradientStore` keyed by parameter name.  Only the operations the
encoders and heads need are provided, with numpy broadcasting on the
elementwise ones.
"""

import hashlib
import json
import struct
from collections import OrderedDict

import numpy as np
from scipy.special import expit

from .errors import (
    BadMagicError,
    BadVersionError,
    ConfigurationError,
    InvalidInputError,
    NumericError,
    TruncatedError,
    UsageError,
)

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, None, parents, backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def relu(a):
    a = as_tensor(a)
    y = np.maximum(a.data, 0.0)
    return _node(y, (a,), lambda g: (g * (y > 0),))


def sigmoid(a):
    a = as_tensor(a)
    y = expit(a.data)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def minimum(a, b):
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _node(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


# ---------------------------------------------------------------- structural


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if b.data.ndim == 1:
            ga = np.multiply.outer(g, b.data)
            gb = np.tensordot(g, a.data, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
            return _unbroadcast(ga, a.shape), gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.data.ndim > 1 else np.multiply.outer(a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), back)


def linear(x, W, b=None):
    """``x @ W + b`` over the last axis of ``x`` with any number of leading axes."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ConfigurationError(f"linear: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    y = x.data @ W.data
    parents = (x, W)
    if b is not None:
        b = as_tensor(b)
        y = y + b.data
        parents = (x, W, b)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return _node(y, parents, back)


def _is_basic(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(x, (int, np.integer, slice)) or x is Ellipsis for x in parts)


def getitem(a, index):
    a = as_tensor(a)
    basic = _is_basic(index)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), back)


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    return _node(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / count)


def gather(a, index):
    """Pick ``a[i, index[i]]`` for every row ``i`` of a 2-D tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(a.shape[0])

    def back(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return _node(a.data[rows, index], (a,), back)


# ---------------------------------------------------------------- softmax family


def _softmax_array(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(v, axis=-1):
    """Max-subtracted softmax.  Returns a Tensor."""
    v = as_tensor(v)
    y = _softmax_array(v.data, axis)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (v,), back)


def log_softmax(v, axis=-1):
    v = as_tensor(v)
    z = v.data - v.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _node(y, (v,), back)


def softmax_cross_entropy(logits, k):
    """``-log softmax(logits)[k]`` for a single logit vector."""
    return neg(getitem(log_softmax(logits), k))


# ---------------------------------------------------------------- reverse pass


class GradientStore(OrderedDict):
    """Gradients keyed by parameter name, one array per touched entry."""


def _topological(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss):
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. every named leaf it touches."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise UsageError("backward needs a scalar loss tensor")
    grads = GradientStore()
    if not loss.requires_grad:
        return grads
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.name is not None:
                if node.name in grads:
                    grads[node.name] = grads[node.name] + g
                else:
                    grads[node.name] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}", name=name)
    return grads


# ---------------------------------------------------------------- parameters


class ParameterStore:
    """Named float64 arrays.  Shapes are fixed once an entry exists."""

    def __init__(self, entries=None):
        self._arrays = OrderedDict()
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._arrays:
            raise ConfigurationError(f"parameter {name!r} already exists")
        self._arrays[name] = np.array(value, dtype=DTYPE)

    def __getitem__(self, name):
        return self._arrays[name]

    def __setitem__(self, name, value):
        value = np.asarray(value, dtype=DTYPE)
        if name not in self._arrays:
            self.add(name, value)
            return
        if value.shape != self._arrays[name].shape:
            raise ConfigurationError(
                f"shape of {name!r} is fixed at {self._arrays[name].shape}, got {value.shape}"
            )
        self._arrays[name][...] = value

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def keys(self):
        return self._arrays.keys()

    def items(self):
        return self._arrays.items()

    def names(self, prefix=""):
        return [k for k in self._arrays if k.startswith(prefix)]

    def copy(self):
        out = ParameterStore()
        for k, v in self._arrays.items():
            out._arrays[k] = v.copy()
        return out

    def view(self, prefix="", grad=False):
        return ParamView(self, prefix, grad)

    def n_values(self):
        return int(np.sum([v.size for v in self._arrays.values()]))


class ParamView:
    """Prefix-scoped access to a store, handing out leaf tensors.

    With ``grad=True`` each entry becomes a named leaf so :func:`backward`
    reports its gradient; otherwise entries are constants.
    """

    def __init__(self, store, prefix="", grad=False):
        self.store = store
        self.prefix = prefix
        self.grad = grad
        self._cache = {}

    def __getitem__(self, name):
        t = self._cache.get(name)
        if t is None:
            full = self.prefix + name
            if full not in self.store:
                raise ConfigurationError(f"missing parameter {full!r}")
            t = Tensor(self.store[full], requires_grad=self.grad, name=full)
            self._cache[name] = t
        return t

    def __contains__(self, name):
        return (self.prefix + name) in self.store

    def sub(self, prefix):
        return ParamView(self.store, self.prefix + prefix, self.grad)


def _as_view(params):
    return params.view() if isinstance(params, ParameterStore) else params


def init_linear(store, name, fan_in, fan_out, rng, bias=True):
    bound = 1.0 / np.sqrt(fan_in)
    store.add(f"{name}.W", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    if bias:
        store.add(f"{name}.b", rng.uniform(-bound, bound, size=(fan_out,)))


# ---------------------------------------------------------------- networks

_ACTIVATIONS = {None: lambda t: t, "relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def init_mlp(store, prefix, layer_spec, rng):
    for i, (fan_in, fan_out, _) in enumerate(layer_spec):
        init_linear(store, f"{prefix}l{i}", fan_in, fan_out, rng)


def mlp_forward(params, layer_spec, x, prefix=""):
    """Chain of affine layers ``(in, out, activation)`` named ``{prefix}l{i}.W/.b``."""
    p = _as_view(params)
    h = as_tensor(x)
    for i, (fan_in, fan_out, act) in enumerate(layer_spec):
        if h.shape[-1] != fan_in:
            raise ConfigurationError(
                f"layer {prefix}l{i}: expected input width {fan_in}, got {h.shape[-1]}"
            )
        W = p[f"{prefix}l{i}.W"]
        if W.shape != (fan_in, fan_out):
            raise ConfigurationError(f"layer {prefix}l{i}: weight shape {W.shape} != {(fan_in, fan_out)}")
        h = linear(h, W, p[f"{prefix}l{i}.b"])
        if act not in _ACTIVATIONS:
            raise ConfigurationError(f"layer {prefix}l{i}: unknown activation {act!r}")
        h = _ACTIVATIONS[act](h)
    return h


def init_lstm(store, prefix, input_size, hidden_size, rng):
    bound = 1.0 / np.sqrt(hidden_size)
    store.add(f"{prefix}Wx", rng.uniform(-bound, bound, size=(input_size, 4 * hidden_size)))
    store.add(f"{prefix}Wh", rng.uniform(-bound, bound, size=(hidden_size, 4 * hidden_size)))
    store.add(f"{prefix}b", rng.uniform(-bound, bound, size=(4 * hidden_size,)))


def lstm_forward(params, sequence, prefix=""):
    """Run an LSTM over ``sequence`` and return the final hidden state.

    ``sequence`` is a list of vectors or a tensor shaped ``(T, in)`` or
    ``(B, T, in)``.  Gate layout inside the fused weights is
    input, forget, candidate, output.  ``h0 = c0 = 0``.
    """
    p = _as_view(params)
    if isinstance(sequence, (list, tuple)):
        if len(sequence) == 0:
            raise InvalidInputError("lstm_forward needs a non-empty sequence")
        seq = stack([as_tensor(s) for s in sequence], axis=0)
    else:
        seq = as_tensor(sequence)
    time_axis = seq.data.ndim - 2
    if seq.data.ndim < 2 or seq.shape[time_axis] == 0:
        raise InvalidInputError("lstm_forward needs a non-empty sequence")
    Wx, Wh, b = p[f"{prefix}Wx"], p[f"{prefix}Wh"], p[f"{prefix}b"]
    if seq.shape[-1] != Wx.shape[0]:
        raise ConfigurationError(f"lstm {prefix}: input width {seq.shape[-1]} != {Wx.shape[0]}")
    H = Wh.shape[0]
    xz = linear(seq, Wx, b)
    lead = seq.shape[:time_axis]
    h = Tensor(np.zeros(lead + (H,)))
    c = Tensor(np.zeros(lead + (H,)))
    for t in range(seq.shape[time_axis]):
        z = xz[..., t, :] + linear(h, Wh) if t else xz[..., t, :]
        i = sigmoid(z[..., :H])
        f = sigmoid(z[..., H : 2 * H])
        g = tanh(z[..., 2 * H : 3 * H])
        o = sigmoid(z[..., 3 * H :])
        c = f * c + i * g if t else i * g
        h = o * tanh(c)
    return h


# ---------------------------------------------------------------- optimizer


class OptimizerState:
    def __init__(self, params, names, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {n: np.zeros_like(params[n]) for n in names}
        self.v = {n: np.zeros_like(params[n]) for n in names}


def adam_step(params, grads, opt):
    """Bias-corrected Adam update applied in place; returns ``(params, opt)``."""
    for name in grads:
        if name not in opt.m:
            raise ConfigurationError(f"no optimizer state for parameter {name!r}")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}", name=name)
        m, v = opt.m[name], opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += opt.eps
        params[name] -= (opt.lr / c1) * m / denom
    return params, opt


# ---------------------------------------------------------------- checkpoint format

MAGIC = b"LSAD"
FORMAT_VERSION = 1


def serialize_params(params, metadata=None):
    """Binary layout (all little-endian)::

        MAGIC(4) version:u32 meta_len:u32 meta(json utf-8) count:u32
        per entry: name_len:u16 name ndim:u8 dims:u32*ndim values:f64*prod(dims)
    """
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta)), meta, struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"truncated checkpoint at byte {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize_params(buf, with_metadata=False):
    buf = bytes(buf)
    if buf[:4] != MAGIC:
        raise BadMagicError("bad magic")
    r = _Reader(buf)
    r.take(4)
    version, meta_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise BadVersionError(f"unsupported checkpoint version {version}")
    metadata = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<I")
    store = ParameterStore()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(r.take(8 * n), dtype="<f8").astype(DTYPE)
        store.add(name, values.reshape(shape))
    if r.pos != len(buf):
        raise TruncatedError("trailing bytes after last entry")
    return (store, metadata) if with_metadata else store


def params_digest(params):
    h = hashlib.sha256()
    for name, arr in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- finite differences


def finite_difference_check(loss_fn, params, grads, rng, n_coords=64, step=1e-5, names=None):
    """Central-difference check of ``grads`` on random coordinates.

    ``loss_fn(params)`` must return a float computed from the current
    values in ``params``; entries are perturbed in place and restored.
    Returns a list of ``(name, flat_index, analytic, numeric, rel_err)``.
    The relative error floors the denominator at 1e-6 so exactly-zero
    gradients compare by absolute difference.
    """
    names = list(names if names is not None else params.keys())
    sizes = np.array([params[n].size for n in names], dtype=float)
    picks = rng.choice(len(names), size=n_coords, p=sizes / sizes.sum())
    rows = []
    for k in picks:
        name = names[k]
        flat = params[name].reshape(-1)
        idx = int(rng.integers(flat.size))
        orig = flat[idx]
        flat[idx] = orig + step
        up = loss_fn(params)
        flat[idx] = orig - step
        down = loss_fn(params)
        flat[idx] = orig
        numeric = (up - down) / (2.0 * step)
        g = grads.get(name)
        analytic = 0.0 if g is None else float(g.reshape(-1)[idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        rows.append((name, idx, analytic, numeric, rel))
    return rows
