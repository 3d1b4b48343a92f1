"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Tensors form a dynamically recorded computation graph: every operation
returns a new Tensor holding references to its parents and a closure that
routes the output gradient back to them.  backward() replays the tape in
reverse insertion order, which is a valid topological order because a node
can only consume tensors created before it.

All values are float64.  Shapes are validated eagerly and failures name the
offending operation.
"""

from __future__ import annotations

import itertools
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TrainingDiverged(RuntimeError):
    """Raised when a gradient or update becomes non-finite."""


_SEQ = itertools.count()


class Tensor:
    """A node in the recorded computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_seq")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._seq = next(_SEQ)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(op={self._op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ValueError(f"backward: root must be scalar, got shape {self.data.shape}")
        nodes = _ancestors(self)
        for n in nodes:
            n.grad = None
        self.grad = np.ones_like(self.data)
        for n in sorted(nodes, key=lambda t: t._seq, reverse=True):
            if n._backward is not None and n.grad is not None:
                n._backward(n.grad)

    # convenience arithmetic (constants are wrapped automatically)
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _ancestors(root):
    seen = set()
    stack = [root]
    out = []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        out.append(node)
        stack.extend(node._parents)
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite values in input")


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor(data, a.requires_grad or b.requires_grad, (a, b), _op="add")

    def _bw(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = _bw
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor(data, a.requires_grad or b.requires_grad, (a, b), _op="mul")

    def _bw(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = _bw
    return out


def relu(x):
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), x.requires_grad, (x,), _op="relu")
    mask = x.data > 0.0

    def _bw(g):
        x._accumulate(g * mask)

    out._backward = _bw
    return out


def sigmoid(x):
    x = _as_tensor(x)
    d = x.data
    data = np.where(d >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(data, x.requires_grad, (x,), _op="sigmoid")

    def _bw(g):
        x._accumulate(g * data * (1.0 - data))

    out._backward = _bw
    return out


def tanh(x):
    x = _as_tensor(x)
    data = np.tanh(x.data)
    out = Tensor(data, x.requires_grad, (x,), _op="tanh")

    def _bw(g):
        x._accumulate(g * (1.0 - data * data))

    out._backward = _bw
    return out


def log(x):
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise ValueError("log: domain error, inputs must be positive")
    out = Tensor(np.log(x.data), x.requires_grad, (x,), _op="log")

    def _bw(g):
        x._accumulate(g / x.data)

    out._backward = _bw
    return out


def clip(x, lo, hi):
    """Clamp values to [lo, hi]; gradient passes only where unclipped."""
    x = _as_tensor(x)
    data = np.clip(x.data, lo, hi)
    out = Tensor(data, x.requires_grad, (x,), _op="clip")
    mask = (x.data >= lo) & (x.data <= hi)

    def _bw(g):
        x._accumulate(g * mask)

    out._backward = _bw
    return out


def softmax(x, axis):
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(data, x.requires_grad, (x,), _op="softmax")

    def _bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        x._accumulate(data * (g - dot))

    out._backward = _bw
    return out


def reshape(x, shape):
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape), x.requires_grad, (x,), _op="reshape")

    def _bw(g):
        x._accumulate(g.reshape(x.data.shape))

    out._backward = _bw
    return out


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(data, any(t.requires_grad for t in tensors), tuple(tensors), _op="concat")
    sizes = [t.data.shape[axis] for t in tensors]

    def _bw(g):
        start = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            t._accumulate(g[tuple(sl)])
            start += s

    out._backward = _bw
    return out


def narrow(x, axis, start, length):
    """Slice `length` entries from `start` along `axis`."""
    x = _as_tensor(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(x.data[sl], x.requires_grad, (x,), _op="narrow")

    def _bw(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        x._accumulate(full)

    out._backward = _bw
    return out


def sum_(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    out = Tensor(data, x.requires_grad, (x,), _op="sum")

    def _bw(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(ge, x.data.shape))

    out._backward = _bw
    return out


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.data.size
    else:
        count = x.data.shape[axis]
    out = Tensor(data, x.requires_grad, (x,), _op="mean")

    def _bw(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g / count, x.data.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(ge / count, x.data.shape))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# linear / convolutional ops


def affine(x, w, b=None):
    """x @ w.T + b with x (..., d_in), w (d_out, d_in), b (d_out,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.shape[-1] != w.data.shape[1]:
        raise ValueError(f"affine: input dim {x.data.shape[-1]} != weight dim {w.data.shape[1]}")
    data = x.data @ w.data.T
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (w.data.shape[0],):
            raise ValueError(f"affine: bias shape {b.data.shape} != ({w.data.shape[0]},)")
        data = data + b.data
        parents.append(b)
    out = Tensor(data, any(p.requires_grad for p in parents), tuple(parents), _op="affine")

    def _bw(g):
        x._accumulate(g @ w.data)
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.data.shape[-1])
        w._accumulate(gw)
        if b is not None:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    out._backward = _bw
    return out


def conv2d(x, w, b=None, padding=0):
    """2-D cross-correlation, stride 1.

    x (N, C, H, W), w (F, C, kh, kw), optional b (F,).  Zero padding of
    `padding` pixels on each spatial edge.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"conv2d: input channels {x.data.shape[1]} != kernel channels {w.data.shape[1]}")
    kh, kw = w.data.shape[2], w.data.shape[3]
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError(f"conv2d: kernel {(kh, kw)} larger than padded input {xp.shape[2:]}")
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N,C,Ho,Wo,kh,kw
    data = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,F
    data = np.ascontiguousarray(data.transpose(0, 3, 1, 2))
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (w.data.shape[0],):
            raise ValueError(f"conv2d: bias shape {b.data.shape} != ({w.data.shape[0]},)")
        data += b.data[None, :, None, None]
        parents.append(b)
    out = Tensor(data, any(p.requires_grad for p in parents), tuple(parents), _op="conv2d")

    def _bw(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))  # F,C,kh,kw
        w._accumulate(gw)
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))  # N,F,Hp,Wp,kh,kw
        wflip = w.data[:, :, ::-1, ::-1]
        gx = np.tensordot(gwin, wflip, axes=([1, 4, 5], [0, 2, 3]))  # N,Hp,Wp,C
        gx = gx.transpose(0, 3, 1, 2)
        if padding:
            gx = gx[:, :, padding:padding + x.data.shape[2], padding:padding + x.data.shape[3]]
        x._accumulate(gx)
        if b is not None:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    out._backward = _bw
    return out


def max_pool2(x):
    """2x2 max pooling, stride 2; spatial dims must be even."""
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2: spatial dims must be even, got {(h, w)}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    data = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    out = Tensor(data, x.requires_grad, (x,), _op="max_pool2")

    def _bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        x._accumulate(gx)

    out._backward = _bw
    return out


def global_max_pool(x):
    """(N, C, H, W) -> (N, C) max over the spatial extent."""
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = Tensor(data, x.requires_grad, (x,), _op="global_max_pool")

    def _bw(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        x._accumulate(gx.reshape(n, c, h, w))

    out._backward = _bw
    return out


def topk_mean(x, k):
    """Mean of the k largest entries over the last two axes."""
    x = _as_tensor(x)
    h, w = x.data.shape[-2], x.data.shape[-1]
    m = h * w
    if not 1 <= k <= m:
        raise ValueError(f"topk_mean: k={k} out of range for {h}x{w} map")
    flat = x.data.reshape(x.data.shape[:-2] + (m,))
    idx = np.argpartition(flat, m - k, axis=-1)[..., m - k:]
    vals = np.take_along_axis(flat, idx, axis=-1)
    data = vals.mean(axis=-1)
    out = Tensor(data, x.requires_grad, (x,), _op="topk_mean")

    def _bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx, np.broadcast_to((g / k)[..., None], idx.shape), axis=-1)
        x._accumulate(gf.reshape(x.data.shape))

    out._backward = _bw
    return out


def binary_cross_entropy(p, y):
    """Elementwise BCE of probabilities p against constant targets y.

    Probabilities are clamped to [1e-12, 1 - 1e-12] before the logs.
    """
    p = _as_tensor(p)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.data.shape:
        raise ValueError(f"binary_cross_entropy: target shape {y.shape} != prediction shape {p.data.shape}")
    pc = clip(p, 1e-12, 1.0 - 1e-12)
    return add(mul(Tensor(-y), log(pc)), mul(Tensor(y - 1.0), log(add(1.0, mul(pc, -1.0)))))


# ---------------------------------------------------------------------------
# graph wrapper, optimizer, checkpoints


def grad(loss, parameters):
    """Backward from scalar `loss`; return {name: gradient} for `parameters`.

    Parameters the loss does not depend on get zero gradients.
    """
    loss.backward()
    out = {}
    for name, p in parameters.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


class Graph:
    """Named parameters plus a forward builder.

    `forward_fn(params, inputs) -> dict[str, Tensor]` is recorded on every
    evaluation; node order is insertion order, which is topological.
    """

    def __init__(self, parameters, forward_fn):
        self.parameters = dict(parameters)
        self._forward_fn = forward_fn

    def evaluate(self, inputs):
        wrapped = {}
        for name, value in inputs.items():
            arr = np.asarray(value, dtype=np.float64)
            _check_finite(f"input {name!r}", arr)
            wrapped[name] = Tensor(arr)
        for name, p in self.parameters.items():
            _check_finite(f"parameter {name!r}", p.data)
        return self._forward_fn(self.parameters, wrapped)

    def backward(self, loss_node):
        return grad(loss_node, self.parameters)


class Adam:
    """Adam with bias correction; state is per-parameter moments plus a step count."""

    def __init__(self, parameters, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        if learning_rate <= 0.0:
            raise ValueError(f"Adam: learning rate must be positive, got {learning_rate}")
        self.parameters = parameters
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.first_moment = {k: np.zeros_like(p.data) for k, p in parameters.items()}
        self.second_moment = {k: np.zeros_like(p.data) for k, p in parameters.items()}

    def step(self, grads):
        for name in self.parameters:
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.parameters.items():
            g = grads[name]
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(update)):
                raise TrainingDiverged(f"non-finite update for parameter {name!r}")
            p.data -= update


CHECKPOINT_MAGIC = b"MILW"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, parameters):
    """Write named tensors: magic, version, count, then per tensor
    name length/name, rank, dims (u64 LE), raw float64 LE values.
    Tensors are sorted by name so equal parameters give equal bytes."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(parameters)))
        for name in sorted(parameters):
            arr = parameters[name]
            data = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64))
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", data.ndim))
            for d in data.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(data.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into {name: float64 ndarray}."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"checkpoint {path}: bad magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint {path}: unsupported version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            size = int(np.prod(dims)) if dims else 1
            raw = fh.read(8 * size)
            if len(raw) != 8 * size:
                raise ValueError(f"checkpoint {path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
        return out


def uniform_init(rng, shape, fan_in):
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
