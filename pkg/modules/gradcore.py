"""
Minimal reverse-mode automatic differentiation over numpy arrays.

Tensors hold f64 data and record the operation that produced them; calling
``backward()`` on a scalar walks the recorded graph in reverse topological order
and accumulates gradients into the leaves (tensors created with
``requires_grad=True``). The graph is rebuilt on every forward pass.

Besides the arithmetic primitives, this module provides the layer kernels the
CVNN needs (conv1d, dense, relu, maxpool1d, batchnorm1d, softmax), an Adam
optimizer, a central-difference gradient checker and the MATCK1 checkpoint
format.
"""

import contextlib
import json
import logging
import struct
import threading
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

import config

logger = logging.getLogger(__name__)

ArrayLike = Union['Tensor', np.ndarray, float, int]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteGradientError(FloatingPointError):
    """A parameter received a NaN or infinite gradient."""

    def __init__(self, name, message=None):
        self.name = name
        super().__init__(message or f"non-finite gradient for parameter '{name}'")


class CheckpointError(ValueError):
    """Base class for checkpoint file problems."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


_state = threading.local()


def is_grad_enabled():
    return getattr(_state, 'grad_enabled', True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """n-dimensional f64 array participating in a reverse-mode graph."""

    __slots__ = ('data', 'grad', 'requires_grad', 'name', '_parents', '_backward')
    # ndarray (op) Tensor falls back to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    def __repr__(self):
        label = f" name='{self.name}'" if self.name else ''
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        """Same data, no graph history."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` of every reachable leaf with d(self)/d(leaf).

        Gradients accumulate across calls until ``zero_grad`` is called.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data, parents, backward):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    return _result(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def clip_min(a, floor):
    """max(a, floor); gradient flows only where a > floor."""
    a = as_tensor(a)
    mask = a.data > floor
    return _result(np.maximum(a.data, floor), (a,), lambda g: (g * mask,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis=axes, keepdims=keepdims) / float(count)


def reshape(a, shape):
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def take(a, index):
    """a[index] for basic slices or integer-array indices; gradient scatters back."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def gather1d(a, index):
    """out[b, c, j] = a[b, c, index[b, c, j]] for a 3-D tensor."""
    a = as_tensor(a)
    if a.ndim != 3 or index.ndim != 3 or index.shape[:2] != a.shape[:2]:
        raise ShapeError(f"gather1d expects matching [B, C, *] shapes, got {a.shape} and {index.shape}")
    rows = np.arange(a.shape[0])[:, None, None]
    cols = np.arange(a.shape[1])[None, :, None]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols, index), g)
        return (full,)

    return _result(a.data[rows, cols, index], (a,), backward)


# ---------------------------------------------------------------------------
# layer kernels
# ---------------------------------------------------------------------------

def conv1d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of x[B, C_in, L] with kernel[C_out, C_in, k]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv1d expects 3-D input and kernel, got {x.shape} and {kernel.shape}")
    batch, c_in, length = x.shape
    c_out, k_in, width = kernel.shape
    if k_in != c_in:
        raise ShapeError(f"kernel expects {k_in} input channels, input has {c_in}")
    padded_len = length + 2 * padding
    if width > padded_len:
        raise ShapeError(f"kernel width {width} exceeds padded length {padded_len}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    out_len = (padded_len - width) // stride + 1
    windows = sliding_window_view(xp, width, axis=2)[:, :, ::stride, :]
    out = np.tensordot(windows, kernel.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)

    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
        out = out + bias.data[None, :, None]
        parents.append(bias)

    def backward(g):
        g_kernel = np.tensordot(g, windows, axes=([0, 2], [0, 2]))
        cols = np.tensordot(g, kernel.data, axes=([1], [0]))  # [B, L_out, C_in, k]
        g_padded = np.zeros_like(xp)
        span = stride * (out_len - 1) + 1
        for offset in range(width):
            g_padded[:, :, offset:offset + span:stride] += cols[:, :, :, offset].transpose(0, 2, 1)
        grads = [g_padded[:, :, padding:padding + length], g_kernel]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return _result(np.ascontiguousarray(out), tuple(parents), backward)


def dense(x, weight, bias=None):
    """x[B, D_in] @ weight[D_out, D_in].T + bias[D_out]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"dense: bias {bias.shape} incompatible with weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _result(out, tuple(parents), backward)


def maxpool1d(x, window=2):
    """Per-window maximum over the last axis, ties to the earliest index.

    Lengths not divisible by ``window`` are padded on the right with -inf.
    """
    x = as_tensor(x)
    return gather1d(x, pool_indices(x.data, window))


def pool_indices(key, window=2):
    """Index of the maximal ``key`` entry inside each window of the last axis."""
    batch, channels, length = key.shape
    remainder = length % window
    if remainder:
        pad = np.full((batch, channels, window - remainder), -np.inf)
        key = np.concatenate([key, pad], axis=2)
    out_len = key.shape[2] // window
    local = np.argmax(key.reshape(batch, channels, out_len, window), axis=3)
    return local + np.arange(out_len)[None, None, :] * window


@dataclass
class RunningStats:
    """Batch-norm running mean/variance for one set of channels."""
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels):
        return cls(np.zeros(channels), np.ones(channels))


def batchnorm1d(x, gamma, beta, running, training, update_running=True,
                momentum=config.BATCHNORM_MOMENTUM, eps=config.BATCHNORM_EPS):
    """Per-channel standardization of x[B, C] or x[B, C, L] with affine (gamma, beta)."""
    x = as_tensor(x)
    if x.ndim not in (2, 3):
        raise ShapeError(f"batchnorm1d expects [B, C] or [B, C, L], got {x.shape}")
    channels = x.shape[1]
    axes = (0,) if x.ndim == 2 else (0, 2)
    view = (1, channels) if x.ndim == 2 else (1, channels, 1)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batchnorm1d in training mode needs a batch of at least 2 samples")
        mu = tmean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = tmean(centered * centered, axis=axes, keepdims=True)
        x_hat = centered / sqrt(var + eps)
        if update_running:
            count = x.size // channels
            unbiased = var.data.reshape(channels) * count / max(count - 1, 1)
            running.mean = (1.0 - momentum) * running.mean + momentum * mu.data.reshape(channels)
            running.var = (1.0 - momentum) * running.var + momentum * unbiased
    else:
        x_hat = (x - running.mean.reshape(view)) / np.sqrt(running.var.reshape(view) + eps)
    return x_hat * reshape(as_tensor(gamma), view) + reshape(as_tensor(beta), view)


def softmax_array(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x, axis=-1):
    x = as_tensor(x)
    out = softmax_array(x.data, axis)
    return _result(out, (x,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    out = log_softmax_array(x.data, axis)
    probs = np.exp(out)
    return _result(out, (x,),
                   lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def log1p_sum_exp(x, mask, axis=0):
    """log(1 + sum over masked entries of exp(x)), evaluated stably along ``axis``."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    masked = np.where(mask, x.data, -np.inf)
    top = np.maximum(masked.max(axis=axis, keepdims=True), 0.0)
    total = np.exp(-top) + np.exp(masked - top).sum(axis=axis, keepdims=True)
    value = top + np.log(total)
    weights = np.where(mask, np.exp(masked - value), 0.0)

    def backward(g):
        return (np.expand_dims(g, axis) * weights,)

    return _result(np.squeeze(value, axis=axis), (x,), backward)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moments for one parameter group."""
    lr: float
    beta1: float = config.ADAM_BETAS[0]
    beta2: float = config.ADAM_BETAS[1]
    eps: float = config.ADAM_EPS
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)

    def to_arrays(self, prefix):
        arrays = {}
        for name in self.m:
            arrays[f"{prefix}/m/{name}"] = self.m[name]
            arrays[f"{prefix}/v/{name}"] = self.v[name]
        meta = {'lr': self.lr, 'beta1': self.beta1, 'beta2': self.beta2, 'eps': self.eps,
                't': self.t, 'steps': dict(self.steps)}
        return arrays, meta

    @classmethod
    def from_arrays(cls, prefix, arrays, meta):
        state = cls(lr=meta['lr'], beta1=meta['beta1'], beta2=meta['beta2'],
                    eps=meta['eps'], t=meta['t'])
        state.steps = {k: int(v) for k, v in meta['steps'].items()}
        for name in state.steps:
            state.m[name] = np.array(arrays[f"{prefix}/m/{name}"])
            state.v[name] = np.array(arrays[f"{prefix}/v/{name}"])
        return state


def adam_step(params, state, grads=None):
    """One Adam update (with bias correction) of ``params`` in place.

    ``grads`` defaults to each parameter's ``.grad``. Parameters without a
    gradient this step are left untouched. Non-finite gradients raise before
    any parameter is modified.
    """
    grads = {name: p.grad for name, p in params.items()} if grads is None else grads
    active = {name: g for name, g in grads.items() if g is not None}
    for name, g in active.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter '{name}' {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.t += 1
    for name, g in active.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.steps[name] = 0
        state.steps[name] += 1
        step = state.steps[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / (1.0 - state.beta1 ** step)
        v_hat = state.v[name] / (1.0 - state.beta2 ** step)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def zero_grad(params):
    for p in params.values():
        p.grad = None


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_coordinate: Optional[Tuple[str, Tuple[int, ...]]]
    checked: int

    def passed(self, tol):
        return self.max_rel_err < tol


def gradient_check(f, params, h=1e-5, tol=1e-4, atol=0.0):
    """Compare backward() gradients of scalar ``f()`` with central differences.

    ``params`` maps names to leaf tensors. rel err = |a - n| / max(|a|, |n|, 1e-12);
    coordinates where both |a| and |n| are below ``atol`` count as exact.
    """
    zero_grad(params)
    out = f()
    out.backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
                for name, p in params.items()}
    zero_grad(params)

    worst, worst_at, checked = 0.0, None, 0
    with no_grad():
        for name, p in params.items():
            for index in np.ndindex(p.shape):
                original = p.data[index]
                p.data[index] = original + h
                f_plus = f().item()
                p.data[index] = original - h
                f_minus = f().item()
                p.data[index] = original
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = analytic[name][index]
                checked += 1
                if abs(a) < atol and abs(numeric) < atol:
                    continue
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
                if err > worst:
                    worst, worst_at = err, (name, index)
    report = GradCheckReport(max_rel_err=worst, worst_coordinate=worst_at, checked=checked)
    if not report.passed(tol):
        logger.debug(f"gradient check above tolerance {tol}: {report}")
    return report


# ---------------------------------------------------------------------------
# checkpoint format (MATCK1)
# ---------------------------------------------------------------------------

# header: magic, version, payload length, CRC32 of the preceding 16 bytes
_CK_HEADER = struct.Struct('<6sHQI')
_CK_HEADER_CRC_SPAN = 16


def save_checkpoint(path, arrays, metadata=None):
    """Write named f64 arrays plus a JSON metadata block, CRC32-terminated."""
    meta_bytes = json.dumps(metadata or {}, sort_keys=True).encode('utf-8')
    chunks = [struct.pack('<I', len(meta_bytes)), meta_bytes, struct.pack('<I', len(arrays))]
    for name, value in arrays.items():
        data = np.ascontiguousarray(value, dtype='<f8')
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<HB', len(encoded), data.ndim))
        chunks.append(encoded)
        chunks.append(struct.pack(f'<{data.ndim}I', *data.shape))
        chunks.append(data.tobytes())
    payload = b''.join(chunks)
    prefix = struct.pack('<6sHQ', config.CHECKPOINT_MAGIC, config.CHECKPOINT_VERSION, len(payload))
    body = prefix + struct.pack('<I', zlib.crc32(prefix) & 0xFFFFFFFF) + payload
    with open(path, 'wb') as fh:
        fh.write(body)
        fh.write(struct.pack('<I', zlib.crc32(body) & 0xFFFFFFFF))
    logger.debug(f"checkpoint written: {path} ({len(arrays)} arrays)")


def load_checkpoint(path):
    """Read a MATCK1 file. Returns (arrays, metadata).

    Integrity is settled before any field of the payload is parsed: a file
    shorter than its header announces is truncated, any flipped byte is a
    checksum error.
    """
    with open(path, 'rb') as fh:
        blob = fh.read()
    if len(blob) < 6 or blob[:6] != config.CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a MATCK1 checkpoint")
    if len(blob) < 8:
        raise CheckpointTruncatedError(f"{path}: header cut short")
    (version,) = struct.unpack_from('<H', blob, 6)
    if version != config.CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {config.CHECKPOINT_VERSION}")
    if len(blob) < _CK_HEADER.size:
        raise CheckpointTruncatedError(f"{path}: header cut short")
    _, _, payload_len, header_crc = _CK_HEADER.unpack_from(blob, 0)
    if zlib.crc32(blob[:_CK_HEADER_CRC_SPAN]) & 0xFFFFFFFF != header_crc:
        raise CheckpointChecksumError(f"{path}: header CRC32 mismatch")
    expected = _CK_HEADER.size + payload_len + 4
    if len(blob) < expected:
        raise CheckpointTruncatedError(f"{path}: header announces {expected} bytes, file has {len(blob)}")
    if len(blob) > expected:
        raise CheckpointFormatError(f"{path}: {len(blob) - expected} unexpected trailing bytes")
    body = blob[:-4]
    (stored_crc,) = struct.unpack('<I', blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CheckpointChecksumError(f"{path}: CRC32 mismatch")

    try:
        return _parse_checkpoint_payload(body[_CK_HEADER.size:], path)
    except CheckpointError:
        raise
    except (struct.error, ValueError) as e:
        raise CheckpointFormatError(f"{path}: malformed payload ({e})") from e


def _parse_checkpoint_payload(payload, path):
    # a checksum-valid payload that runs out of bytes was written wrong, not cut short
    reader = _Reader(payload, path, CheckpointFormatError)
    (meta_len,) = reader.unpack('<I')
    metadata = json.loads(reader.take(meta_len).decode('utf-8'))
    (count,) = reader.unpack('<I')
    arrays = {}
    for _ in range(count):
        name_len, ndim = reader.unpack('<HB')
        name = reader.take(name_len).decode('utf-8')
        shape = reader.unpack(f'<{ndim}I') if ndim else ()
        n_values = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(reader.take(8 * n_values), dtype='<f8').astype(np.float64)
        arrays[name] = data.reshape(shape)
    if reader.offset != len(payload):
        raise CheckpointFormatError(f"{path}: {len(payload) - reader.offset} trailing bytes")
    return arrays, metadata


class _Reader:
    """Bounds-checked cursor over a byte payload."""

    def __init__(self, payload, path, truncated_error):
        self.payload = payload
        self.path = path
        self.truncated_error = truncated_error
        self.offset = 0

    def take(self, count):
        end = self.offset + count
        if end > len(self.payload):
            raise self.truncated_error(f"{self.path}: payload ends at byte {len(self.payload)}, needed {end}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
