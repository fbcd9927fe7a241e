# tensor_core.py
"""
Dense tensors, a recording gradient tape, and the Adam update.

Every primitive takes and returns immutable ``Tensor`` values. When a
``GradTape`` is active and one of the inputs requires a gradient, the
primitive appends a record holding its inputs and a closure that maps the
output gradient to input gradients. ``backward`` replays the records in
exact reverse order, so gradient accumulation order (and therefore the
bits of every gradient) is fixed by execution order.
"""
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, DimensionError, NumericalError, TapeError

_DTYPES = {'float64': np.float64, 'float32': np.float32}
_default_dtype = np.float64

# Raise on NaN/Inf as soon as a primitive produces one.
CHECK_FINITE = True

GELU_COEFF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def set_default_dtype(name):
    """Select the floating-point width used for new tensors ('float64' or 'float32')."""
    global _default_dtype
    if name not in _DTYPES:
        raise ConfigError(f"precision must be one of {sorted(_DTYPES)}, got '{name}'")
    _default_dtype = _DTYPES[name]


def get_default_dtype():
    return _default_dtype


class Tensor:
    """Immutable dense array plus a flag saying whether gradients flow into it."""

    __slots__ = ('_data', 'requires_grad', 'name')

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        array = np.array(data, dtype=dtype or _default_dtype)
        array.setflags(write=False)
        self._data = array
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, array, requires_grad=False):
        out = cls.__new__(cls)
        array = np.asarray(array)
        if array.flags.writeable:
            array.setflags(write=False)
        out._data = array
        out.requires_grad = requires_grad
        out.name = None
        return out

    @property
    def data(self):
        return self._data

    @property
    def shape(self):
        return self._data.shape

    @property
    def ndim(self):
        return self._data.ndim

    @property
    def size(self):
        return self._data.size

    def numpy(self):
        return self._data.copy()

    def item(self):
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else float('nan')

    def __repr__(self):
        label = f" name='{self.name}'" if self.name else ''
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name=None):
    """Create a trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data):
    return data if isinstance(data, Tensor) else Tensor(data)


# ---------- TAPE --------------------------------------------------------------


class TapeRecord(NamedTuple):
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable
    op: str


_local = threading.local()


def _tape_stack():
    if not hasattr(_local, 'stack'):
        _local.stack = []
    return _local.stack


class GradTape:
    """Ordered record of executed primitives, confined to one thread.

    Usage::

        with GradTape() as tape:
            loss = ce_loss(...)
        grads = backward(tape, loss)
    """

    def __init__(self):
        self.records: List[TapeRecord] = []
        self._outputs = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, output, inputs, backward_fn, op):
        self.records.append(TapeRecord(output, tuple(inputs), backward_fn, op))
        self._outputs.add(id(output))

    def produced(self, tensor):
        return id(tensor) in self._outputs


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradientMap:
    """Gradients keyed by tensor identity; untouched tensors read as exact zeros."""

    def __init__(self, grads, tensors):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, tensor):
        grad = self._grads.get(id(tensor))
        if grad is None or self._tensors.get(id(tensor)) is not tensor:
            return np.zeros(tensor.shape, dtype=tensor.data.dtype)
        return grad

    def __contains__(self, tensor):
        return self._tensors.get(id(tensor)) is tensor

    def for_params(self, params):
        """Gradient arrays for a name -> Tensor mapping, in the mapping's order."""
        return {name: self[tensor] for name, tensor in params.items()}


def backward(tape, loss):
    """Reverse-mode sweep over ``tape`` starting from the scalar ``loss``."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise TapeError("backward needs a scalar loss tensor")
    if not tape.produced(loss):
        raise TapeError("loss was not produced on this tape; run the forward pass inside the tape context")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    tensors: Dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        out_grad = grads.pop(id(rec.output), None)
        tensors.pop(id(rec.output), None)
        if out_grad is None:
            continue
        for tensor, grad in zip(rec.inputs, rec.backward(out_grad)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
                tensors[key] = tensor
    return GradientMap(grads, tensors)


# ---------- PRIMITIVE PLUMBING --------------------------------------------------


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.array(value, dtype=_default_dtype))


def _emit(array, inputs, backward_fn, op):
    if CHECK_FINITE and array.dtype.kind == 'f' and not np.all(np.isfinite(array)):
        raise NumericalError(f"{op} produced a non-finite value")
    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(array, requires_grad=tracked)
    if tracked:
        tape.record(out, inputs, backward_fn, op)
    return out


def _broadcast_shape(a_shape, b_shape, op):
    """Equal shapes, scalars, or one operand broadcast over the other's leading axes."""
    if a_shape == b_shape:
        return a_shape
    try:
        out = np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a_shape} and {b_shape}") from None
    if out != a_shape and out != b_shape:
        raise DimensionError(f"{op}: unsupported broadcast pattern {a_shape} with {b_shape}")
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------- ELEMENTWISE --------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, 'add')

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), _backward, 'add')


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, 'sub')

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), _backward, 'sub')


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, 'mul')

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), _backward, 'mul')


def scale(x, factor):
    x = _as_tensor(x)
    factor = float(factor)

    def _backward(g):
        return (g * factor,)

    return _emit(x.data * factor, (x,), _backward, 'scale')


def elu(x):
    """elu with alpha = 1."""
    x = _as_tensor(x)
    negative_part = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(x.data > 0, x.data, negative_part)

    def _backward(g):
        return (g * np.where(x.data > 0, 1.0, negative_part + 1.0),)

    return _emit(out, (x,), _backward, 'elu')


def relu(x):
    x = _as_tensor(x)
    positive = x.data > 0

    def _backward(g):
        return (g * positive,)

    return _emit(np.where(positive, x.data, 0.0), (x,), _backward, 'relu')


def sigmoid(x):
    x = _as_tensor(x)
    # exp(-|x|) never overflows and keeps far-negative logits strictly positive
    decay = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + decay), decay / (1.0 + decay))

    def _backward(g):
        return (g * out * (1.0 - out),)

    return _emit(out, (x,), _backward, 'sigmoid')


def gelu(x):
    """GeLU, tanh approximation."""
    x = _as_tensor(x)
    inner = _SQRT_2_OVER_PI * (x.data + GELU_COEFF * x.data ** 3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def _backward(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * d_inner),)

    return _emit(out, (x,), _backward, 'gelu')


_ELEMENTWISE = {
    'add': add,
    'mul': mul,
    'scale': scale,
    'elu': elu,
    'relu': relu,
    'gelu': gelu,
    'sigmoid': sigmoid,
}


def elementwise(kind, *inputs):
    """Dispatch one of the named pointwise primitives."""
    if kind not in _ELEMENTWISE:
        raise ConfigError(f"unknown elementwise kind '{kind}'")
    return _ELEMENTWISE[kind](*inputs)


# ---------- STRUCTURAL --------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes; ``b`` may be 2-D and shared by every batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ for shapes {a.shape} and {b.shape}")

    def _backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return grad_a, _unbroadcast(grad_b, b.shape)

    return _emit(np.matmul(a.data, b.data), (a, b), _backward, 'matmul')


def swapaxes(x, axis1=-1, axis2=-2):
    x = _as_tensor(x)

    def _backward(g):
        return (np.swapaxes(g, axis1, axis2),)

    return _emit(np.ascontiguousarray(np.swapaxes(x.data, axis1, axis2)), (x,), _backward, 'swapaxes')


def reshape(x, shape):
    x = _as_tensor(x)

    def _backward(g):
        return (g.reshape(x.shape),)

    return _emit(x.data.reshape(shape), (x,), _backward, 'reshape')


def _is_basic_index(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (slice, int, np.integer)) for p in parts)


def index(x, key):
    """``x[key]`` for slices, integers and integer arrays (no Ellipsis)."""
    x = _as_tensor(x)
    basic = _is_basic_index(key)

    def _backward(g):
        grad = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            grad[key] += g
        else:
            np.add.at(grad, key, g)
        return (grad,)

    return _emit(np.array(x.data[key]), (x,), _backward, 'index')


def take_channels(x, channels):
    """Select feature channels (last axis) by unique integer indices."""
    x = _as_tensor(x)
    channels = np.asarray(channels, dtype=np.int64)

    def _backward(g):
        grad = np.zeros(x.shape, dtype=g.dtype)
        grad[..., channels] = g
        return (grad,)

    return _emit(np.take(x.data, channels, axis=-1), (x,), _backward, 'take_channels')


def embedding_lookup(table, ids):
    """Rows of a 2-D table gathered by an integer id array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(
            f"embedding_lookup: ids must lie in [0, {table.shape[0] - 1}], got range "
            f"[{ids.min()}, {ids.max()}]"
        )

    def _backward(g):
        grad = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(grad, ids, g)
        return (grad,)

    return _emit(table.data[ids], (table,), _backward, 'embedding_lookup')


def tensor_sum(x, axis=None, keepdims=False):
    x = _as_tensor(x)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), _backward, 'sum')


def tensor_mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return scale(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------- NORMALISATION & PROBABILITY ------------------------------------------


def l2_normalize(x, axis='row', dim_scale=1.0):
    """Scale each row (last axis) or column (second-to-last axis) to L2 norm 1/sqrt(dim_scale).

    All-zero slices stay all-zero.
    """
    if axis not in ('row', 'col'):
        raise ConfigError(f"l2_normalize axis must be 'row' or 'col', got '{axis}'")
    if dim_scale <= 0:
        raise ConfigError(f"l2_normalize dim_scale must be positive, got {dim_scale}")
    x = _as_tensor(x)
    reduce_axis = -1 if axis == 'row' else -2
    norms = np.sqrt(np.sum(x.data * x.data, axis=reduce_axis, keepdims=True))
    live = norms > 0
    safe = np.where(live, norms, 1.0)
    c = math.sqrt(dim_scale)
    out = np.where(live, x.data / (c * safe), 0.0)

    def _backward(g):
        dot = np.sum(x.data * g, axis=reduce_axis, keepdims=True)
        grad = (g / safe - x.data * dot / safe ** 3) / c
        return (np.where(live, grad, 0.0),)

    return _emit(out, (x,), _backward, 'l2_normalize')


def layer_norm(x, gain, bias, eps=1e-12, mask=None):
    """Normalise the last axis, then apply gain and bias.

    With a 0/1 ``mask`` the statistics use the live channels only and masked
    channels are emitted as exact zeros.
    """
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match width {width}")
    m = np.ones(width, dtype=x.data.dtype) if mask is None else np.asarray(mask, dtype=x.data.dtype)
    count = float(m.sum())
    mean = np.sum(x.data * m, axis=-1, keepdims=True) / count
    centered = (x.data - mean) * m
    var = np.sum(centered * centered, axis=-1, keepdims=True) / count
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = (gain.data * xhat + bias.data) * m

    def _backward(g):
        g = g * m
        d_xhat = g * gain.data
        sum_d = np.sum(d_xhat, axis=-1, keepdims=True)
        sum_dx = np.sum(d_xhat * xhat, axis=-1, keepdims=True)
        grad_x = (inv / count) * (count * d_xhat - sum_d - xhat * sum_dx) * m
        grad_gain = _unbroadcast(g * xhat, gain.shape)
        grad_bias = _unbroadcast(g, bias.shape)
        return grad_x, grad_gain, grad_bias

    return _emit(out, (x, gain, bias), _backward, 'layer_norm')


def dropout(x, rate, mode, rng=None):
    """Inverted dropout. ``mode`` is 'train' or 'eval'; eval and rate 0 are identities."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ('train', 'eval'):
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got '{mode}'")
    x = _as_tensor(x)
    if mode == 'eval' or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def _backward(g):
        return (g * keep,)

    return _emit(x.data * keep, (x,), _backward, 'dropout')


def softmax_rows(x):
    """Softmax over the last axis, stabilised by max subtraction."""
    x = _as_tensor(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    exps = np.exp(shifted)
    out = exps / np.sum(exps, axis=-1, keepdims=True)

    def _backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _emit(out, (x,), _backward, 'softmax')


def log_softmax_rows(x):
    x = _as_tensor(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - log_norm

    def _backward(g):
        return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)

    return _emit(out, (x,), _backward, 'log_softmax')


# ---------- ADAM ----------------------------------------------------------------


@dataclass
class AdamState:
    """Adam accumulators for one parameter group."""
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state, params, grads):
    """Return new parameter tensors after one bias-corrected Adam update.

    ``params`` maps names to tensors; ``grads`` maps the same names to arrays.
    Names missing from ``grads`` are treated as having a zero gradient. Every
    shape is checked before ``state`` changes.
    """
    pending = []
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros(param.shape, dtype=param.data.dtype)
        if grad.shape != param.shape:
            raise DimensionError(f"adam_step: gradient for '{name}' has shape {grad.shape}, parameter {param.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros(param.shape, dtype=param.data.dtype)
            v = np.zeros(param.shape, dtype=param.data.dtype)
        elif m.shape != param.shape:
            raise DimensionError(f"adam_step: moment for '{name}' has shape {m.shape}, parameter {param.shape}")
        pending.append((name, param, grad, m, v))

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    updated = {}
    for name, param, grad, m, v in pending:
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        new_value = param.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        updated[name] = Tensor._wrap(new_value, requires_grad=param.requires_grad)
        updated[name].name = param.name
    return updated
