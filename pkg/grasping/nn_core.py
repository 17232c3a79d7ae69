"""
Dense tensors with define-by-run reverse-mode differentiation.

Only the layers the two tactile policy families and the SAC trainer need are
provided: linear, conv2d, batchnorm2d, layernorm, multi-head attention, the
elementwise activations, the diagonal Gaussian log density and Adam.

Every operation records a closure on the result tensor; ``Tensor.backward``
walks the recorded graph once in reverse topological order. The graph is
rebuilt on every forward pass.
"""

import contextlib
import copy
import logging
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigError, DimensionError, TrainingError, UnknownParameterError, UsageError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
NORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1

_grad_mode = threading.local()


def is_grad_enabled():
    return getattr(_grad_mode, 'enabled', True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-d array of reals with an optional gradient accumulator."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    @staticmethod
    def _result(data, parents, backward):
        parents = tuple(parents)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
        return Tensor(data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``."""
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs an explicit gradient for shape {self.shape}")
            grad = np.ones_like(self.data)

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        pending = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward is None:
                node_grad = node_grad.astype(node.data.dtype, copy=False)
                node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = self._coerce(other)
        a_shape, b_shape = self.shape, other.shape
        return self._result(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        a_shape, b_shape = self.shape, other.shape
        return self._result(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        return self._result(a * b, (self, other),
                            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        return self._result(a / b, (self, other),
                            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        return self._result(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise UsageError("only scalar exponents are supported")
        a = self.data
        return self._result(a ** exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError("matmul inner dimensions do not match", a.shape, b.shape)

        def backward(g):
            grad_a = g @ np.swapaxes(b, -1, -2)
            grad_b = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

        return self._result(a @ b, (self, other), backward)

    # -- reductions and views ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return self._result(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return self._result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def __getitem__(self, index):
        shape = self.shape
        dtype = self.data.dtype

        def backward(g):
            grad = np.zeros(shape, dtype=dtype)
            np.add.at(grad, index, g)
            return (grad,)

        return self._result(self.data[index], (self,), backward)

    # -- elementwise -------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return self._result(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return self._result(np.log(a), (self,), lambda g: (g / a,))

    def tanh(self):
        out = np.tanh(self.data)
        return self._result(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self):
        mask = self.data > 0
        return self._result(self.data * mask, (self,), lambda g: (g * mask,))

    def softplus(self):
        a = self.data
        out = np.logaddexp(0.0, a).astype(a.dtype, copy=False)
        return self._result(out, (self,), lambda g: (g / (1.0 + np.exp(-a)),))

    def clip(self, low, high):
        a = self.data
        mask = (a >= low) & (a <= high)
        return self._result(np.clip(a, low, high), (self,), lambda g: (g * mask,))


class Parameter(Tensor):
    """Leaf tensor owned by a module; always requires grad."""

    def __init__(self, data, dtype=DEFAULT_DTYPE):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)


def tensor(data, requires_grad=False, dtype=DEFAULT_DTYPE):
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def concat(tensors, axis=-1):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def minimum(a, b):
    """Elementwise minimum; ties send the gradient to ``a``."""
    take_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return Tensor._result(np.where(take_a, a.data, b.data), (a, b), backward)


def relu(x):
    return x.relu()


def tanh(x):
    return x.tanh()


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out = exps / exps.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward)


def linear(x, weight, bias=None):
    """y = x·W + b with W stored as [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError("linear input does not match weight", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError("linear bias does not match weight", bias.shape, weight.shape)
    out = x @ weight
    return out + bias if bias is not None else out


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of x[batch, c_in, h, w] with kernel[c_out, c_in, kh, kw]."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError("conv2d channel mismatch", x.shape, kernel.shape)
    batch, _, height, width = x.shape
    _, _, kh, kw = kernel.shape
    if kh > height + 2 * padding or kw > width + 2 * padding:
        raise DimensionError("conv2d kernel larger than padded input", kernel.shape, x.shape)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    w = kernel.data
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        grad_kernel = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_padded = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contribution = np.tensordot(g, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += contribution
        grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width]
        grads = (grad_x, grad_kernel)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._result(np.ascontiguousarray(out, dtype=x.dtype), parents, backward)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=BATCHNORM_MOMENTUM, eps=NORM_EPS):
    """Per-channel normalisation over (batch, h, w); running stats are updated in place."""
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise DimensionError("batchnorm2d expects [batch, channels, h, w]", x.shape, gamma.shape)
    a = x.data
    shape = (1, -1, 1, 1)
    if training:
        if a.shape[0] < 2:
            raise UsageError(f"batchnorm2d in training mode needs batch >= 2, got {a.shape[0]}")
        count = a.shape[0] * a.shape[2] * a.shape[3]
        mean = a.mean(axis=(0, 2, 3))
        var = a.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (a - mean.reshape(shape)) * inv_std.reshape(shape)
    out = (gamma.data.reshape(shape) * x_hat + beta.data.reshape(shape)).astype(a.dtype, copy=False)

    def backward(g):
        grad_gamma = (g * x_hat).sum(axis=(0, 2, 3))
        grad_beta = g.sum(axis=(0, 2, 3))
        g_hat = g * gamma.data.reshape(shape)
        if training:
            grad_x = inv_std.reshape(shape) / count * (
                count * g_hat
                - g_hat.sum(axis=(0, 2, 3), keepdims=True)
                - x_hat * (g_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            grad_x = g_hat * inv_std.reshape(shape)
        return grad_x, grad_gamma, grad_beta

    return Tensor._result(out, (x, gamma, beta), backward)


def layernorm(x, gamma, beta, eps=NORM_EPS):
    """Normalise over the last dimension, then scale and shift."""
    d = x.shape[-1]
    if d < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError("layernorm affine parameters do not match input", x.shape, gamma.shape)
    a = x.data
    mean = a.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(a.var(axis=-1, keepdims=True) + eps)
    x_hat = (a - mean) * inv_std
    out = (gamma.data * x_hat + beta.data).astype(a.dtype, copy=False)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        grad_gamma = (g * x_hat).sum(axis=lead)
        grad_beta = g.sum(axis=lead)
        g_hat = g * gamma.data
        grad_x = inv_std / d * (
            d * g_hat
            - g_hat.sum(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).sum(axis=-1, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta

    return Tensor._result(out, (x, gamma, beta), backward)


def _split_heads(t, num_heads):
    lead = t.shape[:-2]
    n, d = t.shape[-2:]
    split = t.reshape(lead + (n, num_heads, d // num_heads))
    k = len(lead)
    return split.transpose(tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(t):
    lead = t.shape[:-3]
    heads, n, head_dim = t.shape[-3:]
    k = len(lead)
    merged = t.transpose(tuple(range(k)) + (k + 1, k, k + 2))
    return merged.reshape(lead + (n, heads * head_dim))


def multi_head_attention(query, context, params, num_heads, return_weights=False):
    """Scaled dot-product attention of query[..., nq, d] over context[..., nk, d].

    ``params`` maps q/k/v/o to (weight, bias) pairs of shape ([d, d], [d]).
    """
    d = query.shape[-1]
    if num_heads < 1 or d % num_heads:
        raise ConfigError('num_heads', f"token dimension {d} is not divisible by {num_heads} heads")
    if context.shape[-1] != d:
        raise DimensionError("attention query and context widths differ", query.shape, context.shape)
    q = _split_heads(linear(query, *params['q']), num_heads)
    k = _split_heads(linear(context, *params['k']), num_heads)
    v = _split_heads(linear(context, *params['v']), num_heads)
    k_axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = (q @ k.transpose(k_axes)) * (1.0 / math.sqrt(d // num_heads))
    weights = softmax(scores, axis=-1)
    out = linear(_merge_heads(weights @ v), *params['o'])
    if return_weights:
        return out, weights
    return out


def gaussian_log_prob(mean, log_std, sample):
    """Diagonal Gaussian log density, summed over the last axis."""
    sample = sample if isinstance(sample, Tensor) else mean._coerce(sample)
    z = (sample - mean) / log_std.exp()
    per_dim = z * z * -0.5 - log_std - 0.5 * math.log(2.0 * math.pi)
    return per_dim.sum(axis=-1)


def mse_loss(prediction, target):
    diff = prediction - target
    return (diff * diff).mean()


# -- modules -----------------------------------------------------------------


class Module:
    """Container of named parameters, buffers and child modules."""

    def __init__(self):
        self.training = True
        self._buffers = OrderedDict()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name, array):
        self._buffers[name] = array

    def _children(self):
        for name, value in vars(self).items():
            if name.startswith('_'):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{index}", item

    def named_parameters(self, prefix=''):
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            else:
                yield from value.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=''):
        for name, array in self._buffers.items():
            yield prefix + name, array
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix=f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode=True):
        for module in self.modules():
            module.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def to(self, dtype):
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for module in self.modules():
            for name in list(module._buffers):
                module._buffers[name] = module._buffers[name].astype(dtype)
        return self

    def parameter_count(self):
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self):
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        own = OrderedDict((name, p) for name, p in self.named_parameters())
        buffers = OrderedDict()
        for module_name, module in self._named_modules():
            for name in module._buffers:
                buffers[module_name + name] = (module, name)
        for name, array in state.items():
            if name in own:
                target_shape = own[name].data.shape
            elif name in buffers:
                module, key = buffers[name]
                target_shape = module._buffers[key].shape
            else:
                raise UnknownParameterError("checkpoint names an unknown parameter", name)
            if tuple(array.shape) != tuple(target_shape):
                raise DimensionError(f"shape mismatch for {name}", array.shape, target_shape)
        missing = [name for name in list(own) + list(buffers) if name not in state]
        if missing:
            raise UnknownParameterError("checkpoint is missing a parameter", missing[0])
        for name, array in state.items():
            if name in own:
                own[name].data = np.array(array, dtype=own[name].data.dtype)
            else:
                module, key = buffers[name]
                module._buffers[key] = np.array(array, dtype=module._buffers[key].dtype)

    def _named_modules(self, prefix=''):
        yield prefix, self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value._named_modules(prefix=f"{prefix}{name}.")

    def clone(self):
        return copy.deepcopy(self)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        super().__init__()
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        bound = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=BATCHNORM_MOMENTUM, eps=NORM_EPS):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer('running_mean', np.zeros(channels, dtype=DEFAULT_DTYPE))
        self.register_buffer('running_var', np.ones(channels, dtype=DEFAULT_DTYPE))

    def forward(self, x):
        return batchnorm2d(x, self.weight, self.bias, self._buffers['running_mean'],
                           self._buffers['running_var'], self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, dim):
        super().__init__()
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x):
        return layernorm(x, self.weight, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, dim, num_heads, rng):
        super().__init__()
        if num_heads < 1 or dim % num_heads:
            raise ConfigError('num_heads', f"token dimension {dim} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def projections(self):
        return {name: (layer.weight, layer.bias) for name, layer in
                (('q', self.q), ('k', self.k), ('v', self.v), ('o', self.o))}

    def forward(self, query, context, return_weights=False):
        return multi_head_attention(query, context, self.projections(), self.num_heads,
                                    return_weights=return_weights)


# -- optimisation ------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place.

    ``params`` is a sequence of (name, Tensor); ``grads`` maps names to arrays
    or is None to read each tensor's ``grad``. Missing gradients count as zero.
    """
    resolved = []
    for name, param in params:
        grad = param.grad if grads is None else grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if not np.all(np.isfinite(grad)):
            logger.error(f"Non-finite gradient for {name} at optimizer step {state.step_count + 1}")
            raise TrainingError("non-finite gradient", name=name, step=state.step_count + 1)
        resolved.append((name, param, grad))

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, param, grad in resolved:
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        param.data = (param.data - update).astype(param.data.dtype, copy=False)
    return state


class Adam:
    def __init__(self, named_params, learning_rate=3e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = list(named_params)
        self.state = AdamState(learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def zero_grad(self):
        for _, param in self.params:
            param.zero_grad()

    def step(self):
        adam_step(self.params, None, self.state)


# -- gradient checking -------------------------------------------------------


GRADCHECK_FLOOR = 1e-6


def _relative_error(analytic, numeric):
    # gradients that vanish analytically leave only rounding noise in the difference quotient
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), GRADCHECK_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradcheck(fn, inputs, eps=1e-4, directions=0, seed=0):
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    Coordinate-wise when ``directions`` is 0, otherwise along that many random
    unit directions spanning all inputs. Returns the maximum relative error.
    """
    for t in inputs:
        t.grad = None
    fn(*inputs).backward()
    analytic = [t.grad.astype(np.float64) if t.grad is not None else np.zeros(t.shape) for t in inputs]

    def evaluate():
        with no_grad():
            return float(np.sum(fn(*inputs).data, dtype=np.float64))

    worst = 0.0
    if directions == 0:
        for t, grad in zip(inputs, analytic):
            numeric = np.zeros(t.shape)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                plus = evaluate()
                flat[i] = original - eps
                minus = evaluate()
                flat[i] = original
                numeric.reshape(-1)[i] = (plus - minus) / (2.0 * eps)
            worst = max(worst, _relative_error(grad, numeric))
        return worst

    rng = np.random.default_rng(seed)
    originals = [t.data.copy() for t in inputs]
    for _ in range(directions):
        vectors = [rng.standard_normal(t.shape) for t in inputs]
        norm = math.sqrt(sum(float(np.sum(v * v)) for v in vectors))
        vectors = [v / norm for v in vectors]
        for t, base, v in zip(inputs, originals, vectors):
            t.data = (base + eps * v).astype(base.dtype)
        plus = evaluate()
        for t, base, v in zip(inputs, originals, vectors):
            t.data = (base - eps * v).astype(base.dtype)
        minus = evaluate()
        for t, base in zip(inputs, originals):
            t.data = base.copy()
        numeric = (plus - minus) / (2.0 * eps)
        projected = sum(float(np.sum(g * v)) for g, v in zip(analytic, vectors))
        worst = max(worst, _relative_error(np.array([projected]), np.array([numeric])))
    return worst
