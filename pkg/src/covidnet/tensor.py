"""Immutable float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active and touching a tensor
with ``requires_grad`` are recorded on that tape; :func:`backward` replays the
tape in reverse. Tapes are thread-local, so concurrent forward passes on
different threads never share one.
"""
import threading
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import kernels
from .errors import ShapeError

PROB_FLOOR = 1e-12

_local = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Node(NamedTuple):
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Records differentiable operations in execution order.

    Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _result(arr, inputs, backward_fn):
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.nodes.append(Node(out, tuple(inputs), backward_fn))
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# --- elementwise and reductions --------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def sum(x):  # noqa: A001 - mirrors numpy naming
    return _result(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x):
    n = x.size
    return _result(np.mean(x.data), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def relu(x):
    mask = x.data > 0
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def concat(tensors: Sequence[Tensor], axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for k, t in enumerate(tensors[1:], start=1):
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise ShapeError(f"concat: input {k} has shape {t.shape}, incompatible with {ref} off axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# --- layers -----------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        for field in ("kernel_h", "kernel_w", "in_channels", "out_channels", "stride", "groups"):
            if getattr(self, field) < 1:
                raise ShapeError(f"ConvSpec.{field} must be positive, got {getattr(self, field)}")
        if self.padding < 0:
            raise ShapeError(f"ConvSpec.padding must be nonnegative, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    def output_hw(self, h, w):
        return (
            kernels.out_size(h, self.kernel_h, self.stride, self.padding),
            kernels.out_size(w, self.kernel_w, self.stride, self.padding),
        )


def conv2d(x, weight, bias, spec: ConvSpec):
    """Grouped 2-D convolution over an NCHW input."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D NCHW, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d: input channel dimension (axis 1) is {x.shape[1]}, expected {spec.in_channels}")
    for axis, (got, want) in enumerate(zip(weight.shape, spec.weight_shape)):
        if got != want:
            raise ShapeError(f"conv2d: weight dimension {axis} is {got}, expected {want} (weight shape {spec.weight_shape})")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D, got shape {weight.shape}")
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: spatial size {x.shape[2:]} too small for kernel {spec.kernel_h}x{spec.kernel_w}")
    b = np.zeros(spec.out_channels) if bias is None else bias.data
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias dimension 0 is {b.shape}, expected ({spec.out_channels},)")
    out = kernels.conv2d_forward(x.data, weight.data, b, spec.stride, spec.padding, spec.groups)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx, gw, gb = kernels.conv2d_backward(
            x.data, weight.data, g, spec.stride, spec.padding, spec.groups, need_input=x.requires_grad
        )
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result(out, inputs, backward)


def max_pool(x, window=2, stride=2):
    if x.ndim != 4:
        raise ShapeError(f"max_pool: input must be 4-D NCHW, got shape {x.shape}")
    if x.shape[2] < window or x.shape[3] < window:
        raise ShapeError(f"max_pool: spatial size {x.shape[2:]} smaller than window {window}")
    out, arg = kernels.maxpool_forward(x.data, window, stride)
    return _result(out, (x,), lambda g: (kernels.maxpool_backward(g, arg, x.shape, window, stride),))


def global_avg_pool(x):
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be 4-D NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    area = h * w
    return _result(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to((g / area)[:, :, None, None], x.shape).copy(),),
    )


def dense(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` shaped (out_features, in_features)."""
    if x.ndim != 2:
        raise ShapeError(f"dense: input must be 2-D (batch, features), got shape {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"dense: weight dimension 1 is {weight.shape[-1]}, expected in_features={x.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"dense: bias dimension 0 is {bias.shape}, expected ({weight.shape[0]},)")
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        return (gx, gw) if bias is None else (gx, gw, g.sum(axis=0))

    return _result(out, inputs, backward)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward)


def cross_entropy(probs, labels):
    """Mean negative log-likelihood of integer ``labels`` under row-wise ``probs``.

    Probabilities are clamped to ``[1e-12, 1]`` before the log; the gradient is
    zero wherever the clamp is active.
    """
    labels = np.asarray(labels)
    if probs.ndim != 2:
        raise ShapeError(f"cross_entropy: probs must be 2-D (batch, classes), got shape {probs.shape}")
    n, k = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match batch size {n}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"cross_entropy: labels must be integers in [0, {k - 1}], got {labels.tolist()}")
    rows = np.arange(n)
    picked = probs.data[rows, labels]
    clamped = np.clip(picked, PROB_FLOOR, 1.0)
    loss = -np.mean(np.log(clamped))

    def backward(g):
        gp = np.zeros(probs.shape)
        live = (picked >= PROB_FLOOR) & (picked <= 1.0)
        gp[rows, labels] = np.where(live, -float(g) / (n * clamped), 0.0)
        return (gp,)

    return _result(np.asarray(loss), (probs,), backward)


# --- differentiation --------------------------------------------------------

class GradMap(Mapping):
    """Gradients keyed by tensor identity.

    Any tensor with ``requires_grad`` that is not on a path to the loss maps to
    zeros.
    """

    def __init__(self, tensors, grads):
        self._tensors = tensors
        self._grads = grads

    def __getitem__(self, tensor):
        g = self._grads.get(id(tensor))
        if g is not None and self._tensors.get(id(tensor)) is tensor:
            return Tensor._wrap(g)
        if isinstance(tensor, Tensor) and tensor.requires_grad:
            return Tensor._wrap(np.zeros(tensor.shape))
        raise KeyError(tensor)

    def __iter__(self):
        return iter(self._tensors.values())

    def __len__(self):
        return len(self._tensors)

    def array(self, tensor):
        return self[tensor].data


def backward(tape: Tape, loss: Tensor) -> GradMap:
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    on_tape = any(node.out is loss for node in tape.nodes)
    if not on_tape and not loss.requires_grad:
        raise ValueError("backward: loss was not produced on this tape and does not require grad")
    tensors = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad:
                tensors[id(t)] = t
        tensors[id(node.out)] = node.out
    tensors[id(loss)] = loss
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    return GradMap(tensors, grads)


def grad_check(op_under_test, input_sampler, eps=1e-5, seed=0, max_entries=None):
    """Largest elementwise relative gap between tape gradients and central differences.

    ``op_under_test(*tensors)`` may return any shape; non-scalar outputs are
    contracted against a fixed random projection so every element matters.
    Relative error is measured against ``max(|analytic|, |numeric|, 1e-6)``.
    ``max_entries`` caps how many elements per input are perturbed.
    """
    arrays = [np.array(a, dtype=np.float64) for a in input_sampler()]
    rng = np.random.default_rng(seed)
    probe = op_under_test(*[Tensor(a) for a in arrays])
    proj = np.ones(probe.shape) if probe.size == 1 else rng.standard_normal(probe.shape)

    def value(arrs):
        return float((op_under_test(*[Tensor(a) for a in arrs]).data * proj).sum())

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op_under_test(*leaves)
        loss = sum(mul(out, Tensor(proj)))
    grads = backward(tape, loss)

    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = grads.array(leaf).reshape(-1)
        idx = np.arange(arrays[k].size)
        if max_entries is not None and idx.size > max_entries:
            idx = np.sort(rng.choice(idx, size=max_entries, replace=False))
        for i in idx:
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k].reshape(-1)[i] += eps
            minus[k].reshape(-1)[i] -= eps
            numeric = (value(plus) - value(minus)) / (2 * eps)
            denom = max(abs(analytic[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
