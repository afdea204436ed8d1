"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of operations the segmentation network needs are provided.
Every operation returns a new :class:`Tensor` that remembers its inputs and a
closure mapping the upstream gradient to one gradient per input.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from fusenet import kernels

IGNORE_INDEX = 255

_default_dtype = np.dtype(np.float32)
_conv_method = "im2col"
_pattern_log: list | None = None


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors (e.g. float64 for gradient checks)."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = previous


@contextlib.contextmanager
def record_activation_pattern():
    """Collect ``(pattern, margin)`` for every ReLU and max-pool run inside the block.

    ``pattern`` (ReLU mask or max-pool argmax) identifies the linear piece a
    forward pass ran on; ``margin`` is the distance to the nearest kink
    (smallest ``|x|`` for ReLU, smallest top-two gap for max-pool).
    Finite-difference checks use both to spot stencils that cross a kink.
    """
    global _pattern_log
    previous = _pattern_log
    _pattern_log = []
    try:
        yield _pattern_log
    finally:
        _pattern_log = previous


def set_conv_method(method: str) -> None:
    """Select the forward convolution route: ``"im2col"``, ``"direct"`` or ``"naive"``."""
    global _conv_method
    if method not in ("im2col", "direct", "naive"):
        raise ValueError(f"unknown conv method {method!r}")
    _conv_method = method


class Tensor:
    """A numpy array plus an optional gradient buffer and its place on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward: Callable | None = None, op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op or 'leaf'!r})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return NotImplemented

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return NotImplemented

    __rmul__ = __mul__

    def backward(self) -> None:
        backward(self)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    requires_grad = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires_grad, dtype=data.dtype,
                  _parents=parents if requires_grad else (),
                  _backward=backward_fn if requires_grad else None, op=op)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack = [(root, False)]
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
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Gradients are added to existing buffers; callers zero them between steps.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation with zero "same" padding plus per-channel bias."""
    kernels.check_conv_shapes(x.shape, kernel.shape, bias.shape)
    k = kernel.shape[2]
    cols = kernels.im2col(x.data, k)
    if _conv_method == "im2col":
        out = kernels.conv2d_im2col(x.data, kernel.data, bias.data, cols=cols)
    elif _conv_method == "direct":
        out = kernels.conv2d_direct(x.data, kernel.data, bias.data)
    else:
        out = kernels.conv2d_naive(x.data, kernel.data, bias.data)
    x_shape = x.shape

    def _backward(g):
        return kernels.conv2d_backward(g, x_shape, kernel.data, cols)

    return _make(np.ascontiguousarray(out), (x, kernel, bias), _backward, "conv2d")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pooling; ties resolve to the first element in row-major order."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2x2 expects a 4-D tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // 2, w // 2, 4)
    argmax = windows.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    if _pattern_log is not None:
        top2 = np.sort(windows, axis=-1)[..., -2:]
        _pattern_log.append((argmax, float((top2[..., 1] - top2[..., 0]).min(initial=np.inf))))

    def _backward(g):
        routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(routed, argmax[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(n, c, h, w),)

    return _make(np.ascontiguousarray(out), (x,), _backward, "maxpool2x2")


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    """Nearest-neighbour 2x upsampling (each value replicated into a 2x2 block)."""
    if mode != "nearest":
        raise NotImplementedError(f"upsample mode {mode!r} is not implemented")
    if x.data.ndim != 4:
        raise ValueError(f"upsample2x expects a 4-D tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def _backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), _backward, "upsample2x")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _pattern_log is not None:
        _pattern_log.append((mask, float(np.abs(x.data).min(initial=np.inf))))
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def _backward(g):
        return (g * mask,)

    return _make(out, (x,), _backward, "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add needs identical shapes, got {a.shape} and {b.shape}")

    def _backward(g):
        return g, g

    return _make(a.data + b.data, (a, b), _backward, "add")


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a Python constant (used to weight loss terms)."""
    factor = float(factor)

    def _backward(g):
        return (g * factor,)

    return _make((x.data * factor).astype(x.dtype, copy=False), (x,), _backward, "scale")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ValueError(f"cannot concatenate {p.shape} onto batch/spatial {(n, h, w)}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)

    def _backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(out, tuple(parts), _backward, "concat_channels")


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_classes(logits: Tensor) -> Tensor:
    """Per-pixel softmax over the channel (class) axis."""
    if logits.data.ndim != 4 or logits.shape[1] < 2:
        raise ValueError(f"softmax_classes expects [N,K>=2,H,W], got {logits.shape}")
    p = _softmax(logits.data)

    def _backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (logits,), _backward, "softmax_classes")


def masked_softmax_cross_entropy(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX):
    """Mean pixel cross-entropy over non-ignored labels.

    Returns ``(loss, probs)``; ``probs`` is a detached tensor of softmax outputs.
    """
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore_index
    if np.any(labels[valid] >= k) or np.any(labels[valid] < 0):
        raise ValueError(f"label values must lie in [0, {k - 1}] or equal {ignore_index}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross-entropy needs at least one non-ignored pixel")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_sum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_sum
    safe = np.where(valid, labels, 0).astype(np.intp)
    picked = np.take_along_axis(log_p, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / n_valid
    probs = np.exp(log_p)

    def _backward(g):
        grad = probs.copy()
        np.put_along_axis(grad, safe[:, None],
                          np.take_along_axis(grad, safe[:, None], axis=1) - 1, axis=1)
        grad *= (valid / n_valid)[:, None].astype(grad.dtype)
        return (grad * g,)

    loss_t = _make(np.asarray(loss, dtype=z.dtype), (logits,), _backward, "cross_entropy")
    return loss_t, Tensor(probs)
