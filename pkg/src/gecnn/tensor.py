"""Dense tensors with reverse-mode differentiation.

Every op returns a new ``Tensor``; when any input requires a gradient the result
remembers its parents and a backward rule. ``Tensor.backward`` walks that graph
in reverse topological order, visiting each node once and summing gradients
where a value fans out.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def record_relu_masks():
    """Collect the activation pattern of every relu evaluated inside the block."""
    prev = getattr(_state, "relu_masks", None)
    masks: list[np.ndarray] = []
    _state.relu_masks = masks
    try:
        yield masks
    finally:
        _state.relu_masks = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar for the handful of ops with natural symbols
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], rule, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaf_grads: dict[int, np.ndarray] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    With ``leaf_grads`` the leaf gradients go into that dict (keyed by ``id``)
    instead, so several tapes over shared parameters can run side by side.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.shape:
                raise RuntimeError(f"{node.op}: gradient shape {g.shape} != input shape {parent.shape}")
            if leaf_grads is not None and parent._backward is None:
                prev = leaf_grads.get(id(parent))
                leaf_grads[id(parent)] = g.copy() if prev is None else prev + g
            else:
                parent.grad = g.copy() if parent.grad is None else parent.grad + g
        if node is not loss:
            node.grad = None


# -- elementwise -------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,), "scale")


@contextmanager
def frozen_relu_masks(masks: Sequence[np.ndarray]):
    """Make the relus evaluated inside the block reuse ``masks`` in order.

    Holds the activation pattern of a previous evaluation fixed, so a
    finite-difference stencil stays on one linear piece.
    """
    prev = getattr(_state, "frozen_masks", None)
    _state.frozen_masks = iter(masks)
    try:
        yield
    finally:
        _state.frozen_masks = prev


def relu(a: Tensor) -> Tensor:
    frozen = getattr(_state, "frozen_masks", None)
    # NaN fails the comparison, so carry it through explicitly rather than zeroing it
    mask = (a.data > 0) | np.isnan(a.data) if frozen is None else next(frozen)
    log = getattr(_state, "relu_masks", None)
    if log is not None:
        log.append(mask)
    return _result(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sum_all(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


# -- shape -------------------------------------------------------------------

def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(_norm_axis(ax, a.ndim) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _result(np.asarray(a.data.transpose(axes), order="C"), (a,),
                   lambda g: (np.asarray(g.transpose(inv), order="C"),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of nothing")
    axis = _norm_axis(axis, tensors[0].ndim)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    axis = _norm_axis(axis, a.ndim)
    if sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not add up to {a.shape[axis]}")
    outs = []
    start = 0
    for size in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + size)
        sl = tuple(sl)

        def rule(g, sl=sl):
            full = np.zeros_like(a.data)
            full[sl] = g
            return (full,)

        outs.append(_result(a.data[sl].copy(), (a,), rule, "split"))
        start += size
    return outs


def mean(a: Tensor, axes: Sequence[int] | int) -> Tensor:
    """Average over ``axes`` (removed from the result); global average pooling."""
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted({_norm_axis(ax, a.ndim) for ax in axes}))
    count = int(np.prod([a.shape[ax] for ax in axes]))

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape) / count,)

    return _result(a.data.mean(axis=axes), (a,), rule, "mean")


mean_over_axes = mean


# -- linear algebra ----------------------------------------------------------

def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes of either side are batch axes.

    A 2-d right operand is shared across the batch of the left one (and vice versa).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")

    def rule(g):
        ga = _reduce_to(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _reduce_to(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), rule, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dense layer on (N, D_in) with weight (D_out, D_in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data

    def rule(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _result(out, parents, rule, "linear")


def conv_output_length(T: int, kernel: int, stride: int, padding: int) -> int:
    return (T + 2 * padding - kernel) // stride + 1


def conv_temporal(x: Tensor, weight: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    """Correlate along time: x (N, C_in, T, S), weight (C_out, C_in, K) -> (N, C_out, T', S).

    ``padding`` defaults to (K-1)/2 zeros on each side of the time axis.
    """
    if x.ndim != 4 or weight.ndim != 3:
        raise ValueError(f"conv_temporal: expected x (N,C,T,S) and weight (O,C,K), got {x.shape}, {weight.shape}")
    C_out, C_in, K = weight.shape
    if K % 2 == 0:
        raise ValueError(f"temporal kernel size must be odd, got {K}")
    if x.shape[1] != C_in:
        raise ValueError(f"conv_temporal: input has {x.shape[1]} channels, weight expects {C_in}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding is None:
        padding = (K - 1) // 2
    N, _, T, S = x.shape
    if K > T + 2 * padding:
        raise ValueError(f"kernel {K} longer than padded sequence {T + 2 * padding}")
    T_out = conv_output_length(T, K, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (0, 0))) if padding else x.data
    span = stride * (T_out - 1) + 1
    w2 = weight.data.reshape(C_out, C_in * K)
    if K == 1 and stride == 1:
        cols = xp.reshape(N, C_in, T_out * S)
    else:
        # cols[n, c*K + k, t, s] = xp[n, c, t*stride + k, s]
        windows = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride]
        cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 2, 3)).reshape(N, C_in * K, T_out * S)
    out = (w2 @ cols).reshape(N, C_out, T_out, S)

    def rule(g):
        g2 = g.reshape(N, C_out, T_out * S)
        gw = np.einsum("not,nct->oc", g2, cols, optimize=True).reshape(C_out, C_in, K)
        gcols = (w2.T @ g2).reshape(N, C_in, K, T_out, S)
        gx = np.zeros_like(xp)
        for k in range(K):
            gx[:, :, k:k + span:stride, :] += gcols[:, :, k]
        if padding:
            gx = gx[:, :, padding:padding + T, :]
        return gx, gw

    return _result(out, (x, weight), rule, "conv_temporal")


# -- normalization and losses --------------------------------------------------

def update_running_stats(running_mean, running_var, mu, unbiased_var, momentum: float) -> None:
    running_mean *= momentum
    running_mean += (1 - momentum) * mu
    running_var *= momentum
    running_var += (1 - momentum) * unbiased_var


@contextmanager
def defer_running_stats():
    """Collect batch-norm running-stat updates instead of applying them.

    Lets shard workers leave the shared buffers alone; the caller applies the
    collected updates with ``update_running_stats`` in a fixed order.
    """
    prev = getattr(_state, "deferred_stats", None)
    updates: list[tuple] = []
    _state.deferred_stats = updates
    try:
        yield updates
    finally:
        _state.deferred_stats = prev


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel standardization over every axis except axis 1.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batch_norm: scale/shift must have shape ({C},)")
    axes = tuple(ax for ax in range(x.ndim) if ax != 1)
    bshape = [1] * x.ndim
    bshape[1] = C
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.size // C
        unbiased = var * count / max(count - 1, 1)
        deferred = getattr(_state, "deferred_stats", None)
        if deferred is not None:
            deferred.append((running_mean, running_var, mu, unbiased, momentum))
        else:
            update_running_stats(running_mean, running_var, mu, unbiased, momentum)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def rule(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            m = x.data.size // C
            gx = (inv_std.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), rule, "batch_norm")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits); logits (N, C)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise ValueError(f"softmax_cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    N, C = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= C:
        raise ValueError(f"label out of range [0, {C})")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(N), labels].mean()

    def rule(g):
        grad = np.exp(logp)
        grad[np.arange(N), labels] -= 1.0
        return (grad * (g / N),)

    return _result(np.asarray(loss), (logits,), rule, "softmax_cross_entropy")


# -- initialization ----------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int,
                   dtype=np.float64) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)
