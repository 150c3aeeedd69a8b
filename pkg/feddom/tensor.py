"""
Dense tensors with reverse-mode automatic differentiation.

Operations record themselves on the computation tape that is active on the calling thread
(``with ComputationTape() as tape: ...``). Outside a tape, operations run forward only and their
outputs never require gradients. Every primitive checks its output for non-finite values.
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from feddom.utils import ConfigurationError, DegenerateInputError, NumericError, UsageError

logger = logging.getLogger(__name__)

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_local = threading.local()

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def set_default_dtype(name: str) -> None:
    """
    Select the global scalar type ("float32" for training, "float64" for gradient checks).

    :param name: "float32" or "float64".
    :raises ConfigurationError: On any other name.
    """
    global _default_dtype
    if name not in _DTYPES:
        raise ConfigurationError(f"Unsupported dtype '{name}'; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> type:
    return _default_dtype


class Tensor:
    """
    Dense n-dimensional array of real scalars, optionally tracking a gradient.

    :param data: Values; converted to the global scalar type.
    :param requires_grad: Whether backward should populate ``grad``.
    :param name: Optional label used in diagnostics.
    :param dtype: Scalar type override; defaults to the global one.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = "", dtype=None) -> None:
        self.data = np.asarray(data, dtype=_default_dtype if dtype is None else dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, _as_tensor(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(_as_tensor(other), self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name='{self.name}')"


def _as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ------------------------------------------------------------------
# Computation tape
# ------------------------------------------------------------------
@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class ComputationTape:
    """
    Ordered record of primitive operations, in execution (hence topological) order.

    A tape belongs to the thread that entered it; distinct tapes may run on distinct threads.
    """

    def __init__(self) -> None:
        self.entries: List[TapeEntry] = []
        self._produced: set = set()

    def __enter__(self) -> "ComputationTape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> None:
        self.entries.append(TapeEntry(op, inputs, output, backward_fn))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> None:
        """
        Propagate d(loss)/d(.) to every leaf tensor that requires gradients.

        Leaf gradients accumulate into ``Tensor.grad`` until cleared by the optimizer.

        :param loss: Scalar tensor produced on this tape.
        :raises UsageError: If the loss is not scalar or the tape is empty.
        :raises NumericError: If a gradient becomes non-finite.
        """
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.entries:
            raise UsageError("backward called on an empty tape")

        pending = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for entry in reversed(self.entries):
            for t in entry.inputs:
                if t.requires_grad and id(t) not in self._produced:
                    leaves[id(t)] = t
            grad_out = pending.pop(id(entry.output), None)
            if grad_out is None:
                continue
            for t, g in zip(entry.inputs, entry.backward(grad_out)):
                if g is None or not t.requires_grad:
                    continue
                if id(t) in self._produced:
                    prev = pending.get(id(t))
                    pending[id(t)] = g if prev is None else prev + g
                else:
                    g = np.asarray(g, dtype=t.data.dtype)
                    t.grad = g.copy() if t.grad is None else t.grad + g

        for t in leaves.values():
            if t.grad is None:
                t.zero_grad()
            elif not np.all(np.isfinite(t.grad)):
                raise NumericError("non-finite gradient", t.name or "leaf")


def backward(tape: ComputationTape, loss: Tensor) -> None:
    tape.backward(loss)


def current_tape() -> Optional[ComputationTape]:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


@contextmanager
def no_tape() -> Iterator[None]:
    """Run a block without recording, even inside an active tape."""
    stack = getattr(_local, "tapes", None)
    saved = list(stack) if stack else []
    _local.tapes = []
    try:
        yield
    finally:
        _local.tapes = saved


@contextmanager
def name_scope(name: str) -> Iterator[None]:
    """Prefix diagnostics raised inside the block with a layer name."""
    scopes = getattr(_local, "scopes", None)
    if scopes is None:
        scopes = _local.scopes = []
    scopes.append(name)
    try:
        yield
    finally:
        scopes.pop()


def _where(op: str) -> str:
    scopes = getattr(_local, "scopes", None) or []
    return "/".join([*scopes, op])


def _emit(op: str, out_data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericError("non-finite value", _where(op))
    tape = current_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=tracked)
    if tracked:
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ------------------------------------------------------------------
# Elementwise primitives
# ------------------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit("scale", a.data * factor, (a,), lambda g: (g * factor,))


def straight_through(x: Tensor, value: np.ndarray, op: str = "straight_through") -> Tensor:
    """Forward ``value`` in place of ``x`` while passing gradients through unchanged."""
    value = np.asarray(value, dtype=x.data.dtype)
    if value.shape != x.shape:
        raise ConfigurationError(f"{op}: replacement shape {value.shape} differs from input {x.shape}")
    return _emit(op, value, (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    slope_map = np.where(mask, 1, slope).astype(x.data.dtype)
    return _emit("leaky_relu", x.data * slope_map, (x,), lambda g: (g * slope_map,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _emit("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _emit("log", y, (x,), lambda g: (g / x.data,))


# ------------------------------------------------------------------
# Reductions and shape manipulation
# ------------------------------------------------------------------
def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    axes = _normalize_axes(axis, x.ndim)

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return _emit("sum", x.data.sum(axis=axes), (x,), backward_fn)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / count,)

    return _emit("mean", x.data.mean(axis=axes), (x,), backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _emit("reshape", x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (the channel axis for NCHW and (N, features) layouts)."""
    tensors = tuple(tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward_fn)


def spatial_mean_pool(x: Tensor) -> Tensor:
    """Average an (N, C, H, W) map over H and W, giving (N, C)."""
    if x.ndim != 4:
        raise ConfigurationError(f"spatial_mean_pool expects NCHW input, got shape {x.shape}")
    return mean(x, axis=(2, 3))


# ------------------------------------------------------------------
# Layers
# ------------------------------------------------------------------
def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (N, in) @ (out, in)^T + (out,)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ConfigurationError(f"dense expects (N, {weight.shape[1]}) input, got {x.shape}")

    def backward_fn(g: np.ndarray):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _emit("dense", x.data @ weight.data.T + bias.data, (x, weight, bias), backward_fn)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D convolution (cross-correlation) with zero padding.

    :param x: Input (N, C, H, W).
    :param weight: Kernel (O, C, kh, kw).
    :param bias: Bias (O,).
    :param stride: Step between windows.
    :param padding: Zero padding on every side.
    :return: Output (N, O, Ho, Wo).
    """
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ConfigurationError(f"conv2d expects (N, {weight.shape[1]}, H, W) input, got {x.shape}")
    _, _, kh, kw = weight.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = _windows(xp, kh, kw, stride)
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def backward_fn(g: np.ndarray):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += contrib
        gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3]]
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _emit("conv2d", out, (x, weight, bias), backward_fn)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Transposed 2-D convolution (the input-gradient of conv2d), used for upsampling.

    :param x: Input (N, Ci, H, W).
    :param weight: Kernel (Ci, Co, kh, kw).
    :param bias: Bias (Co,).
    :param stride: Upsampling factor.
    :param padding: Rows/columns cropped from every side of the full output.
    :return: Output (N, Co, (H-1)*stride - 2*padding + kh, ...).
    """
    if x.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ConfigurationError(f"conv_transpose2d expects (N, {weight.shape[0]}, H, W) input, got {x.shape}")
    n, _, h, w = x.shape
    _, co, kh, kw = weight.shape
    p = padding
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    if hf - 2 * p <= 0 or wf - 2 * p <= 0:
        raise ConfigurationError(f"conv_transpose2d padding {p} leaves an empty output")
    full = np.zeros((n, co, hf, wf), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(x.data, weight.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            full[:, :, i:i + stride * (h - 1) + 1:stride, j:j + stride * (w - 1) + 1:stride] += contrib
    out = full[:, :, p:hf - p, p:wf - p] + bias.data[None, :, None, None]

    def backward_fn(g: np.ndarray):
        gfull = np.zeros_like(full)
        gfull[:, :, p:hf - p, p:wf - p] = g
        win = _windows(gfull, kh, kw, stride)
        gx = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _emit("conv_transpose2d", out, (x, weight, bias), backward_fn)


# ------------------------------------------------------------------
# Losses and similarity
# ------------------------------------------------------------------
def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error, mean-reduced over every element."""
    if a.shape != b.shape:
        raise ConfigurationError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    count = diff.size

    def backward_fn(g: np.ndarray):
        ga = g * 2 * diff / count
        return ga, -ga

    return _emit("mse", np.mean(diff * diff), (a, b), backward_fn)


def l2_norm_sq(x: Tensor) -> Tensor:
    return _emit("l2_norm_sq", np.sum(x.data * x.data), (x,), lambda g: (g * 2 * x.data,))


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along the last axis; norms are clamped below at ``eps``."""
    if a.shape != b.shape:
        raise ConfigurationError(f"cosine_similarity shape mismatch: {a.shape} vs {b.shape}")
    na = np.maximum(np.linalg.norm(a.data, axis=-1, keepdims=True), eps)
    nb = np.maximum(np.linalg.norm(b.data, axis=-1, keepdims=True), eps)
    cos = np.sum(a.data * b.data, axis=-1, keepdims=True) / (na * nb)

    def backward_fn(g: np.ndarray):
        g = g[..., None]
        ga = g * (b.data / (na * nb) - cos * a.data / (na * na))
        gb = g * (a.data / (na * nb) - cos * b.data / (nb * nb))
        return ga, gb

    return _emit("cosine_similarity", cos[..., 0], (a, b), backward_fn)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """
    Scale each vector along ``axis`` to unit Euclidean norm.

    :raises DegenerateInputError: If any vector is all-zero.
    """
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("cannot normalize an all-zero vector", _where("l2_normalize"))
    y = x.data / norm

    def backward_fn(g: np.ndarray):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)

    return _emit("l2_normalize", y, (x,), backward_fn)
