"""
Parameterized layers, flat parameter views, SGD, gradient checking and FDM1 checkpoints.
"""
import logging
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from feddom import tensor as T
from feddom.tensor import ComputationTape, Tensor, get_default_dtype, name_scope, no_tape
from feddom.utils import ConfigurationError, NumericError, UsageError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FDM1"
CHECKPOINT_VERSION_F32 = 1
CHECKPOINT_VERSION_TYPED = 2
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ModelParams:
    """
    Ordered collection of named parameter tensors, viewable as one flat vector.

    :param named: (name, tensor) pairs in a fixed order.
    """

    def __init__(self, named: Sequence[Tuple[str, Tensor]]) -> None:
        self._named: List[Tuple[str, Tensor]] = list(named)
        names = [n for n, _ in self._named]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"Duplicate parameter names: {names}")

    @property
    def names(self) -> List[str]:
        return [n for n, _ in self._named]

    @property
    def tensors(self) -> List[Tensor]:
        return [t for _, t in self._named]

    @property
    def layout(self) -> Tuple[Tuple[str, Tuple[int, ...]], ...]:
        return tuple((n, t.shape) for n, t in self._named)

    @property
    def total_count(self) -> int:
        return sum(t.size for _, t in self._named)

    def __len__(self) -> int:
        return len(self._named)

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._named)

    def __getitem__(self, name: str) -> Tensor:
        for n, t in self._named:
            if n == name:
                return t
        raise KeyError(name)

    def flatten(self) -> np.ndarray:
        if not self._named:
            return np.zeros(0, dtype=get_default_dtype())
        return np.concatenate([t.data.reshape(-1) for _, t in self._named])

    def unflatten(self, vector: np.ndarray) -> "ModelParams":
        """Split ``vector`` into fresh tensors with this layout."""
        vector = np.asarray(vector)
        if vector.shape != (self.total_count,):
            raise ConfigurationError(f"Flat vector of length {vector.size} does not match {self.total_count} params")
        out, offset = [], 0
        for name, t in self._named:
            chunk = vector[offset:offset + t.size].reshape(t.shape)
            out.append((name, Tensor(chunk.copy(), name=name, dtype=t.data.dtype)))
            offset += t.size
        return ModelParams(out)

    def load_flat(self, vector: np.ndarray) -> None:
        """Overwrite the live tensors in place from a flat vector."""
        self.assign(self.unflatten(vector))

    def copy(self) -> "ModelParams":
        return ModelParams([(n, Tensor(t.data.copy(), name=n, dtype=t.data.dtype)) for n, t in self._named])

    def assign(self, other: "ModelParams") -> None:
        """Copy values from ``other`` (same layout) into these tensors."""
        self.check_layout(other)
        for (_, dst), (_, src) in zip(self._named, other._named):
            dst.data[...] = src.data

    def check_layout(self, other: "ModelParams") -> None:
        if self.layout != other.layout:
            raise ConfigurationError("Parameter layouts differ")

    def zero_grad(self) -> None:
        for _, t in self._named:
            t.zero_grad()

    def grad_flat(self) -> np.ndarray:
        missing = [n for n, t in self._named if t.grad is None]
        if missing:
            raise UsageError(f"Gradients missing for: {missing[:5]}")
        return np.concatenate([t.grad.reshape(-1) for _, t in self._named])

    def grad_norm_sq(self) -> float:
        g = self.grad_flat().astype(np.float64)
        return float(np.dot(g, g))

    def distance(self, other: "ModelParams") -> float:
        """Euclidean distance between the two flat vectors."""
        self.check_layout(other)
        diff = self.flatten().astype(np.float64) - other.flatten().astype(np.float64)
        return float(np.sqrt(np.dot(diff, diff)))

    @staticmethod
    def linear_combination(terms: Sequence[Tuple["ModelParams", float]]) -> "ModelParams":
        """
        Elementwise sum of ``weight * params`` with a fixed left-to-right accumulation order.

        :param terms: (params, weight) pairs sharing one layout.
        :return: New ModelParams.
        """
        if not terms:
            raise UsageError("linear_combination needs at least one term")
        first = terms[0][0]
        for params, _ in terms[1:]:
            first.check_layout(params)
        out = []
        for idx, (name, t0) in enumerate(first._named):
            acc = t0.data * float(terms[0][1])
            for params, weight in terms[1:]:
                acc = acc + params._named[idx][1].data * float(weight)
            out.append((name, Tensor(acc, name=name, dtype=t0.data.dtype)))
        return ModelParams(out)


# ------------------------------------------------------------------
# Module graph
# ------------------------------------------------------------------
class Module(ABC):
    """
    A fixed-topology graph with named parameters.

    Subclasses register parameters and children in ``__init__`` and implement ``forward``.
    ``input_shapes`` holds the per-sample shape of each positional input (batch axis excluded).
    """
    input_shapes: Optional[Tuple[Tuple[int, ...], ...]] = None

    def __init__(self, name: str) -> None:
        self.name = name
        self._parameters: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    def add_parameter(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=f"{self.name}.{name}")
        self._parameters[name] = t
        return t

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, t in self._parameters.items():
            yield f"{prefix}{name}", t
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def params(self) -> ModelParams:
        """Live view: updating these tensors updates the module."""
        return ModelParams(list(self.named_parameters()))

    @abstractmethod
    def forward(self, *inputs: Tensor) -> Tensor:
        pass

    def __call__(self, *inputs: Tensor) -> Tensor:
        with name_scope(self.name):
            return self.forward(*inputs)


def forward(graph: Module, *inputs: Tensor) -> Tensor:
    """
    Validate input shapes against ``graph.input_shapes`` and run the graph.

    :raises ConfigurationError: On an input shape mismatch.
    """
    if graph.input_shapes is not None:
        if len(inputs) != len(graph.input_shapes):
            raise ConfigurationError(f"{graph.name} expects {len(graph.input_shapes)} inputs, got {len(inputs)}")
        for idx, (x, expected) in enumerate(zip(inputs, graph.input_shapes)):
            if tuple(x.shape[1:]) != tuple(expected):
                raise ConfigurationError(
                    f"{graph.name} input {idx}: expected per-sample shape {tuple(expected)}, got {tuple(x.shape[1:])}")
    return graph(*inputs)


def _uniform(rng: np.random.Generator, bound: float, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, name: str = "dense") -> None:
        super().__init__(name)
        bound = np.sqrt(6.0 / (in_features + out_features))
        self.weight = self.add_parameter("weight", _uniform(rng, bound, (out_features, in_features)))
        self.bias = self.add_parameter("bias", np.zeros(out_features))
        self.input_shapes = ((in_features,),)

    def forward(self, x: Tensor) -> Tensor:
        return T.dense(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator, name: str = "conv") -> None:
        super().__init__(name)
        bound = np.sqrt(6.0 / (in_channels * kernel * kernel + out_channels))
        self.weight = self.add_parameter("weight", _uniform(rng, bound, (out_channels, in_channels, kernel, kernel)))
        self.bias = self.add_parameter("bias", np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator, name: str = "deconv") -> None:
        super().__init__(name)
        bound = np.sqrt(6.0 / (in_channels + out_channels * kernel * kernel))
        self.weight = self.add_parameter("weight", _uniform(rng, bound, (in_channels, out_channels, kernel, kernel)))
        self.bias = self.add_parameter("bias", np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


# ------------------------------------------------------------------
# Optimization
# ------------------------------------------------------------------
def sgd_step(params: ModelParams, lr: float) -> None:
    """
    In-place SGD update ``p <- p - lr * grad(p)``, then zero the gradients.

    :raises UsageError: If lr is not positive or any gradient is missing.
    """
    if not lr > 0:
        raise UsageError(f"Learning rate must be positive; received: {lr}")
    missing = [n for n, t in params if t.grad is None]
    if missing:
        raise UsageError(f"sgd_step called without gradients for: {missing[:5]}")
    for _, t in params:
        t.data -= float(lr) * t.grad
        t.zero_grad()


@dataclass
class GradCheckReport:
    max_relative_error: float
    checked: int
    excluded: List[int] = field(default_factory=list)


def finite_diff_check(loss_fn: Callable[[], Tensor], params: ModelParams, epsilon: float = 1e-4,
                      samples: int = 200, rng: Optional[np.random.Generator] = None,
                      kink_tolerance: float = 0.5, kink_atol: Optional[float] = None) -> GradCheckReport:
    """
    Compare autodiff gradients with central differences on a random subset of parameters.

    Relative error is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)``. A parameter whose one-sided
    differences disagree by more than ``kink_tolerance`` (relative) and by more than ``kink_atol``
    (absolute) sits on a non-differentiable point, e.g. a ReLU input at 0; it is excluded and reported
    instead of failing. Smooth parameters with a
    near-zero gradient disagree by only about ``epsilon * |f''|`` and stay checked.

    :param loss_fn: Builds the scalar loss from the current parameter values.
    :param params: Live parameters the loss depends on.
    :param epsilon: Perturbation size, in (0, 1e-2].
    :param samples: Number of flat parameter indices checked.
    :param rng: Generator for the index subsample.
    :param kink_tolerance: Relative disagreement of the one-sided slopes that marks a kink.
    :param kink_atol: Absolute disagreement that marks a kink; defaults to ``10 * epsilon``.
    :return: GradCheckReport.
    :raises UsageError: If epsilon is out of range.
    :raises NumericError: If a loss or gradient is non-finite.
    """
    if not 0 < epsilon <= 1e-2:
        raise UsageError(f"epsilon must be in (0, 1e-2]; received: {epsilon}")
    rng = rng or np.random.default_rng(0)
    kink_atol = 10 * epsilon if kink_atol is None else kink_atol

    params.zero_grad()
    with ComputationTape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = params.grad_flat().astype(np.float64)
    params.zero_grad()

    base = params.flatten()
    count = base.size
    indices = rng.choice(count, size=min(samples, count), replace=False)

    def evaluate(vector: np.ndarray) -> float:
        params.load_flat(vector)
        with no_tape():
            value = loss_fn().item()
        if not np.isfinite(value):
            raise NumericError("non-finite loss during finite differences", "finite_diff_check")
        return value

    worst = 0.0
    excluded = []
    try:
        centre = evaluate(base)
        for idx in sorted(int(i) for i in indices):
            shifted = base.copy()
            shifted[idx] = base[idx] + epsilon
            plus = evaluate(shifted)
            shifted[idx] = base[idx] - epsilon
            minus = evaluate(shifted)
            forward_slope = (plus - centre) / epsilon
            backward_slope = (centre - minus) / epsilon
            scale = max(abs(forward_slope), abs(backward_slope), 1e-6)
            disagreement = abs(forward_slope - backward_slope)
            if disagreement > kink_tolerance * scale and disagreement > kink_atol:
                excluded.append(idx)
                continue
            numeric = (plus - minus) / (2 * epsilon)
            g = analytic[idx]
            rel = abs(g - numeric) / max(abs(g), abs(numeric), 1e-8)
            worst = max(worst, rel)
    finally:
        params.load_flat(base)

    if excluded:
        logger.info(f"Gradient check excluded {len(excluded)} non-differentiable parameter(s)")
    return GradCheckReport(max_relative_error=worst, checked=len(indices) - len(excluded), excluded=excluded)


# ------------------------------------------------------------------
# FDM1 checkpoints
# ------------------------------------------------------------------
def save_checkpoint(path: Path, params: ModelParams) -> None:
    """
    Write parameters in the FDM1 format.

    Version 1 stores every payload as little-endian f32. When any tensor is 64-bit, version 2 is
    written instead, which adds a dtype byte per layer so the round trip stays bit-exact.
    """
    typed = any(t.data.dtype != np.float32 for _, t in params)
    version = CHECKPOINT_VERSION_TYPED if typed else CHECKPOINT_VERSION_F32
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", version, len(params))]
    for name, t in params:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        if typed:
            chunks.append(struct.pack("<B", _DTYPE_CODES[t.data.dtype]))
            payload = t.data.astype(_CODE_DTYPES[_DTYPE_CODES[t.data.dtype]], copy=False)
        else:
            payload = t.data.astype("<f4", copy=False)
        chunks.append(struct.pack("<B", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(payload.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: Path) -> ModelParams:
    """
    Read an FDM1 file into fresh tensors (payload dtype preserved).

    :raises ConfigurationError: On a bad magic, unknown version or truncated file.
    """
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not an FDM1 checkpoint")
    try:
        version, count = struct.unpack_from("<HI", blob, 4)
        if version not in (CHECKPOINT_VERSION_F32, CHECKPOINT_VERSION_TYPED):
            raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
        offset = 10
        named = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            dtype = _CODE_DTYPES[0]
            if version == CHECKPOINT_VERSION_TYPED:
                (code,) = struct.unpack_from("<B", blob, offset)
                dtype = _CODE_DTYPES[code]
                offset += 1
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(blob):
                raise ConfigurationError(f"{path}: truncated payload for '{name}'")
            data = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape)
            offset += nbytes
            named.append((name, Tensor(data.copy(), name=name, dtype=dtype.newbyteorder("="))))
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise ConfigurationError(f"{path}: malformed checkpoint ({e})") from e
    return ModelParams(named)


def load_checkpoint_into(path: Path, params: ModelParams) -> None:
    """Load an FDM1 file into existing live parameters (layouts must match)."""
    loaded = load_checkpoint(path)
    params.check_layout(loaded)
    for (_, dst), (_, src) in zip(params, loaded):
        dst.data[...] = src.data
