import logging
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

# RNG stream purposes; part of the seed key so streams never collide.
STREAM_TRAIN = 0
STREAM_PROBE = 1
STREAM_EVAL = 2
STREAM_INIT = 3
STREAM_DATA = 4
STREAM_PARTITION = 5


# ------------------------------------------------------------------
# Error types
# ------------------------------------------------------------------
class ConfigurationError(ValueError):
    """Invalid configuration: shapes, names, files or parameter ranges."""


class UsageError(ValueError):
    """An API was called outside its contract."""


class NumericError(ArithmeticError):
    """
    A non-finite value appeared in a computation.

    :param message: Human-readable description.
    :param where: Name of the layer or operation that produced the value.
    """

    def __init__(self, message: str, where: str = "") -> None:
        super().__init__(f"{message} (in {where})" if where else message)
        self.where = where


class DegenerateInputError(NumericError):
    """Input for which the operation is undefined, e.g. an all-zero latent."""


class DivergenceError(RuntimeError):
    """
    A client's training loss became non-finite.

    :param round_index: Communication round in which divergence happened.
    :param client_id: Offending client.
    :param detail: Diagnostic text.
    """

    def __init__(self, round_index: int, client_id: int, detail: str = "") -> None:
        super().__init__(f"Client {client_id} diverged in round {round_index}: {detail}")
        self.round_index = round_index
        self.client_id = client_id


class PartitionError(ConfigurationError):
    """Partitioning could not satisfy its constraints."""


# ------------------------------------------------------------------
# Strategy resolution utilities
# ------------------------------------------------------------------
def get_strategy_class(name: str) -> type:
    """
    Resolve a FederatedStrategy subclass by STRATEGY_NAME (case-insensitive).

    :param name: Strategy name (e.g., "fedavg", "fedprox", "moon", "feddom").
    :return: Matching FederatedStrategy subclass.
    :raises ConfigurationError: If no matching strategy class is found.
    """
    from feddom.fl_strategy import FederatedStrategy

    name = name.lower()
    for cls in FederatedStrategy.__subclasses__():
        if getattr(cls, "STRATEGY_NAME", None) == name:
            return cls
    raise ConfigurationError(f"No strategy found for name: {name}")


# ------------------------------------------------------------------
# Deterministic random streams
# ------------------------------------------------------------------
def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """
    Build an independent generator for (seed, *key).

    The same key always yields the same stream, independent of thread scheduling or of
    how many other streams were drawn before.

    :param seed: Global experiment seed.
    :param key: Extra integers, e.g. (stream purpose, client id, round).
    :return: Seeded numpy Generator.
    """
    return np.random.default_rng([int(v) & 0xFFFFFFFFFFFFFFFF for v in (seed, *key)])


def stable_hash(text: str) -> int:
    """
    Deterministic 32-bit FNV-1a hash of a string (Python's hash() is salted per process).
    """
    value = 0x811C9DC5
    for byte in text.encode("utf-8"):
        value ^= byte
        value = (value * 0x01000193) & 0xFFFFFFFF
    return value


def ordered_sum(terms: Sequence[np.ndarray]) -> np.ndarray:
    """
    Left-to-right sum with a fixed accumulation order.
    """
    if not terms:
        raise UsageError("ordered_sum needs at least one term")
    acc = np.array(terms[0], copy=True)
    for term in terms[1:]:
        acc += term
    return acc


# ------------------------------------------------------------
# General utility functions (e.g., paths, filesystem handling)
# ------------------------------------------------------------
def validate_output_path(output_dir: Path, create_if_missing: bool = True) -> Path:
    """
    Ensure the output directory exists, or optionally create it.

    :param output_dir: The path of the directory to validate.
    :param create_if_missing: Whether to automatically create the directory if it does not exist.
    :return: A valid output directory path.
    :raises FileNotFoundError: If the directory does not exist and creation is disabled.
    :raises NotADirectoryError: If the path exists but is not a directory.
    :raises OSError: If directory creation fails.
    """
    output_dir = Path(output_dir)
    if output_dir.exists():
        if not output_dir.is_dir():
            raise NotADirectoryError(f"Output path exists but is not a directory: {output_dir}")
        return output_dir

    if create_if_missing:
        try:
            output_dir.mkdir(parents=True, exist_ok=True)
            logger.info(f"Created output directory: {output_dir}")
            return output_dir
        except OSError as e:
            logger.error(f"Failed to create output directory: {e}")
            raise OSError(f"Failed to create output directory: {output_dir}") from e
    else:
        logger.error(f"Output directory '{output_dir}' does not exist and create_if_missing=False.")
        raise FileNotFoundError(f"Output directory '{output_dir}' does not exist and create_if_missing=False.")
