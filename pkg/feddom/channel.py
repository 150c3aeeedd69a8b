"""
Wireless channel between encoder and decoder: power normalization, AWGN and block Rayleigh fading.

The latent is a real vector of length 2k read as k complex symbols in (re, im) pairs.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np

from feddom import tensor as T
from feddom.tensor import Tensor
from feddom.utils import ConfigurationError, DegenerateInputError

logger = logging.getLogger(__name__)

CHANNEL_KINDS = ("awgn", "rayleigh")
MIN_FADING_MAGNITUDE = 1e-6
MAX_FADING_REDRAWS = 100


@dataclass
class ChannelConfig:
    """
    :param kind: "awgn" or "rayleigh".
    :param snr_set_db: SNR values (dB) sampled uniformly during training.
    :param transmit_power: Average complex-symbol power P.
    :param equalize: Divide by the fading coefficient at the receiver (perfect CSI).
    """
    kind: str = "awgn"
    snr_set_db: List[float] = field(default_factory=lambda: [1.0, 3.0, 5.0, 7.0, 9.0])
    transmit_power: float = 1.0
    equalize: bool = True

    def __post_init__(self) -> None:
        self.kind = str(self.kind).lower()
        if self.kind not in CHANNEL_KINDS:
            raise ConfigurationError(f"Unknown channel kind '{self.kind}'; expected one of {CHANNEL_KINDS}")
        if not self.snr_set_db:
            raise ConfigurationError("snr_set_db must not be empty")
        self.snr_set_db = [float(s) for s in self.snr_set_db]
        if not self.transmit_power > 0:
            raise ConfigurationError(f"transmit_power must be positive; received: {self.transmit_power}")

    def to_dict(self) -> dict:
        return asdict(self)


def _symbol_count(latent: Tensor) -> int:
    length = latent.shape[-1]
    if length % 2:
        raise ConfigurationError(f"Latent length must be even (re, im pairs); got {length}")
    return length // 2


def power_normalize(latent: Tensor, power: float = 1.0) -> Tensor:
    """
    Scale each latent to ``x * sqrt(k * P) / ||x||`` so its mean complex-symbol power is exactly P.

    :param latent: (2k,) or (N, 2k).
    :param power: Transmit power P.
    :raises DegenerateInputError: If a latent is all zeros.
    """
    k = _symbol_count(latent)
    try:
        unit = T.l2_normalize(latent, axis=-1)
    except DegenerateInputError as e:
        raise DegenerateInputError("cannot power-normalize an all-zero latent", "power_normalize") from e
    return T.scale(unit, float(np.sqrt(k * power)))


def snr_to_noise_variance(snr_db: float, power: float = 1.0) -> float:
    """Total complex-noise variance per symbol, P / 10^(snr/10); each real component gets half."""
    if not power > 0:
        raise ConfigurationError(f"power must be positive; received: {power}")
    return float(power / 10.0 ** (snr_db / 10.0))


def mean_symbol_power(latent: np.ndarray) -> float:
    """Average |symbol|^2 over every complex symbol in ``latent``."""
    values = np.asarray(latent, dtype=np.float64)
    return float(np.sum(values * values) / (values.size / 2))


def draw_fading(rng: np.random.Generator, count: int) -> np.ndarray:
    """
    One CN(0, 1) coefficient per transmitted image; magnitudes below 1e-6 are redrawn.
    """
    coeffs = np.empty(count, dtype=np.complex128)
    for idx in range(count):
        for _ in range(MAX_FADING_REDRAWS):
            h = (rng.standard_normal() + 1j * rng.standard_normal()) / np.sqrt(2.0)
            if abs(h) >= MIN_FADING_MAGNITUDE:
                break
            logger.warning(f"Redrawing near-zero fading coefficient |h|={abs(h):.2e}")
        coeffs[idx] = h
    return coeffs


def transmit(latent: Tensor, cfg: ChannelConfig, snr_db: float, rng: np.random.Generator) -> Tensor:
    """
    Pass power-normalized latents through the channel.

    AWGN: y = x + n. Rayleigh: y = h x + n with one h ~ CN(0, 1) per image, then y / h when
    ``cfg.equalize``. The result is a straight-through layer: gradients pass unchanged.

    :param latent: (2k,) or (N, 2k).
    :param cfg: Channel configuration.
    :param snr_db: SNR of this transmission.
    :param rng: Stream the noise and fading are drawn from.
    :return: Received reals, same shape as ``latent``.
    """
    k = _symbol_count(latent)
    x = latent.data.reshape(-1, k, 2).astype(np.float64)
    symbols = x[..., 0] + 1j * x[..., 1]
    batch = symbols.shape[0]

    sigma2 = snr_to_noise_variance(snr_db, cfg.transmit_power)
    if cfg.kind == "rayleigh":
        h = draw_fading(rng, batch)[:, None]
    else:
        h = None
    noise = rng.standard_normal((batch, k, 2)) * np.sqrt(sigma2 / 2.0)
    received = symbols if h is None else h * symbols
    received = received + (noise[..., 0] + 1j * noise[..., 1])
    if h is not None and cfg.equalize:
        received = received / h

    out = np.stack([received.real, received.imag], axis=-1).reshape(latent.shape)
    return T.straight_through(latent, out, op="channel")


def sample_snr(cfg: ChannelConfig, rng: np.random.Generator) -> float:
    """Uniform draw from ``cfg.snr_set_db``."""
    return cfg.snr_set_db[int(rng.integers(len(cfg.snr_set_db)))]
