"""
Convolutional JSCC encoder/decoder pair with SNR conditioning and the feature head f_theta.
"""
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import List, Tuple, Union

import numpy as np

from feddom import tensor as T
from feddom.modules import Conv2d, ConvTranspose2d, Dense, Module, forward
from feddom.tensor import Tensor, no_tape
from feddom.utils import ConfigurationError

logger = logging.getLogger(__name__)

KERNEL = 4
STRIDE = 2
PADDING = 1


@dataclass
class JsccConfig:
    """
    Shape contract of the codec.

    ``n = 3*H*W`` source values are mapped to ``k = round(n * compression_ratio)`` complex channel
    symbols, emitted as ``2k`` reals in (re, im) pairs.
    """
    image_shape: Tuple[int, int, int] = (3, 32, 32)
    compression_ratio: Union[str, float] = "1/12"
    channel_widths: List[int] = field(default_factory=lambda: [16, 32])
    snr_conditioning: bool = True
    leaky_slope: float = 0.2

    def __post_init__(self) -> None:
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self.channel_widths = [int(w) for w in self.channel_widths]
        if len(self.image_shape) != 3 or self.image_shape[0] != 3:
            raise ConfigurationError(f"image_shape must be (3, H, W); received: {self.image_shape}")
        _, h, w = self.image_shape
        if h < 4 or w < 4 or h % 4 or w % 4:
            raise ConfigurationError(f"Image height and width must be positive multiples of 4; received: {h}x{w}")
        if len(self.channel_widths) != 2 or min(self.channel_widths) < 1:
            raise ConfigurationError(f"channel_widths must be two positive ints; received: {self.channel_widths}")
        try:
            ratio = Fraction(self.compression_ratio)
        except (TypeError, ValueError, ZeroDivisionError) as e:
            raise ConfigurationError(f"Invalid compression_ratio: {self.compression_ratio}") from e
        if not 0 < ratio <= 1:
            raise ConfigurationError(f"compression_ratio must be in (0, 1]; received: {ratio}")
        if self.k < 1:
            raise ConfigurationError(f"compression_ratio {ratio} leaves no channel symbols for n={self.n}")

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.compression_ratio)

    @property
    def n(self) -> int:
        return int(np.prod(self.image_shape))

    @property
    def k(self) -> int:
        return int(round(self.n * self.ratio))

    @property
    def latent_dim(self) -> int:
        return 2 * self.k

    @property
    def bandwidth_ratio(self) -> float:
        return self.k / self.n

    @property
    def feature_dim(self) -> int:
        return self.channel_widths[-1]

    @property
    def bottleneck_shape(self) -> Tuple[int, int, int]:
        _, h, w = self.image_shape
        return self.channel_widths[-1], h // 4, w // 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["compression_ratio"] = str(self.compression_ratio)
        return d


class JsccEncoder(Module):
    """
    conv(3->w1, /2) -> LeakyReLU -> conv(w1->w2, /2) -> LeakyReLU -> [feature tap] -> dense -> 2k.
    """

    def __init__(self, cfg: JsccConfig, rng: np.random.Generator) -> None:
        super().__init__("encoder")
        w1, w2 = cfg.channel_widths
        self.cfg = cfg
        self.conv1 = self.add_module("conv1", Conv2d(3, w1, KERNEL, STRIDE, PADDING, rng, name="conv1"))
        self.conv2 = self.add_module("conv2", Conv2d(w1, w2, KERNEL, STRIDE, PADDING, rng, name="conv2"))
        flat = int(np.prod(cfg.bottleneck_shape)) + (1 if cfg.snr_conditioning else 0)
        self.head = self.add_module("head", Dense(flat, cfg.latent_dim, rng, name="head"))
        self.input_shapes = (cfg.image_shape, (1,))

    def activation(self, images: Tensor) -> Tensor:
        """Last convolutional activation map, the point features are tapped from."""
        slope = self.cfg.leaky_slope
        h = T.leaky_relu(self.conv1(images), slope)
        return T.leaky_relu(self.conv2(h), slope)

    def encode_with_features(self, images: Tensor, snr_column: Tensor) -> Tuple[Tensor, Tensor]:
        """
        :return: (latent of shape (N, 2k), pooled features of shape (N, C)) from one forward pass.
        """
        act = self.activation(images)
        flat = T.reshape(act, (act.shape[0], -1))
        if self.cfg.snr_conditioning:
            flat = T.concat([flat, snr_column], axis=1)
        return self.head(flat), T.spatial_mean_pool(act)

    def forward(self, images: Tensor, snr_column: Tensor) -> Tensor:
        latent, _ = self.encode_with_features(images, snr_column)
        return latent


class JsccDecoder(Module):
    """
    dense(2k -> w2*H/4*W/4) -> LeakyReLU -> deconv(w2->w1, x2) -> LeakyReLU -> deconv(w1->3, x2) -> sigmoid.
    """

    def __init__(self, cfg: JsccConfig, rng: np.random.Generator) -> None:
        super().__init__("decoder")
        w1, w2 = cfg.channel_widths
        self.cfg = cfg
        extra = 1 if cfg.snr_conditioning else 0
        self.head = self.add_module("head", Dense(cfg.latent_dim + extra, int(np.prod(cfg.bottleneck_shape)), rng,
                                                  name="head"))
        self.deconv1 = self.add_module("deconv1", ConvTranspose2d(w2, w1, KERNEL, STRIDE, PADDING, rng,
                                                                  name="deconv1"))
        self.deconv2 = self.add_module("deconv2", ConvTranspose2d(w1, 3, KERNEL, STRIDE, PADDING, rng,
                                                                  name="deconv2"))
        self.input_shapes = ((cfg.latent_dim,), (1,))

    def forward(self, received: Tensor, snr_column: Tensor) -> Tensor:
        slope = self.cfg.leaky_slope
        x = received
        if self.cfg.snr_conditioning:
            x = T.concat([x, snr_column], axis=1)
        h = T.leaky_relu(self.head(x), slope)
        h = T.reshape(h, (received.shape[0], *self.cfg.bottleneck_shape))
        h = T.leaky_relu(self.deconv1(h), slope)
        return T.sigmoid(self.deconv2(h))


class JsccModel(Module):
    """Encoder/decoder pair; ``params()`` is theta = {alpha, beta} in that order."""

    def __init__(self, cfg: JsccConfig, rng: np.random.Generator) -> None:
        super().__init__("jscc")
        self.cfg = cfg
        self.encoder = self.add_module("encoder", JsccEncoder(cfg, rng))
        self.decoder = self.add_module("decoder", JsccDecoder(cfg, rng))

    def forward(self, images: Tensor, snr_column: Tensor) -> Tensor:
        return self.decoder(self.encoder(images, snr_column), snr_column)


def snr_column(snr_db: float, batch: int) -> Tensor:
    """The conditioning input: snr_db / 10 repeated once per sample."""
    return Tensor(np.full((batch, 1), float(snr_db) / 10.0))


def _batched(images: Tensor, cfg: JsccConfig) -> Tuple[Tensor, bool]:
    if images.shape == cfg.image_shape:
        return T.reshape(images, (1, *cfg.image_shape)), True
    if images.ndim != 4 or tuple(images.shape[1:]) != cfg.image_shape:
        raise ConfigurationError(f"Expected image shape {cfg.image_shape} or a batch of them, got {images.shape}")
    return images, False


def encode(encoder: JsccEncoder, images: Tensor, snr_db: float) -> Tensor:
    """
    Map image(s) to 2k channel reals, not yet power-normalized.

    :param encoder: Encoder graph.
    :param images: (3, H, W) or (N, 3, H, W), pixels in [0, 1].
    :param snr_db: Channel SNR the codec is conditioned on.
    :return: (2k,) for a single image, (N, 2k) for a batch.
    :raises ConfigurationError: On a wrong image shape.
    """
    batch, single = _batched(images, encoder.cfg)
    latent = forward(encoder, batch, snr_column(snr_db, batch.shape[0]))
    return T.reshape(latent, (encoder.cfg.latent_dim,)) if single else latent


def decode(decoder: JsccDecoder, received: Tensor, snr_db: float) -> Tensor:
    """
    Map 2k received reals back to image(s) with pixels in (0, 1).

    :raises ConfigurationError: On a length mismatch.
    """
    cfg = decoder.cfg
    single = received.ndim == 1
    if single:
        if received.shape[0] != cfg.latent_dim:
            raise ConfigurationError(f"Decoder expects {cfg.latent_dim} values, got {received.shape[0]}")
        received = T.reshape(received, (1, cfg.latent_dim))
    batch = received.shape[0]
    out = forward(decoder, received, snr_column(snr_db, batch))
    return T.reshape(out, cfg.image_shape) if single else out


def extract_feature(encoder: JsccEncoder, images: Tensor) -> Tensor:
    """
    f_theta: spatial mean of the last convolutional activation.

    :return: (C,) for a single image, (N, C) for a batch.
    """
    batch, single = _batched(images, encoder.cfg)
    pooled = T.spatial_mean_pool(encoder.activation(batch))
    return T.reshape(pooled, (encoder.cfg.feature_dim,)) if single else pooled


def mean_feature(encoder: JsccEncoder, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """
    Arithmetic mean of per-image features over a dataset, accumulated in index order.

    :param images: Array (D, 3, H, W).
    :return: Array (C,).
    """
    total = np.zeros(encoder.cfg.feature_dim, dtype=np.float64)
    with no_tape():
        for start in range(0, len(images), batch_size):
            feats = extract_feature(encoder, Tensor(images[start:start + batch_size])).data
            for row in feats:
                total += row
    return (total / len(images)).astype(T.get_default_dtype())


def attention_complexity(h: int, w: int, channels: int, window: int) -> Tuple[int, int]:
    """
    Operation counts of global and window-based multi-head self-attention.

    MSA = 4hwC^2 + 2(hw)^2 C and W-MSA = 4hwC^2 + 2M^2 hwC, in exact integer arithmetic.

    :param h: Patch rows.
    :param w: Patch columns.
    :param channels: Embedding width C.
    :param window: Window side M in patches.
    :return: (flops_msa, flops_wmsa).
    :raises ConfigurationError: If any argument is below 1.
    """
    args = {"h": h, "w": w, "C": channels, "M": window}
    for name, value in args.items():
        if int(value) != value or value < 1:
            raise ConfigurationError(f"{name} must be a positive integer; received: {value}")
    h, w, c, m = (int(v) for v in (h, w, channels, window))
    hw = h * w
    shared = 4 * hw * c * c
    return shared + 2 * hw * hw * c, shared + 2 * m * m * hw * c


def parameter_count(model: Module) -> int:
    return model.params().total_count
