"""
Multi-domain image sources: synthetic style generators, PPM folders, client partitioning.

Images are float arrays of shape (3, H, W) with pixels in [0, 1]; datasets stack them into (D, 3, H, W).
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from feddom.tensor import get_default_dtype
from feddom.utils import (
    STREAM_DATA, STREAM_PARTITION, ConfigurationError, PartitionError, derive_rng, stable_hash
)

logger = logging.getLogger(__name__)

DOMAIN_ORDER = ("photo", "art", "cartoon", "sketch")
VALID_IMAGE_EXTENSIONS = {".ppm"}
LUMA = np.array([0.299, 0.587, 0.114])
TEST_FRACTION_MODULUS = 5  # one index in five goes to the test split

Generator = Callable[[np.random.Generator, int, int], np.ndarray]
SYNTHETIC_GENERATORS: Dict[str, Generator] = {}


def register_generator(name: str) -> Callable[[Generator], Generator]:
    """Register a synthetic style generator under a domain name."""
    def wrap(fn: Generator) -> Generator:
        SYNTHETIC_GENERATORS[name] = fn
        return fn
    return wrap


def domain_sort_key(name: str) -> Tuple[int, str]:
    """Declared order (photo, art, cartoon, sketch) first, user-defined domains after, by name."""
    return (DOMAIN_ORDER.index(name), "") if name in DOMAIN_ORDER else (len(DOMAIN_ORDER), name)


# ------------------------------------------------------------------
# Synthetic domains
# ------------------------------------------------------------------
def _grid(h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")
    return ys, xs


@register_generator("photo")
def _photo(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    ys, xs = _grid(h, w)
    base = rng.uniform(0.35, 0.65, size=(3, 1, 1))
    slope = rng.uniform(-0.15, 0.15, size=(3, 2, 1, 1))
    img = base + slope[:, 0] * (ys - 0.5) + slope[:, 1] * (xs - 0.5)
    cy, cx = rng.uniform(0.2, 0.8, size=2)
    blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * rng.uniform(0.05, 0.2) ** 2))
    img = img + rng.uniform(-0.12, 0.12, size=(3, 1, 1)) * blob
    img = img + rng.normal(0.0, 0.03, size=(3, h, w))
    return np.clip(img, 0.0, 1.0)


@register_generator("cartoon")
def _cartoon(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    regions = int(rng.integers(3, 7))
    seeds = rng.uniform(0.0, 1.0, size=(regions, 2))
    palette = rng.uniform(0.6, 1.0, size=(regions, 3))
    ys, xs = _grid(h, w)
    dist = (ys[None] - seeds[:, 0, None, None]) ** 2 + (xs[None] - seeds[:, 1, None, None]) ** 2
    labels = np.argmin(dist, axis=0)
    img = palette[labels].transpose(2, 0, 1)
    edge = np.zeros((h, w), dtype=bool)
    edge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    edge[:-1, :] |= labels[:-1, :] != labels[1:, :]
    img[:, edge] = 0.02
    return img


@register_generator("art")
def _art(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    ys, xs = _grid(h, w)
    texture = np.zeros((h, w))
    for _ in range(3):
        freq = rng.uniform(2.0, 9.0)
        angle = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        texture += np.sin(2 * np.pi * freq * (np.cos(angle) * xs + np.sin(angle) * ys) + phase)
    t = (texture / 3.0 + 1.0) / 2.0
    palette = rng.uniform(0.0, 0.5, size=(3, 3))
    low = np.clip(1.0 - 2.0 * t, 0.0, 1.0)
    high = np.clip(2.0 * t - 1.0, 0.0, 1.0)
    mid = 1.0 - low - high
    img = palette[0][:, None, None] * low + palette[1][:, None, None] * mid + palette[2][:, None, None] * high
    return np.clip(img, 0.0, 1.0)


@register_generator("sketch")
def _sketch(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    gray = np.clip(0.97 + rng.normal(0.0, 0.01, size=(h, w)), 0.92, 1.0)
    budget = int(0.15 * h * w)
    inked = 0
    for _ in range(int(rng.integers(3, 8))):
        y0, x0, y1, x1 = rng.uniform(0, 1, size=4) * [h - 1, w - 1, h - 1, w - 1]
        steps = int(max(abs(y1 - y0), abs(x1 - x0))) + 1
        ink = rng.uniform(0.05, 0.35)
        for s in np.linspace(0.0, 1.0, steps):
            y, x = int(round(y0 + s * (y1 - y0))), int(round(x0 + s * (x1 - x0)))
            if gray[y, x] > 0.9:
                if inked >= budget:
                    break
                inked += 1
            gray[y, x] = ink
    return np.repeat(gray[None], 3, axis=0)


def gen_synthetic_domain(domain: str, count: int, size: Tuple[int, int], seed: int, start: int = 0) -> np.ndarray:
    """
    Generate ``count`` images of a synthetic style; image i depends only on (domain, seed, start + i).

    :param domain: Registered style name (photo, art, cartoon, sketch or user-registered).
    :param count: Number of images, at least 1.
    :param size: (H, W), each at least 16.
    :param seed: Dataset seed.
    :param start: Index of the first image.
    :return: Array (count, 3, H, W).
    :raises ConfigurationError: On an unknown domain or invalid sizes.
    """
    if domain not in SYNTHETIC_GENERATORS:
        raise ConfigurationError(f"No synthetic generator registered for domain '{domain}'")
    if count < 1:
        raise ConfigurationError(f"count must be at least 1; received: {count}")
    h, w = size
    if h < 16 or w < 16:
        raise ConfigurationError(f"Synthetic images must be at least 16x16; received: {h}x{w}")
    gen = SYNTHETIC_GENERATORS[domain]
    images = [gen(derive_rng(seed, STREAM_DATA, stable_hash(domain), start + i), h, w) for i in range(count)]
    return np.stack(images).astype(get_default_dtype())


def luminance(images: np.ndarray) -> np.ndarray:
    """Per-pixel luminance of (..., 3, H, W) images."""
    return np.tensordot(np.moveaxis(images, -3, -1), LUMA, axes=([-1], [0]))


def intensity_histogram(images: np.ndarray, bins: int = 16) -> np.ndarray:
    """Normalized luminance histogram per image, shape (N, bins)."""
    lum = luminance(images).reshape(len(images), -1)
    return np.stack([np.histogram(row, bins=bins, range=(0.0, 1.0))[0] / row.size for row in lum])


# ------------------------------------------------------------------
# PPM ingestion
# ------------------------------------------------------------------
@dataclass
class LoadReport:
    images: np.ndarray
    files: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)


def _ppm_tokens(blob: bytes, count: int, name: str) -> Tuple[List[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ConfigurationError(f"{name}: truncated PPM header")
        tokens.append(blob[start:pos])
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise ConfigurationError(f"{name}: missing whitespace after PPM header")
    return tokens, pos + 1


def decode_ppm(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    """
    Decode a binary P6 PPM into a (3, H, W) array scaled by maxval to [0, 1].

    :raises ConfigurationError: On a malformed header or short raster, naming the file.
    """
    tokens, offset = _ppm_tokens(blob, 4, name)
    if tokens[0] != b"P6":
        raise ConfigurationError(f"{name}: not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise ConfigurationError(f"{name}: non-numeric PPM header field") from e
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ConfigurationError(f"{name}: invalid PPM dimensions {width}x{height} or maxval {maxval}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    expected = width * height * 3 * dtype.itemsize
    raster = blob[offset:offset + expected]
    if len(raster) < expected:
        raise ConfigurationError(f"{name}: raster has {len(raster)} bytes, expected {expected}")
    pixels = np.frombuffer(raster, dtype=dtype).reshape(height, width, 3).astype(np.float64) / maxval
    return pixels.transpose(2, 0, 1)


def encode_ppm(image: np.ndarray) -> bytes:
    """Encode a (3, H, W) [0, 1] image as P6 with maxval 255."""
    _, h, w = image.shape
    raster = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + raster.tobytes()


def fit_image(image: np.ndarray, size: Optional[Tuple[int, int]]) -> np.ndarray:
    """Center-crop to the target aspect ratio, then nearest-neighbour resize to (H, W)."""
    if size is None:
        return image
    th, tw = size
    _, h, w = image.shape
    if (h, w) == (th, tw):
        return image
    if h * tw > w * th:
        ch, cw = max(1, round(w * th / tw)), w
    else:
        ch, cw = h, max(1, round(h * tw / th))
    top, left = (h - ch) // 2, (w - cw) // 2
    crop = image[:, top:top + ch, left:left + cw]
    rows = np.minimum((np.arange(th) * ch) // th, ch - 1)
    cols = np.minimum((np.arange(tw) * cw) // tw, cw - 1)
    return crop[:, rows][:, :, cols]


def load_ppm_dir(path: Path, domain: str, size: Optional[Tuple[int, int]] = None) -> LoadReport:
    """
    Load every ``.ppm`` file of a directory in lexicographic order.

    Files with other extensions are skipped with a warning and listed in the report.

    :param path: Directory of P6 files.
    :param domain: Domain label, used in diagnostics.
    :param size: Target (H, W); None keeps native sizes (all files must then agree).
    :raises FileNotFoundError: If the directory does not exist.
    :raises ConfigurationError: On a malformed PPM or a directory without PPM files.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"Invalid dataset directory for domain '{domain}': {path}")
    report = LoadReport(images=np.zeros((0, 3, 0, 0)))
    images = []
    for entry in sorted(path.iterdir(), key=lambda p: p.name):
        if not entry.is_file():
            continue
        if entry.suffix.lower() not in VALID_IMAGE_EXTENSIONS:
            logger.warning(f"Skipping unsupported file: {entry.name}")
            report.skipped.append(entry.name)
            continue
        images.append(fit_image(decode_ppm(entry.read_bytes(), entry.name), size))
        report.files.append(entry.name)
    if not images:
        raise ConfigurationError(f"No PPM images found for domain '{domain}' in {path}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ConfigurationError(f"Images of domain '{domain}' differ in size {sorted(shapes)}; set an image_size")
    report.images = np.stack(images).astype(get_default_dtype())
    return report


# ------------------------------------------------------------------
# Dataset manifest
# ------------------------------------------------------------------
@dataclass
class DomainSource:
    """
    :param name: Domain label.
    :param source: "synthetic" or "dir".
    :param count: Number of synthetic images to generate (train and test together).
    :param path: Directory of PPM files when ``source == "dir"``.
    """
    name: str
    source: str = "synthetic"
    count: Optional[int] = None
    path: Optional[str] = None

    def __post_init__(self) -> None:
        if self.source not in ("synthetic", "dir"):
            raise ConfigurationError(f"Domain '{self.name}': source must be 'synthetic' or 'dir'")
        if self.source == "synthetic" and (self.count is None or self.count < 1):
            raise ConfigurationError(f"Domain '{self.name}': synthetic source needs count >= 1")
        if self.source == "dir" and not self.path:
            raise ConfigurationError(f"Domain '{self.name}': dir source needs a path")


@dataclass
class DatasetManifest:
    domains: List[DomainSource] = field(default_factory=lambda: [
        DomainSource(name, "synthetic", 200) for name in DOMAIN_ORDER])
    image_size: Tuple[int, int] = (32, 32)
    seed: int = 0

    def __post_init__(self) -> None:
        self.domains = [d if isinstance(d, DomainSource) else DomainSource(**d) for d in self.domains]
        self.image_size = tuple(int(v) for v in self.image_size)
        names = [d.name for d in self.domains]
        if not names or len(set(names)) != len(names):
            raise ConfigurationError(f"Manifest needs unique, non-empty domain names; received: {names}")

    @property
    def domain_names(self) -> List[str]:
        return [d.name for d in self.domains]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


def load_manifest(path: Path) -> DatasetManifest:
    try:
        raw = json.loads(Path(path).read_text())
        return DatasetManifest(**raw)
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise ConfigurationError(f"Cannot read dataset manifest {path}: {e}") from e


def save_manifest(manifest: DatasetManifest, path: Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2))


# ------------------------------------------------------------------
# Train/test split and partitioning
# ------------------------------------------------------------------
@dataclass
class DomainData:
    name: str
    train: np.ndarray
    test: np.ndarray


def is_test_index(domain: str, index: int) -> bool:
    """Deterministic 80/20 split by a hash of (domain, index)."""
    return stable_hash(f"{domain}:{index}") % TEST_FRACTION_MODULUS == 0


def split_indices(domain: str, count: int) -> Tuple[List[int], List[int]]:
    train = [i for i in range(count) if not is_test_index(domain, i)]
    test = [i for i in range(count) if is_test_index(domain, i)]
    return train, test


def _synthetic_until(domain: str, train_needed: int, size: Tuple[int, int], seed: int) -> DomainData:
    train_idx, test_idx, index = [], [], 0
    while len(train_idx) < train_needed or not test_idx:
        (test_idx if is_test_index(domain, index) else train_idx).append(index)
        index += 1
    images = gen_synthetic_domain(domain, index, size, seed)
    return DomainData(domain, images[train_idx[:train_needed]], images[test_idx])


def build_domain_data(manifest: DatasetManifest, train_counts: Optional[Dict[str, int]] = None) \
        -> Dict[str, DomainData]:
    """
    Materialize every domain and split it 80/20 into train and test.

    :param manifest: Dataset manifest.
    :param train_counts: Exact training-pool sizes required by an explicit partition table. Synthetic
        domains are generated until the pool is met; directory domains must hold at least that many.
    :return: Mapping domain -> DomainData, in manifest order.
    """
    data = {}
    for src in manifest.domains:
        needed = None if train_counts is None else train_counts.get(src.name)
        if src.source == "synthetic":
            if needed is not None:
                data[src.name] = _synthetic_until(src.name, needed, manifest.image_size, manifest.seed)
                continue
            images = gen_synthetic_domain(src.name, src.count, manifest.image_size, manifest.seed)
        else:
            images = load_ppm_dir(Path(src.path), src.name, manifest.image_size).images
        train_idx, test_idx = split_indices(src.name, len(images))
        train, test = images[train_idx], images[test_idx]
        if needed is not None:
            if needed > len(train):
                raise PartitionError(f"Domain '{src.name}' has {len(train)} training images, table needs {needed}")
            if needed < len(train):
                logger.warning(f"Domain '{src.name}': using {needed} of {len(train)} training images")
            train = train[:needed]
        if len(test) == 0:
            raise ConfigurationError(f"Domain '{src.name}' has no test images; provide more samples")
        data[src.name] = DomainData(src.name, train, test)
    return data


def largest_remainder(proportions: np.ndarray, total: int) -> List[int]:
    """Round ``proportions * total`` to integers summing exactly to ``total`` (ties to lower index)."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(int)
    remainder = raw - counts
    order = sorted(range(len(raw)), key=lambda i: (-remainder[i], i))
    for i in order[:total - int(counts.sum())]:
        counts[i] += 1
    return [int(c) for c in counts]


def dirichlet_partition(pool: Dict[str, int], clients_per_domain: Dict[str, int], alpha: float, seed: int,
                        max_retries: int = 100) -> Dict[str, List[int]]:
    """
    Split each domain's pool across that domain's clients with Dirichlet(alpha) proportions.

    :param pool: Training samples per domain.
    :param clients_per_domain: Number of clients per domain.
    :param alpha: Concentration, > 0.
    :param seed: Partition seed; each domain draws from its own stream.
    :param max_retries: Redraws allowed when a client would receive no samples.
    :return: Mapping domain -> per-client counts summing to the pool.
    :raises PartitionError: If every retry leaves some client empty.
    """
    if not alpha > 0:
        raise ConfigurationError(f"alpha must be positive; received: {alpha}")
    counts = {}
    for domain, total in pool.items():
        clients = clients_per_domain.get(domain, 0)
        if clients < 1:
            raise ConfigurationError(f"Domain '{domain}' needs at least one client")
        if total < clients:
            raise PartitionError(f"Domain '{domain}' has {total} samples for {clients} clients; use a larger pool")
        rng = derive_rng(seed, STREAM_PARTITION, stable_hash(domain))
        for _ in range(max_retries):
            sizes = largest_remainder(rng.dirichlet([alpha] * clients), total)
            if min(sizes) >= 1:
                counts[domain] = sizes
                break
        else:
            raise PartitionError(f"Dirichlet partition of '{domain}' left a client empty after {max_retries} "
                                 f"retries; use a larger pool or a larger alpha")
    return counts


def standard_partition() -> Dict[str, List[int]]:
    """Training samples per client, ten clients over four domains."""
    return {"photo": [43, 358], "cartoon": [87, 93, 383], "art": [70, 303, 119], "sketch": [827, 116]}


def skewed_partition() -> Dict[str, List[int]]:
    """Training samples per client under strong cross-domain imbalance."""
    return {"photo": [210, 58], "cartoon": [82, 61, 232], "art": [223, 85, 20], "sketch": [666, 906]}


PARTITION_TABLES = {"standard": standard_partition, "skewed": skewed_partition}


def scale_table(table: Dict[str, List[int]], factor: float) -> Dict[str, List[int]]:
    """Shrink a count table for desk-scale runs, keeping every client at least one sample."""
    return {d: [max(1, int(round(c * factor))) for c in counts] for d, counts in table.items()}


@dataclass
class ClientDataset:
    client_id: int
    domain: str
    images: np.ndarray

    @property
    def count(self) -> int:
        return int(len(self.images))


def assign_clients(domain_data: Dict[str, DomainData], counts: Dict[str, List[int]], seed: int) \
        -> List[ClientDataset]:
    """
    Deal each domain's shuffled training pool into consecutive client slices.

    Client ids are assigned in manifest domain order, then in table order within a domain.
    """
    clients, next_id = [], 0
    for domain, data in domain_data.items():
        if domain not in counts:
            raise ConfigurationError(f"Partition has no clients for domain '{domain}'")
        sizes = counts[domain]
        if sum(sizes) > len(data.train):
            raise PartitionError(f"Domain '{domain}': partition needs {sum(sizes)} samples, pool has "
                                 f"{len(data.train)}")
        order = derive_rng(seed, STREAM_PARTITION, stable_hash(domain), 1).permutation(len(data.train))
        offset = 0
        for size in sizes:
            clients.append(ClientDataset(next_id, domain, data.train[order[offset:offset + size]]))
            offset += size
            next_id += 1
    unknown = set(counts) - set(domain_data)
    if unknown:
        raise ConfigurationError(f"Partition names unknown domains: {sorted(unknown)}")
    return clients


def batch_iter(ds: ClientDataset, batch: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """
    One shuffled pass over a client's images; the last partial batch is kept.

    :param ds: Client dataset.
    :param batch: Batch size, >= 1.
    :param rng: Client stream used for the shuffle.
    """
    if batch < 1:
        raise ConfigurationError(f"batch must be at least 1; received: {batch}")
    order = rng.permutation(ds.count)
    for start in range(0, ds.count, batch):
        yield ds.images[order[start:start + batch]]


def materialize_synthetic(manifest: DatasetManifest, out_dir: Path) -> DatasetManifest:
    """
    Write every synthetic domain of ``manifest`` as PPM files and return a manifest pointing at them.
    """
    out_dir = Path(out_dir)
    domains = []
    for src in manifest.domains:
        if src.source != "synthetic":
            domains.append(src)
            continue
        folder = out_dir / src.name
        folder.mkdir(parents=True, exist_ok=True)
        images = gen_synthetic_domain(src.name, src.count, manifest.image_size, manifest.seed)
        for idx, image in enumerate(images):
            (folder / f"{src.name}_{idx:05d}.ppm").write_bytes(encode_ppm(image))
        logger.info(f"Wrote {len(images)} '{src.name}' images to {folder}")
        domains.append(DomainSource(src.name, "dir", path=str(folder.resolve())))
    written = DatasetManifest(domains=domains, image_size=manifest.image_size, seed=manifest.seed)
    save_manifest(written, out_dir / "manifest.json")
    return written


def domain_pool_sizes(domain_data: Dict[str, DomainData]) -> Dict[str, int]:
    return {name: len(d.train) for name, d in domain_data.items()}


def check_counts(counts: Dict[str, List[int]], domains: Sequence[str]) -> None:
    for domain in domains:
        if not counts.get(domain):
            raise ConfigurationError(f"Domain '{domain}' has no clients in the partition")
        if min(counts[domain]) < 1:
            raise ConfigurationError(f"Domain '{domain}' has an empty client in the partition")
