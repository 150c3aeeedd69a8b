import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from feddom.channel import CHANNEL_KINDS, ChannelConfig
from feddom.data import (PARTITION_TABLES, DatasetManifest, DomainData, build_domain_data,
                         check_counts, dirichlet_partition, domain_pool_sizes, scale_table)
from feddom.fl_strategy import StrategyConfig
from feddom.jscc_model import JsccConfig
from feddom.tensor import _DTYPES
from feddom.utils import ConfigurationError

logger = logging.getLogger(__name__)

SCHEMA = "feddom-config/1"
PARTITION_KINDS = ("standard", "skewed", "explicit", "dirichlet")


@dataclass
class PartitionConfig:
    """
    How training samples are dealt to clients.

    :param kind: "standard" / "skewed" (fixed per-client counts, multiplied by ``scale``), "explicit" (``counts``)
        or "dirichlet" (``clients_per_domain`` clients per domain with Dirichlet(``alpha``) shares).
    """
    kind: str = "skewed"
    scale: float = 0.1
    counts: Optional[Dict[str, List[int]]] = None
    clients_per_domain: Dict[str, int] = field(
        default_factory=lambda: {"photo": 2, "art": 3, "cartoon": 3, "sketch": 2})
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in PARTITION_KINDS:
            raise ConfigurationError(f"partition kind must be one of {PARTITION_KINDS}; received: {self.kind}")
        if not self.scale > 0:
            raise ConfigurationError(f"partition scale must be positive; received: {self.scale}")
        if self.kind == "explicit" and not self.counts:
            raise ConfigurationError("explicit partition needs counts")
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be positive; received: {self.alpha}")

    def table(self) -> Optional[Dict[str, List[int]]]:
        """Fixed per-client counts, or None for Dirichlet partitions."""
        if self.kind == "explicit":
            return {d: [int(c) for c in counts] for d, counts in self.counts.items()}
        if self.kind in PARTITION_TABLES:
            table = PARTITION_TABLES[self.kind]()
            return table if self.scale == 1.0 else scale_table(table, self.scale)
        return None


@dataclass
class EvalConfig:
    """
    :param snr_points_db: Evaluation SNR grid.
    :param eval_every: Evaluate every N rounds (the last round is always evaluated).
    :param convergence_snr_db: Extra per-round evaluation point for convergence curves.
    :param channel: Evaluation channel kind; None uses the training channel.
    """
    snr_points_db: List[float] = field(default_factory=lambda: [1.0, 4.0, 7.0, 10.0, 13.0])
    eval_every: int = 10
    convergence_snr_db: Optional[float] = 5.0
    channel: Optional[str] = None
    ms_ssim_scales: int = 3
    batch_size: int = 64

    def __post_init__(self) -> None:
        if not self.snr_points_db:
            raise ConfigurationError("snr_points_db must not be empty")
        self.snr_points_db = [float(s) for s in self.snr_points_db]
        if self.eval_every < 1:
            raise ConfigurationError(f"eval_every must be >= 1; received: {self.eval_every}")
        if self.channel is not None and self.channel not in CHANNEL_KINDS:
            raise ConfigurationError(f"eval channel must be one of {CHANNEL_KINDS}; received: {self.channel}")
        if self.batch_size < 1:
            raise ConfigurationError(f"eval batch_size must be >= 1; received: {self.batch_size}")


@dataclass
class ExperimentConfig:
    """Everything that determines a run; (config, seed) fixes every output byte."""
    name: str = "feddom"
    seed: int = 0
    dataset: DatasetManifest = field(default_factory=DatasetManifest)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: JsccConfig = field(default_factory=JsccConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/feddom"
    threads: int = 1
    checkpoint_every: int = 10
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.threads < 1:
            raise ConfigurationError(f"threads must be >= 1; received: {self.threads}")
        if self.checkpoint_every < 1:
            raise ConfigurationError(f"checkpoint_every must be >= 1; received: {self.checkpoint_every}")
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}; received: {self.dtype}")
        if tuple(self.dataset.image_size) != tuple(self.model.image_shape[1:]):
            raise ConfigurationError(f"Dataset image size {self.dataset.image_size} does not match model input "
                                     f"{self.model.image_shape}")

    @property
    def eval_channel(self) -> ChannelConfig:
        if self.eval.channel is None or self.eval.channel == self.channel.kind:
            return self.channel
        return ChannelConfig(kind=self.eval.channel, snr_set_db=self.channel.snr_set_db,
                             transmit_power=self.channel.transmit_power, equalize=self.channel.equalize)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "name": self.name,
            "seed": self.seed,
            "dataset": self.dataset.to_dict(),
            "partition": asdict(self.partition),
            "model": self.model.to_dict(),
            "channel": self.channel.to_dict(),
            "strategy": self.strategy.to_dict(),
            "eval": asdict(self.eval),
            "output_dir": self.output_dir,
            "threads": self.threads,
            "checkpoint_every": self.checkpoint_every,
            "dtype": self.dtype,
        }

    def with_strategy(self, **changes) -> "ExperimentConfig":
        """Copy with some strategy fields replaced (used by comparisons and sweeps)."""
        raw = self.to_dict()
        raw["strategy"].update({("lambda" if k == "lam" else k): v for k, v in changes.items()})
        return config_from_dict(raw)


def _section(cls, raw, section: str):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"Section '{section}' must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigurationError(f"Unknown keys in '{section}': {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as e:
        raise ConfigurationError(f"Invalid '{section}' section: {e}") from e


def config_from_dict(raw: dict) -> ExperimentConfig:
    """
    Build an ExperimentConfig from its JSON form.

    :raises ConfigurationError: On a wrong schema tag, unknown keys or invalid values.
    """
    if not isinstance(raw, dict):
        raise ConfigurationError("Config must be a JSON object")
    raw = dict(raw)
    schema = raw.pop("schema", None)
    if schema != SCHEMA:
        raise ConfigurationError(f"Config schema must be '{SCHEMA}'; received: {schema}")
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - top
    if unknown:
        raise ConfigurationError(f"Unknown config keys: {sorted(unknown)}")

    kwargs = {k: v for k, v in raw.items() if k not in ("dataset", "partition", "model", "channel", "strategy",
                                                           "eval")}
    if "dataset" in raw:
        kwargs["dataset"] = _section(DatasetManifest, raw["dataset"], "dataset")
    if "partition" in raw:
        kwargs["partition"] = _section(PartitionConfig, raw["partition"], "partition")
    if "model" in raw:
        kwargs["model"] = _section(JsccConfig, raw["model"], "model")
    if "channel" in raw:
        kwargs["channel"] = _section(ChannelConfig, raw["channel"], "channel")
    if "strategy" in raw:
        strategy_raw = raw["strategy"]
        if not isinstance(strategy_raw, dict):
            raise ConfigurationError("Section 'strategy' must be an object")
        allowed = {f.name for f in fields(StrategyConfig)} - {"lam"} | {"lambda"}
        unknown = set(strategy_raw) - allowed
        if unknown:
            raise ConfigurationError(f"Unknown keys in 'strategy': {sorted(unknown)}")
        kwargs["strategy"] = StrategyConfig.from_dict(strategy_raw)
    if "eval" in raw:
        kwargs["eval"] = _section(EvalConfig, raw["eval"], "eval")
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"Invalid config: {e}") from e


def load_config(path: Path) -> ExperimentConfig:
    """
    Read a JSON experiment config.

    :raises ConfigurationError: If the file is missing, unreadable or invalid; the message names the path.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Config file '{path}' does not exist")
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot parse config file '{path}': {e}") from e
    try:
        return config_from_dict(raw)
    except ConfigurationError as e:
        raise ConfigurationError(f"{path}: {e}") from e


def save_config(cfg: ExperimentConfig, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2))


def default_config() -> ExperimentConfig:
    """Desk-scale defaults: 32x32 images, four synthetic domains, ten clients, 60 rounds."""
    return ExperimentConfig()


def resolve_partition(cfg: ExperimentConfig) -> Tuple[Dict[str, DomainData], Dict[str, List[int]]]:
    """
    Materialize the dataset and the per-client counts it is dealt into.

    Fixed tables request exactly the training-pool size they need per domain.
    """
    table = cfg.partition.table()
    names = cfg.dataset.domain_names
    if table is not None:
        check_counts(table, names)
        extra = set(table) - set(names)
        if extra:
            raise ConfigurationError(f"Partition names domains missing from the dataset: {sorted(extra)}")
        domain_data = build_domain_data(cfg.dataset, {d: sum(table[d]) for d in names})
        return domain_data, {d: table[d] for d in names}

    domain_data = build_domain_data(cfg.dataset)
    counts = dirichlet_partition(domain_pool_sizes(domain_data),
                                 {d: cfg.partition.clients_per_domain.get(d, 0) for d in names},
                                 cfg.partition.alpha, cfg.seed)
    return domain_data, counts

