from pathlib import Path
from typing import List

import numpy as np
import pytest

from feddom import tensor as T
from feddom.channel import ChannelConfig
from feddom.config import EvalConfig, ExperimentConfig, PartitionConfig
from feddom.data import DOMAIN_ORDER, ClientDataset, DatasetManifest, DomainSource, gen_synthetic_domain
from feddom.fl_strategy import StrategyConfig
from feddom.jscc_model import JsccConfig

SMALL_SIZE = (16, 16)


@pytest.fixture(autouse=True)
def restore_dtype():
    """Every test starts from the 32-bit default."""
    T.set_default_dtype("float32")
    yield
    T.set_default_dtype("float32")


@pytest.fixture
def float64() -> None:
    """Switch the package to 64-bit scalars for the duration of a test."""
    T.set_default_dtype("float64")


@pytest.fixture
def small_model_cfg() -> JsccConfig:
    return JsccConfig(image_shape=(3, *SMALL_SIZE), compression_ratio="1/12", channel_widths=[4, 8])


@pytest.fixture
def small_clients() -> List[ClientDataset]:
    """Four clients over three domains, a handful of 16x16 images each."""
    sizes = [("photo", 6), ("photo", 3), ("cartoon", 5), ("sketch", 4)]
    clients = []
    for cid, (domain, count) in enumerate(sizes):
        images = gen_synthetic_domain(domain, count, SMALL_SIZE, seed=7, start=10 * cid)
        clients.append(ClientDataset(cid, domain, images))
    return clients


@pytest.fixture
def tiny_config(tmp_path: Path, small_model_cfg: JsccConfig) -> ExperimentConfig:
    """A two-round, four-domain experiment that runs in seconds."""
    return ExperimentConfig(
        name="tiny",
        seed=3,
        dataset=DatasetManifest(domains=[DomainSource(d, "synthetic", 12) for d in DOMAIN_ORDER],
                                image_size=SMALL_SIZE, seed=1),
        partition=PartitionConfig(kind="explicit", counts={"photo": [3, 2], "art": [4], "cartoon": [3],
                                                           "sketch": [5]}),
        model=small_model_cfg,
        channel=ChannelConfig(kind="awgn", snr_set_db=[1.0, 5.0, 9.0]),
        strategy=StrategyConfig(kind="feddom", rounds=2, batch_size=4, lr=0.01, trace_probe=True),
        eval=EvalConfig(snr_points_db=[1.0, 13.0], eval_every=1, convergence_snr_db=5.0, batch_size=8),
        output_dir=str(tmp_path / "run"),
        threads=1,
        checkpoint_every=1,
    )


def random_params_like(params, rng: np.random.Generator, scale: float = 1.0):
    return params.unflatten(rng.normal(0.0, scale, size=params.total_count).astype(params.flatten().dtype))
