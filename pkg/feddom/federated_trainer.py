import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from feddom import tensor as T
from feddom.channel import ChannelConfig, power_normalize, sample_snr, transmit
from feddom.data import ClientDataset, batch_iter, domain_sort_key
from feddom.fl_strategy import (ClientUpdate, FederatedStrategy, LocalStepContext, build_global_representation,
                                feature_dispersion, generalization_loss, param_variance)
from feddom.jscc_model import JsccConfig, JsccModel, extract_feature, mean_feature, snr_column
from feddom.modules import ModelParams, sgd_step
from feddom.tensor import ComputationTape, Tensor, no_tape
from feddom.utils import STREAM_INIT, STREAM_PROBE, STREAM_TRAIN, ConfigurationError, DivergenceError, \
    NumericError, derive_rng

logger = logging.getLogger(__name__)


@dataclass
class StepRecord:
    """One local SGD step; step -1 marks the pre-training probe."""
    round: int
    client_id: int
    domain: str
    step: int
    loss: float
    recon_loss: float
    gen_loss: float
    aux_loss: float
    grad_norm_sq: float
    lr: float
    lam: float


@dataclass
class TrainLog:
    client_id: int
    domain: str
    round: int
    steps: List[StepRecord] = field(default_factory=list)
    start_loss: Optional[float] = None
    start_grad_norm_sq: Optional[float] = None

    @property
    def mean_loss(self) -> float:
        return float(np.mean([s.loss for s in self.steps])) if self.steps else float("nan")


@dataclass
class ClientState:
    """
    Server-side view of one simulated client.

    ``params`` and ``feature_acc`` hold the result of the latest local training; ``prev_params`` is the
    previous-round local model kept for contrastive strategies.
    """
    client_id: int
    domain: str
    dataset: ClientDataset
    params: Optional[ModelParams] = None
    feature_acc: Optional[np.ndarray] = None
    prev_params: Optional[ModelParams] = None

    def rng(self, seed: int, round_index: int) -> np.random.Generator:
        return derive_rng(seed, STREAM_TRAIN, self.client_id, round_index)


@dataclass
class ServerState:
    global_params: ModelParams
    global_feature: Optional[np.ndarray] = None
    round: int = 1
    domain_models: Dict[str, ModelParams] = field(default_factory=dict)


@dataclass
class RoundReport:
    round: int
    client_losses: Dict[int, float]
    param_variance: float
    feature_dispersion: float
    diverged: List[int] = field(default_factory=list)
    logs: List[TrainLog] = field(default_factory=list)

    @property
    def mean_loss(self) -> float:
        return float(np.mean(list(self.client_losses.values()))) if self.client_losses else float("nan")


def instantiate(model_cfg: JsccConfig, params: ModelParams) -> JsccModel:
    """Fresh model graph holding a copy of ``params``."""
    model = JsccModel(model_cfg, derive_rng(0, STREAM_INIT))
    model.params().assign(params)
    return model


def _batch_loss(model: JsccModel, images: Tensor, snr_db: float, rng: np.random.Generator,
                channel_cfg: ChannelConfig, strategy: FederatedStrategy, global_feature: Optional[np.ndarray],
                ctx: LocalStepContext) -> Tuple[Tensor, Dict[str, float], Tensor]:
    """
    L_tot for one minibatch, recorded on the active tape.

    :return: (total loss, component values, pooled features (N, C)).
    """
    col = snr_column(snr_db, images.shape[0])
    latent, feats = model.encoder.encode_with_features(images, col)
    received = transmit(power_normalize(latent, channel_cfg.transmit_power), channel_cfg, snr_db, rng)
    recon = model.decoder(received, col)

    recon_loss = T.mse(recon, images)
    total = recon_loss
    parts = {"recon_loss": recon_loss.item(), "gen_loss": 0.0, "aux_loss": 0.0}

    lam = strategy.generalization_weight()
    if global_feature is not None and lam > 0:
        gen = generalization_loss(global_feature, T.mean(feats, axis=0))
        parts["gen_loss"] = gen.item()
        total = T.add(total, T.scale(gen, lam))

    ctx.features = feats
    aux = strategy.auxiliary_loss(ctx)
    if aux is not None:
        parts["aux_loss"] = aux.item()
        total = T.add(total, aux)
    return total, parts, feats


def _reference_features(encoder_model: Optional[JsccModel], images: Tensor) -> Optional[np.ndarray]:
    if encoder_model is None:
        return None
    with no_tape():
        return extract_feature(encoder_model.encoder, images).data


def compute_local_feature(model: JsccModel, dataset: ClientDataset, batch_size: int = 64) -> np.ndarray:
    """F_m = (1/D_m) sum_i f_theta(I_i) with the current (frozen) local model."""
    return mean_feature(model.encoder, dataset.images, batch_size)


def probe_start(model: JsccModel, client: ClientState, strategy: FederatedStrategy, channel_cfg: ChannelConfig,
                global_params: ModelParams, global_feature: Optional[np.ndarray], round_index: int, seed: int,
                reference: Tuple[Optional[JsccModel], Optional[JsccModel]] = (None, None)) -> Tuple[float, float]:
    """
    Full-dataset L_tot and squared gradient norm with the freshly broadcast model, before any SGD step.

    Uses its own random stream so the training stream is left untouched.
    """
    rng = derive_rng(seed, STREAM_PROBE, client.client_id, round_index)
    live = model.params()
    live.zero_grad()
    images_all = client.dataset.images
    total_count = client.dataset.count
    batch = strategy.config.batch_size
    loss = 0.0
    for start in range(0, total_count, batch):
        x = Tensor(images_all[start:start + batch])
        snr = sample_snr(channel_cfg, rng)
        ctx = LocalStepContext(params=live, global_params=global_params, features=None,
                               global_features=_reference_features(reference[0], x),
                               previous_features=_reference_features(reference[1], x))
        weight = x.shape[0] / total_count
        with ComputationTape() as tape:
            batch_total, _, _ = _batch_loss(model, x, snr, rng, channel_cfg, strategy, global_feature, ctx)
            weighted = T.scale(batch_total, weight)
        tape.backward(weighted)
        loss += weighted.item()
    grad_norm_sq = live.grad_norm_sq()
    live.zero_grad()
    return loss, grad_norm_sq


def local_train(client: ClientState, server: ServerState, strategy: FederatedStrategy, channel_cfg: ChannelConfig,
                model_cfg: JsccConfig, seed: int) -> ClientUpdate:
    """
    Train one client for E epochs starting from the broadcast global model.

    Each step: encode, power-normalize, transmit, decode, then one SGD step on
    L_recon + lambda * L_G (+ the strategy's extra term). The local feature is accumulated per step from
    the evolving model unless ``feature_mode`` is "frozen".

    :raises DivergenceError: If any loss or gradient becomes non-finite.
    """
    cfg = strategy.config
    round_index = server.round
    model = instantiate(model_cfg, server.global_params)
    live = model.params()
    global_feature = server.global_feature if strategy.uses_global_feature else None

    global_ref = prev_ref = None
    if strategy.needs_model_history and client.prev_params is not None:
        global_ref = instantiate(model_cfg, server.global_params)
        prev_ref = instantiate(model_cfg, client.prev_params)

    log = TrainLog(client.client_id, client.domain, round_index)
    dataset = client.dataset
    count = dataset.count
    lam = strategy.generalization_weight()
    try:
        if cfg.trace_probe:
            log.start_loss, log.start_grad_norm_sq = probe_start(
                model, client, strategy, channel_cfg, server.global_params, global_feature, round_index, seed,
                (global_ref, prev_ref))
            log.steps.append(StepRecord(round_index, client.client_id, client.domain, -1, log.start_loss,
                                        float("nan"), float("nan"), float("nan"), log.start_grad_norm_sq,
                                        cfg.lr, lam))

        rng = client.rng(seed, round_index)
        feature_acc = np.zeros(model_cfg.feature_dim, dtype=np.float64)
        step = 0
        for _ in range(cfg.local_epochs):
            for batch_images in batch_iter(dataset, cfg.batch_size, rng):
                x = Tensor(batch_images)
                snr = sample_snr(channel_cfg, rng)
                ctx = LocalStepContext(params=live, global_params=server.global_params, features=None,
                                       global_features=_reference_features(global_ref, x),
                                       previous_features=_reference_features(prev_ref, x))
                with ComputationTape() as tape:
                    total, parts, feats = _batch_loss(model, x, snr, rng, channel_cfg, strategy,
                                                      global_feature, ctx)
                loss_value = total.item()
                if not np.isfinite(loss_value):
                    raise NumericError(f"loss is {loss_value}", "local_train")
                for row in feats.data:
                    feature_acc += row / (count * cfg.local_epochs)
                tape.backward(total)
                grad_norm_sq = live.grad_norm_sq()
                sgd_step(live, cfg.lr)
                log.steps.append(StepRecord(round_index, client.client_id, client.domain, step, loss_value,
                                            parts["recon_loss"], parts["gen_loss"], parts["aux_loss"],
                                            grad_norm_sq, cfg.lr, lam))
                step += 1
    except NumericError as e:
        logger.error(f"Client {client.client_id} diverged in round {round_index}: {e}")
        raise DivergenceError(round_index, client.client_id, str(e)) from e

    if cfg.feature_mode == "frozen":
        feature = compute_local_feature(model, dataset, cfg.batch_size)
    else:
        feature = feature_acc.astype(T.get_default_dtype())
    return ClientUpdate(client.client_id, client.domain, count, live.copy(), feature, log)


class FederatedTrainer:
    """
    Runs communication rounds: broadcast, parallel local training, aggregation and global-representation update.
    """

    def __init__(self, model_cfg: JsccConfig, channel_cfg: ChannelConfig, strategy: FederatedStrategy,
                 clients: Sequence[ClientDataset], seed: int = 0, threads: int = 1,
                 domains: Optional[Sequence[str]] = None, verbose: bool = False) -> None:
        """
        Initialize the trainer and the round-1 global model.

        :param model_cfg: Codec shape contract.
        :param channel_cfg: Training channel.
        :param strategy: Federated strategy instance.
        :param clients: Client datasets; ids must be unique.
        :param seed: Global experiment seed.
        :param threads: Worker threads for local training.
        :param domains: Declared domains for domain-aware aggregation (default: those of the clients).
        :param verbose: Whether to enable verbose logging.

        :raises TypeError: If strategy is not a FederatedStrategy instance.
        :raises ConfigurationError: On empty or duplicate clients, or threads < 1.
        """
        self.verbose = verbose
        if not isinstance(strategy, FederatedStrategy):
            raise TypeError(f"Strategy must be a FederatedStrategy instance, got {type(strategy)}")
        if not clients:
            raise ConfigurationError("At least one client is required")
        ids = [c.client_id for c in clients]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"Duplicate client ids: {sorted(ids)}")
        if threads < 1:
            raise ConfigurationError(f"threads must be >= 1; received: {threads}")
        for c in clients:
            if c.count < 1:
                raise ConfigurationError(f"Client {c.client_id} has no training images")

        self.model_cfg = model_cfg
        self.channel_cfg = channel_cfg
        self.strategy = strategy
        self.seed = seed
        self.threads = threads
        self.clients = [ClientState(c.client_id, c.domain, c) for c in sorted(clients, key=lambda c: c.client_id)]
        present = {c.domain for c in clients}
        self.domains = sorted(set(domains) if domains is not None else present, key=domain_sort_key)
        self.model = JsccModel(model_cfg, derive_rng(seed, STREAM_INIT))
        self.server = ServerState(global_params=self.model.params().copy())

    @property
    def global_model(self) -> JsccModel:
        """The live model graph loaded with the current global parameters."""
        self.model.params().assign(self.server.global_params)
        return self.model

    def _train_one(self, client: ClientState) -> ClientUpdate:
        return local_train(client, self.server, self.strategy, self.channel_cfg, self.model_cfg, self.seed)

    def _collect(self) -> Tuple[List[ClientUpdate], List[Tuple[int, DivergenceError]]]:
        outcomes = []
        if self.threads == 1:
            for client in self.clients:
                try:
                    outcomes.append(self._train_one(client))
                except DivergenceError as e:
                    outcomes.append(e)
        else:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                futures = [pool.submit(self._train_one, c) for c in self.clients]
                for future in futures:
                    try:
                        outcomes.append(future.result())
                    except DivergenceError as e:
                        outcomes.append(e)
        updates = [o for o in outcomes if isinstance(o, ClientUpdate)]
        failures = [(o.client_id, o) for o in outcomes if isinstance(o, DivergenceError)]
        return updates, failures

    def run_round(self) -> RoundReport:
        """
        Execute one communication round and advance the server state.

        :raises DivergenceError: If a client diverged and the policy is "abort", or every client diverged.
        """
        r = self.server.round
        if self.verbose:
            logger.info(f"Round {r}: training {len(self.clients)} clients on {self.threads} thread(s)")

        updates, failures = self._collect()
        if failures:
            if self.strategy.config.divergence_policy == "abort" or not updates:
                raise failures[0][1]
            logger.warning(f"Round {r}: excluding diverged clients {[cid for cid, _ in failures]} from aggregation")

        new_global, specialized = self.strategy.aggregate(updates, self.domains, self.server.domain_models)
        variance = param_variance(new_global, [u.params for u in updates])
        g = build_global_representation([(u.client_id, u.feature) for u in updates])
        dispersion = feature_dispersion(g, [u.feature for u in updates])

        by_id = {u.client_id: u for u in updates}
        for client in self.clients:
            update = by_id.get(client.client_id)
            if update is None:
                continue
            client.params = update.params
            client.feature_acc = update.feature
            if self.strategy.needs_model_history:
                client.prev_params = update.params

        self.server.global_params = new_global
        self.server.global_feature = g
        if specialized is not None:
            self.server.domain_models = specialized
        self.server.round = r + 1

        report = RoundReport(round=r, client_losses={u.client_id: u.log.mean_loss for u in updates},
                             param_variance=variance, feature_dispersion=dispersion,
                             diverged=[cid for cid, _ in failures], logs=[u.log for u in updates])
        if self.verbose:
            logger.info(f"Round {r} done: mean loss {report.mean_loss:.6f}, variance {variance:.6f}, "
                        f"dispersion {dispersion:.6f}")
        return report
