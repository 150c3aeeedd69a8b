import logging
from abc import ABC
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from feddom import tensor as T
from feddom.data import domain_sort_key
from feddom.modules import ModelParams
from feddom.tensor import Tensor
from feddom.utils import ConfigurationError, get_strategy_class, ordered_sum

logger = logging.getLogger(__name__)

FEATURE_MODES = ("per_step", "frozen")
MISSING_DOMAIN_POLICIES = ("skip", "reuse")
DIVERGENCE_POLICIES = ("abort", "exclude")


@dataclass
class StrategyConfig:
    """
    Training strategy and local optimization settings.

    :param kind: fedavg | fedprox | moon | feddom.
    :param mu: FedProx proximal weight, or MOON contrastive weight.
    :param tau: MOON temperature.
    :param lam: Weight of the generalization loss (JSON key "lambda").
    :param domain_aware: Use two-stage domain-aware aggregation (FedDoM only).
    :param local_epochs: E, passes over the local data per round.
    :param lr: SGD learning rate.
    :param rounds: Communication rounds R.
    :param batch_size: Local minibatch size.
    :param feature_mode: "per_step" accumulates features during training; "frozen" recomputes them with
        the final local model.
    :param trace_probe: Evaluate loss and gradient norm with the fresh broadcast before local training.
    :param missing_domain_policy: "skip" renormalizes over present domains, "reuse" keeps the previous
        domain model.
    :param divergence_policy: "abort" stops the experiment, "exclude" drops the client from aggregation.
    """
    kind: str = "feddom"
    mu: Optional[float] = None
    tau: float = 0.5
    lam: float = 1.5
    domain_aware: bool = True
    local_epochs: int = 1
    lr: float = 1e-3
    rounds: int = 60
    batch_size: int = 16
    feature_mode: str = "per_step"
    trace_probe: bool = False
    missing_domain_policy: str = "skip"
    divergence_policy: str = "abort"

    def __post_init__(self) -> None:
        self.kind = str(self.kind).lower()
        if self.mu is None:
            self.mu = {"fedprox": 0.01, "moon": 1.0}.get(self.kind, 0.0)
        checks = [
            (self.lam >= 0, f"lambda must be >= 0; received: {self.lam}"),
            (self.mu >= 0, f"mu must be >= 0; received: {self.mu}"),
            (self.tau > 0, f"tau must be > 0; received: {self.tau}"),
            (self.local_epochs >= 1, f"local_epochs must be >= 1; received: {self.local_epochs}"),
            (self.lr > 0, f"lr must be > 0; received: {self.lr}"),
            (self.rounds >= 1, f"rounds must be >= 1; received: {self.rounds}"),
            (self.batch_size >= 1, f"batch_size must be >= 1; received: {self.batch_size}"),
            (self.feature_mode in FEATURE_MODES, f"feature_mode must be one of {FEATURE_MODES}"),
            (self.missing_domain_policy in MISSING_DOMAIN_POLICIES,
             f"missing_domain_policy must be one of {MISSING_DOMAIN_POLICIES}"),
            (self.divergence_policy in DIVERGENCE_POLICIES,
             f"divergence_policy must be one of {DIVERGENCE_POLICIES}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigurationError(message)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "StrategyConfig":
        raw = dict(raw)
        if "lambda" in raw:
            raw["lam"] = raw.pop("lambda")
        try:
            return cls(**raw)
        except TypeError as e:
            raise ConfigurationError(f"Invalid strategy config: {e}") from e


@dataclass
class ClientUpdate:
    """What a client returns to the server after local training."""
    client_id: int
    domain: str
    count: int
    params: ModelParams
    feature: np.ndarray
    log: object = None


# ------------------------------------------------------------------
# Server-side operations
# ------------------------------------------------------------------
def build_global_representation(features: Sequence[Tuple[int, np.ndarray]]) -> np.ndarray:
    """
    G = (1/M) sum_m F_m, unweighted by sample counts, reduced in ascending client id order.

    :param features: (client_id, feature vector) pairs.
    """
    if not features:
        raise ConfigurationError("Cannot build a global representation from zero clients")
    ordered = sorted(features, key=lambda item: item[0])
    dims = {np.shape(f) for _, f in ordered}
    if len(dims) != 1:
        raise ConfigurationError(f"Feature dimensions differ: {sorted(dims)}")
    acc = ordered_sum([np.asarray(f, dtype=np.float64) for _, f in ordered])
    return (acc / len(ordered)).astype(np.asarray(ordered[0][1]).dtype)


def feature_dispersion(global_feature: np.ndarray, features: Sequence[np.ndarray]) -> float:
    """(1/M) sum_m ||G - F_m||^2."""
    g = np.asarray(global_feature, dtype=np.float64)
    return float(np.mean([np.sum((g - np.asarray(f, dtype=np.float64)) ** 2) for f in features]))


def aggregate_fedavg(models: Sequence[Tuple[int, ModelParams, int]]) -> ModelParams:
    """
    theta_g = sum_m (D_m / D) theta_m, reduced in ascending client id order.

    :param models: (client_id, params, sample count) triples with one shared layout.
    """
    if not models:
        raise ConfigurationError("Cannot aggregate zero models")
    ordered = sorted(models, key=lambda item: item[0])
    total = float(sum(count for _, _, count in ordered))
    if total <= 0:
        raise ConfigurationError("Total sample count must be positive")
    return ModelParams.linear_combination([(params, count / total) for _, params, count in ordered])


def aggregate_domain_aware(models: Sequence[Tuple[int, ModelParams, int, str]],
                           domains: Optional[Sequence[str]] = None, policy: str = "skip",
                           previous: Optional[Dict[str, ModelParams]] = None) \
        -> Tuple[ModelParams, Dict[str, ModelParams]]:
    """
    Two-stage aggregation: sample-weighted within each domain, then uniform across domains.

    :param models: (client_id, params, sample count, domain) tuples.
    :param domains: Declared domains; defaults to those present.
    :param policy: For a declared domain with no participating client, "skip" renormalizes over the
        present domains and "reuse" takes the previous round's domain model.
    :param previous: Domain models of the previous round (for "reuse").
    :return: (global params, domain-specialized params by domain).
    """
    if not models:
        raise ConfigurationError("Cannot aggregate zero models")
    present = sorted({m[3] for m in models}, key=domain_sort_key)
    declared = sorted(set(domains) if domains is not None else set(present), key=domain_sort_key)
    unknown = set(present) - set(declared)
    if unknown:
        raise ConfigurationError(f"Models tagged with undeclared domains: {sorted(unknown)}")

    specialized: Dict[str, ModelParams] = {}
    for domain in declared:
        members = [(cid, params, count) for cid, params, count, d in models if d == domain]
        if members:
            specialized[domain] = aggregate_fedavg(members)
        elif policy == "reuse" and previous and domain in previous:
            logger.warning(f"Domain '{domain}' has no clients this round; reusing its previous model")
            specialized[domain] = previous[domain]
        else:
            logger.warning(f"Domain '{domain}' has no clients this round; renormalizing over present domains")

    weight = 1.0 / len(specialized)
    merged = ModelParams.linear_combination([(specialized[d], weight) for d in declared if d in specialized])
    return merged, specialized


def param_variance(global_params: ModelParams, clients: Sequence[ModelParams]) -> float:
    """(1/M) sum_m ||theta_g - theta_m||_2 (mean of L2 distances)."""
    if not clients:
        raise ConfigurationError("param_variance needs at least one client model")
    return float(np.mean([global_params.distance(p) for p in clients]))


def domain_weight_shares(counts: Sequence[Tuple[str, int]], domain_aware: bool) -> Dict[str, float]:
    """
    Share of the global model contributed by each domain under either aggregator.

    :param counts: (domain, sample count) per client.
    """
    per_domain: Dict[str, int] = {}
    for domain, count in counts:
        per_domain[domain] = per_domain.get(domain, 0) + count
    ordered = sorted(per_domain, key=domain_sort_key)
    if domain_aware:
        return {d: 1.0 / len(ordered) for d in ordered}
    total = float(sum(per_domain.values()))
    return {d: per_domain[d] / total for d in ordered}


# ------------------------------------------------------------------
# Client-side loss terms
# ------------------------------------------------------------------
def generalization_loss(global_feature: np.ndarray, feature: Tensor) -> Tensor:
    """MSE(G, F); differentiable with respect to F."""
    return T.mse(Tensor(np.asarray(global_feature), dtype=feature.data.dtype), feature)


def fedprox_term(theta: ModelParams, theta_g: ModelParams, mu: float) -> Tensor:
    """(mu / 2) ||theta - theta_g||^2, differentiable with respect to theta."""
    theta.check_layout(theta_g)
    total = None
    for (_, p), (_, g) in zip(theta, theta_g):
        term = T.l2_norm_sq(T.sub(p, Tensor(g.data, dtype=p.data.dtype)))
        total = term if total is None else T.add(total, term)
    return T.scale(total, mu / 2.0)


def moon_loss(z: Tensor, z_glob: Tensor, z_prev: Tensor, tau: float, mu: float) -> Tensor:
    """
    mu * -log(e^{cos(z, z_glob)/tau} / (e^{cos(z, z_glob)/tau} + e^{cos(z, z_prev)/tau})),
    averaged over the batch when the inputs are (N, C).
    """
    positive = T.scale(T.cosine_similarity(z, z_glob), 1.0 / tau)
    negative = T.scale(T.cosine_similarity(z, z_prev), 1.0 / tau)
    per_sample = T.sub(T.log(T.add(T.exp(positive), T.exp(negative))), positive)
    return T.scale(T.mean(per_sample), mu)


@dataclass
class LocalStepContext:
    """Everything a strategy may look at when adding a loss term for one minibatch."""
    params: ModelParams
    global_params: ModelParams
    features: Tensor
    global_features: Optional[np.ndarray] = None
    previous_features: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)


class FederatedStrategy(ABC):
    """
    Abstract base class for federated training strategies.

    Subclasses define `STRATEGY_NAME` and override the hooks they change: extra local loss terms,
    whether the global representation is broadcast, and how the server aggregates.
    """
    STRATEGY_NAME: str

    def __init__(self, config: StrategyConfig, verbose: bool = False) -> None:
        """
        Initialize the strategy.

        :param config: Strategy configuration.
        :param verbose: Enable verbose logging output.
        """
        self.config = config
        self.verbose = verbose

    @property
    def uses_global_feature(self) -> bool:
        return False

    @property
    def needs_model_history(self) -> bool:
        """Whether clients must keep their previous-round local model."""
        return False

    def generalization_weight(self) -> float:
        return 0.0

    def auxiliary_loss(self, ctx: LocalStepContext) -> Optional[Tensor]:
        """Extra local loss term for one minibatch; None adds nothing."""
        return None

    def aggregate(self, updates: Sequence[ClientUpdate], domains: Sequence[str],
                  previous: Optional[Dict[str, ModelParams]] = None) \
            -> Tuple[ModelParams, Optional[Dict[str, ModelParams]]]:
        """
        Combine client models into the next global model.

        :return: (global params, domain-specialized params or None).
        """
        return aggregate_fedavg([(u.client_id, u.params, u.count) for u in updates]), None


class FedAvgStrategy(FederatedStrategy):
    """
    Sample-weighted averaging of plain local SGD.

    STRATEGY_NAME: "fedavg"
    """
    STRATEGY_NAME = "fedavg"


class FedProxStrategy(FederatedStrategy):
    """
    FedAvg with a proximal penalty toward the broadcast model.

    STRATEGY_NAME: "fedprox"
    """
    STRATEGY_NAME = "fedprox"

    def auxiliary_loss(self, ctx: LocalStepContext) -> Optional[Tensor]:
        if self.config.mu == 0:
            return None
        return fedprox_term(ctx.params, ctx.global_params, self.config.mu)


class MoonStrategy(FederatedStrategy):
    """
    Model-contrastive FL: pull features toward the global model's, away from the previous local model's.

    STRATEGY_NAME: "moon"
    """
    STRATEGY_NAME = "moon"

    @property
    def needs_model_history(self) -> bool:
        return True

    def auxiliary_loss(self, ctx: LocalStepContext) -> Optional[Tensor]:
        if self.config.mu == 0 or ctx.previous_features is None or ctx.global_features is None:
            return None
        dtype = ctx.features.data.dtype
        return moon_loss(ctx.features, Tensor(ctx.global_features, dtype=dtype),
                         Tensor(ctx.previous_features, dtype=dtype), self.config.tau, self.config.mu)


class FedDomStrategy(FederatedStrategy):
    """
    Global-representation alignment plus domain-aware aggregation.

    STRATEGY_NAME: "feddom"
    """
    STRATEGY_NAME = "feddom"

    @property
    def uses_global_feature(self) -> bool:
        return True

    def generalization_weight(self) -> float:
        return self.config.lam

    def aggregate(self, updates: Sequence[ClientUpdate], domains: Sequence[str],
                  previous: Optional[Dict[str, ModelParams]] = None) \
            -> Tuple[ModelParams, Optional[Dict[str, ModelParams]]]:
        if not self.config.domain_aware:
            return super().aggregate(updates, domains, previous)
        merged, specialized = aggregate_domain_aware(
            [(u.client_id, u.params, u.count, u.domain) for u in updates],
            domains=domains, policy=self.config.missing_domain_policy, previous=previous)
        if self.verbose:
            logger.info(f"Aggregated {len(specialized)} domain-specialized models")
        return merged, specialized


def create_strategy(config: StrategyConfig, verbose: bool = False) -> FederatedStrategy:
    return get_strategy_class(config.kind)(config, verbose=verbose)
