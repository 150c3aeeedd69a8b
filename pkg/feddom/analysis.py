"""
Convergence diagnostics for federated training.

Estimates the smoothness (L1), feature-Lipschitz (L2), gradient-variance (sigma2) and gradient-bound (V)
constants, evaluates the one-round expected-decrease bound and the learning-rate / lambda corollaries
on logged traces, and checks whether round-boundary losses actually decrease. All estimated constants
are sample lower bounds, so every "satisfied" verdict is conditional on them.
"""
import csv
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from feddom import tensor as T
from feddom.channel import ChannelConfig, power_normalize, transmit
from feddom.jscc_model import JsccConfig, JsccModel, extract_feature, snr_column
from feddom.modules import ModelParams
from feddom.tensor import ComputationTape, Tensor, no_tape
from feddom.utils import STREAM_INIT, STREAM_PROBE, ConfigurationError, UsageError, derive_rng

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("round", "client_id", "domain", "step", "loss", "recon_loss", "gen_loss", "aux_loss",
                 "grad_norm_sq", "lr", "lambda")
DEFAULT_PROBE_RADIUS = 1e-3
DIVERGENCE_FACTOR = 1e3

GradFn = Callable[[np.ndarray], np.ndarray]
FeatureFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class AssumptionEstimates:
    L1: float
    L2: float
    sigma2: float
    V: float
    samples: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("L1", "L2", "sigma2", "V"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0; received: {getattr(self, name)}")


@dataclass
class TraceLog:
    """
    One client's (or one federation's) local steps in one round, plus the loss and squared gradient norm
    probed before the first step.
    """
    round: int
    client_id: int = 0
    domain: str = ""
    start_loss: Optional[float] = None
    start_grad_norm_sq: Optional[float] = None
    losses: List[float] = field(default_factory=list)
    grad_norm_sq: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    lambdas: List[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.grad_norm_sq)

    def append(self, loss: float, grad_norm_sq: float, lr: float, lam: float) -> None:
        self.losses.append(float(loss))
        self.grad_norm_sq.append(float(grad_norm_sq))
        self.lrs.append(float(lr))
        self.lambdas.append(float(lam))


@dataclass
class DecreaseCheck:
    round: int
    bound_rhs_delta: float
    empirical_delta: float
    satisfied: bool


@dataclass
class EtaBound:
    value: float
    admissible: bool


@dataclass
class MonotonicReport:
    rounds: int
    flagged_rounds: List[int]
    compliant_fraction: float
    compliant_fraction_admissible_eta: Optional[float]
    compliant_fraction_inadmissible_eta: Optional[float]
    diverged: bool
    divergence_round: Optional[int] = None


# ------------------------------------------------------------------
# Assumption-constant estimation
# ------------------------------------------------------------------
def _unit_directions(rng: np.random.Generator, dim: int, probes: int) -> np.ndarray:
    if probes < 1:
        raise UsageError(f"probes must be >= 1; received: {probes}")
    out = np.empty((probes, dim))
    for i in range(probes):
        v = rng.standard_normal(dim)
        out[i] = v / np.linalg.norm(v)
    return out


def estimate_l1(grad_fn: GradFn, theta: np.ndarray, probes: int, rng: np.random.Generator,
                radius: float = DEFAULT_PROBE_RADIUS) -> float:
    """
    max over probes of ||grad(theta + d) - grad(theta)|| / ||d|| for random d of norm ``radius``.

    A lower bound on the smoothness constant.

    :raises UsageError: If probes < 1.
    """
    theta = np.asarray(theta, dtype=np.float64)
    base = np.asarray(grad_fn(theta), dtype=np.float64)
    best = 0.0
    for direction in _unit_directions(rng, theta.size, probes):
        delta = radius * direction
        moved = np.asarray(grad_fn(theta + delta), dtype=np.float64)
        best = max(best, float(np.linalg.norm(moved - base) / np.linalg.norm(delta)))
    return best


def estimate_l2(feature_fn: FeatureFn, theta: np.ndarray, probes: int, rng: np.random.Generator,
                radius: float = DEFAULT_PROBE_RADIUS) -> float:
    """
    max over probes of ||f(theta + d) - f(theta)|| / ||d||; non-decreasing in ``probes`` for a fixed rng seed.

    :raises UsageError: If probes < 1.
    """
    theta = np.asarray(theta, dtype=np.float64)
    base = np.asarray(feature_fn(theta), dtype=np.float64)
    best = 0.0
    for direction in _unit_directions(rng, theta.size, probes):
        delta = radius * direction
        moved = np.asarray(feature_fn(theta + delta), dtype=np.float64)
        best = max(best, float(np.linalg.norm(moved - base) / np.linalg.norm(delta)))
    return best


def estimate_sigma2(batch_grads: Sequence[np.ndarray], full_grad: Optional[np.ndarray] = None) -> float:
    """Mean squared deviation of minibatch gradients from the full gradient (their mean by default)."""
    if not batch_grads:
        raise UsageError("estimate_sigma2 needs at least one minibatch gradient")
    grads = np.stack([np.asarray(g, dtype=np.float64) for g in batch_grads])
    full = grads.mean(axis=0) if full_grad is None else np.asarray(full_grad, dtype=np.float64)
    return float(np.mean(np.sum((grads - full) ** 2, axis=1)))


def estimate_v(batch_grads: Sequence[np.ndarray]) -> float:
    """Largest minibatch gradient norm."""
    if not batch_grads:
        raise UsageError("estimate_v needs at least one minibatch gradient")
    return float(max(np.linalg.norm(np.asarray(g, dtype=np.float64)) for g in batch_grads))


# ------------------------------------------------------------------
# Codec adapters
# ------------------------------------------------------------------
class CodecProbe:
    """
    Flat-parameter views of the codec's reconstruction gradient and mean feature on a fixed image set.

    Channel noise is re-derived from the same stream on every call, so the gradient is a deterministic
    function of the parameters.
    """

    def __init__(self, model_cfg: JsccConfig, channel_cfg: ChannelConfig, params: ModelParams,
                 images: np.ndarray, snr_db: float, seed: int = 0) -> None:
        if len(images) == 0:
            raise ConfigurationError("CodecProbe needs at least one image")
        self.model = JsccModel(model_cfg, derive_rng(0, STREAM_INIT))
        self.live = self.model.params()
        self.live.assign(params)
        self.channel_cfg = channel_cfg
        self.images = np.asarray(images)
        self.snr_db = snr_db
        self.seed = seed
        self.theta = self.live.flatten().astype(np.float64)

    def _load(self, theta: np.ndarray) -> None:
        self.live.load_flat(np.asarray(theta).astype(T.get_default_dtype()))

    def gradient(self, theta: np.ndarray, images: Optional[np.ndarray] = None, key: int = 0) -> np.ndarray:
        self._load(theta)
        images = self.images if images is None else images
        rng = derive_rng(self.seed, STREAM_PROBE, key)
        x = Tensor(images)
        col = snr_column(self.snr_db, x.shape[0])
        self.live.zero_grad()
        with ComputationTape() as tape:
            latent = self.model.encoder(x, col)
            received = transmit(power_normalize(latent, self.channel_cfg.transmit_power), self.channel_cfg,
                                self.snr_db, rng)
            loss = T.mse(self.model.decoder(received, col), x)
        tape.backward(loss)
        grad = self.live.grad_flat().astype(np.float64)
        self.live.zero_grad()
        return grad

    def feature(self, theta: np.ndarray) -> np.ndarray:
        self._load(theta)
        with no_tape():
            return extract_feature(self.model.encoder, Tensor(self.images)).data.mean(axis=0)

    def batch_gradients(self, batch_size: int) -> List[np.ndarray]:
        return [self.gradient(self.theta, self.images[start:start + batch_size], key=start)
                for start in range(0, len(self.images), batch_size)]


def estimate_assumptions(probe: CodecProbe, probes: int, rng: np.random.Generator,
                         batch_size: int = 16, radius: float = DEFAULT_PROBE_RADIUS) -> AssumptionEstimates:
    """Estimate all four constants for a codec at its current parameters."""
    grads = probe.batch_gradients(batch_size)
    return AssumptionEstimates(
        L1=estimate_l1(probe.gradient, probe.theta, probes, rng, radius),
        L2=estimate_l2(probe.feature, probe.theta, probes, rng, radius),
        sigma2=estimate_sigma2(grads),
        V=estimate_v(grads),
        samples={"probes": probes, "images": len(probe.images), "batches": len(grads)},
    )


# ------------------------------------------------------------------
# Bounds
# ------------------------------------------------------------------
def round_decrease_check(trace: TraceLog, next_trace: TraceLog, est: AssumptionEstimates, eta: float,
                         lam: float, E: int, tolerance: float = 1e-9) -> DecreaseCheck:
    """
    Compare the guaranteed one-round decrease with the observed one.

    bound = -(eta - L1 eta^2 / 2) * sum_e ||grad_e||^2 + (L1 E eta^2 / 2) sigma2 + lam L2 eta E V;
    observed = next round's start loss minus this round's.

    :raises UsageError: If the trace lacks E steps or either start loss is missing.
    """
    if trace.steps < E:
        raise UsageError(f"Round {trace.round} trace has {trace.steps} steps, expected {E}")
    if trace.start_loss is None or next_trace.start_loss is None:
        raise UsageError(f"Start losses missing around round {trace.round}; enable the trace probe")
    grad_sum = float(np.sum(trace.grad_norm_sq[:E]))
    bound = (-(eta - est.L1 * eta * eta / 2.0) * grad_sum
             + (est.L1 * E * eta * eta / 2.0) * est.sigma2
             + lam * est.L2 * eta * E * est.V)
    empirical = next_trace.start_loss - trace.start_loss
    return DecreaseCheck(trace.round, float(bound), float(empirical), bool(empirical <= bound + tolerance))


def eta_upper_bound(grad_norm_sq_prefix: Sequence[float], est: AssumptionEstimates, lam: float,
                    E: int) -> EtaBound:
    """
    Largest learning rate for which the bound still guarantees a decrease:
    2 (S - lam L2 E V) / (L1 (S + E sigma2)) with S the summed squared gradient norms.

    A non-positive numerator leaves no admissible rate: returns 0 with ``admissible`` False.
    """
    if est.L1 <= 0:
        return EtaBound(float("inf"), True)
    s = float(np.sum(grad_norm_sq_prefix))
    penalty = lam * est.L2 * E * est.V
    noise = E * est.sigma2
    if penalty == 0 and noise == 0:
        return EtaBound(2.0 / est.L1, True)
    numerator = s - penalty
    if numerator <= 0:
        return EtaBound(0.0, False)
    return EtaBound((2.0 / est.L1) * (numerator / (s + noise)), True)


def monotone_lambda(grad_norm_sq_first: float, est: AssumptionEstimates, E: int) -> float:
    """lam_e = ||grad at round start||^2 / (L2 E V)."""
    if grad_norm_sq_first == 0:
        return 0.0
    denom = est.L2 * E * est.V
    return float(grad_norm_sq_first / denom) if denom > 0 else float("inf")


def _smooth(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def check_monotonic_decrease(traces: Sequence[TraceLog], window: int = 1,
                             est: Optional[AssumptionEstimates] = None, E: Optional[int] = None) -> MonotonicReport:
    """
    Flag rounds whose boundary (start) loss rose above the previous round's.

    :param traces: One trace per round, in any order.
    :param window: Moving-average width applied to the boundary losses before comparing (1 = raw).
    :param est: When given, rounds are also split by whether their learning rate met the learning-rate bound.
    :param E: Local steps per round for the learning-rate bound (default: each trace's step count).
    """
    if window < 1:
        raise UsageError(f"window must be >= 1; received: {window}")
    ordered = sorted(traces, key=lambda t: t.round)
    if any(t.start_loss is None for t in ordered):
        raise UsageError("Every trace needs a start loss")
    losses = np.array([t.start_loss for t in ordered], dtype=np.float64)

    diverged, divergence_round = False, None
    for t, value in zip(ordered, losses):
        if not np.isfinite(value) or value > DIVERGENCE_FACTOR * max(abs(losses[0]), 1e-12):
            diverged, divergence_round = True, t.round
            break

    smoothed = _smooth(losses, window)
    offset = window - 1
    rounds = [ordered[i + offset].round for i in range(len(smoothed))]
    flagged, compliant, admissible_flags = [], [], []
    for i in range(1, len(smoothed)):
        ok = bool(smoothed[i] <= smoothed[i - 1])
        compliant.append(ok)
        if not ok:
            flagged.append(rounds[i - 1])
        if est is not None:
            trace = ordered[i - 1 + offset]
            bound = eta_upper_bound(trace.grad_norm_sq, est,
                                    trace.lambdas[0] if trace.lambdas else 0.0, E or trace.steps)
            eta = trace.lrs[0] if trace.lrs else 0.0
            admissible_flags.append(bound.admissible and eta < bound.value)

    def fraction(mask: List[bool]) -> Optional[float]:
        chosen = [c for c, m in zip(compliant, mask) if m]
        return float(np.mean(chosen)) if chosen else None

    frac = float(np.mean(compliant)) if compliant else 1.0
    if est is not None:
        adm = fraction(admissible_flags)
        inadm = fraction([not a for a in admissible_flags])
    else:
        adm = inadm = None
    return MonotonicReport(len(ordered), flagged, frac, adm, inadm, diverged, divergence_round)


# ------------------------------------------------------------------
# Convex quadratic toy federation
# ------------------------------------------------------------------
class QuadraticFederation:
    """
    Clients with losses 0.5 (theta - c_m)^T A (theta - c_m) sharing a diagonal A, trained by FedAvg.

    Because A is shared, the averaged local iterate follows plain gradient descent on the federation
    objective, so its analytic constants are L1 = max(A), L2 = 0, sigma2 = 0 (without gradient noise).
    """

    def __init__(self, curvature: Sequence[float], optima: Sequence[Sequence[float]], eta: float, E: int = 1,
                 noise_std: float = 0.0, seed: int = 0) -> None:
        self.curvature = np.asarray(curvature, dtype=np.float64)
        self.optima = np.asarray(optima, dtype=np.float64)
        if self.curvature.ndim != 1 or np.any(self.curvature < 0):
            raise ConfigurationError("curvature must be a non-negative vector")
        if self.optima.ndim != 2 or self.optima.shape[1] != self.curvature.size:
            raise ConfigurationError("optima must be (clients, dim) matching the curvature")
        if eta <= 0 or E < 1:
            raise ConfigurationError(f"Need eta > 0 and E >= 1; received eta={eta}, E={E}")
        self.eta = eta
        self.E = E
        self.noise_std = noise_std
        self.rng = derive_rng(seed, STREAM_PROBE)

    @property
    def estimates(self) -> AssumptionEstimates:
        return AssumptionEstimates(L1=float(self.curvature.max()), L2=0.0,
                                   sigma2=float(self.curvature.size * self.noise_std ** 2), V=0.0)

    def objective(self, theta: np.ndarray) -> float:
        diff = theta[None, :] - self.optima
        return float(np.mean(0.5 * np.sum(self.curvature * diff * diff, axis=1)))

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        return self.curvature * (theta - self.optima.mean(axis=0))

    def run(self, theta0: Sequence[float], rounds: int) -> List[TraceLog]:
        """FedAvg for ``rounds`` rounds; the trace logs the objective along the averaged iterate."""
        theta_g = np.asarray(theta0, dtype=np.float64)
        traces = []
        for r in range(1, rounds + 1):
            trace = TraceLog(round=r, start_loss=self.objective(theta_g),
                             start_grad_norm_sq=float(np.sum(self.gradient(theta_g) ** 2)))
            local = np.repeat(theta_g[None, :], len(self.optima), axis=0)
            for _ in range(self.E):
                mean_iterate = local.mean(axis=0)
                g_mean = self.gradient(mean_iterate)
                trace.append(self.objective(mean_iterate), float(np.sum(g_mean ** 2)), self.eta, 0.0)
                grads = self.curvature * (local - self.optima)
                if self.noise_std > 0:
                    grads = grads + self.noise_std * self.rng.standard_normal(grads.shape)
                local = local - self.eta * grads
            theta_g = local.mean(axis=0)
            traces.append(trace)
        return traces


# ------------------------------------------------------------------
# Trace persistence and diagnostics
# ------------------------------------------------------------------
def read_trace_csv(path: Path) -> List[TraceLog]:
    """
    Rebuild per-(round, client) traces from a trace CSV; step -1 rows carry the start probe.

    :raises ConfigurationError: If the file is missing or has an unexpected header.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Trace file '{path}' does not exist")
    traces: Dict[Tuple[int, int], TraceLog] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ConfigurationError(f"Unexpected trace header in '{path}': {reader.fieldnames}")
        for row in reader:
            key = (int(row["round"]), int(row["client_id"]))
            trace = traces.setdefault(key, TraceLog(round=key[0], client_id=key[1], domain=row["domain"]))
            if int(row["step"]) < 0:
                trace.start_loss = float(row["loss"])
                trace.start_grad_norm_sq = float(row["grad_norm_sq"])
            else:
                trace.append(float(row["loss"]), float(row["grad_norm_sq"]), float(row["lr"]), float(row["lambda"]))
    return [traces[k] for k in sorted(traces)]


def diagnose(traces: Sequence[TraceLog], est: AssumptionEstimates, window: int = 1) -> dict:
    """
    Run every bound over consecutive rounds of each client.

    :return: JSON-ready diagnostics.
    """
    by_client: Dict[int, List[TraceLog]] = defaultdict(list)
    for t in traces:
        by_client[t.client_id].append(t)

    clients = {}
    for cid in sorted(by_client):
        ordered = sorted(by_client[cid], key=lambda t: t.round)
        checks, eta_bounds, lambdas = [], [], []
        for cur, nxt in zip(ordered, ordered[1:]):
            if cur.start_loss is None or nxt.start_loss is None or not cur.steps:
                continue
            E = cur.steps
            lam = cur.lambdas[0]
            checks.append(asdict(round_decrease_check(cur, nxt, est, cur.lrs[0], lam, E)))
            eta_bounds.append(asdict(eta_upper_bound(cur.grad_norm_sq, est, lam, E)))
            if cur.start_grad_norm_sq is not None:
                lambdas.append(monotone_lambda(cur.start_grad_norm_sq, est, E))
        entry = {"domain": ordered[0].domain, "decrease_checks": checks, "eta_bounds": eta_bounds,
                 "suggested_lambda": lambdas}
        if checks:
            entry["satisfied_fraction"] = float(np.mean([c["satisfied"] for c in checks]))
        if all(t.start_loss is not None for t in ordered) and len(ordered) > 1:
            entry["monotonic"] = asdict(check_monotonic_decrease(ordered, window, est))
        clients[str(cid)] = entry

    return {"estimates": asdict(est), "verdicts_conditional_on_estimates": True, "clients": clients}


def write_diagnostics(diagnostics: dict, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(diagnostics, indent=2, sort_keys=True, default=float))
    logger.info(f"Diagnostics written to {path}")
