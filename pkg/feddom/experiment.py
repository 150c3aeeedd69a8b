"""
Experiment runs: data, clients and server from a config, communication rounds, held-out evaluation over an
SNR grid, incremental CSV results, checkpoints with resume, and cross-strategy comparison tables.
"""
import csv
import json
import logging
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from feddom import tensor as T
from feddom.analysis import TRACE_COLUMNS, CodecProbe, diagnose, estimate_assumptions, read_trace_csv, \
    write_diagnostics
from feddom.channel import ChannelConfig, power_normalize, transmit
from feddom.config import ExperimentConfig, resolve_partition, save_config
from feddom.data import DomainData, assign_clients, domain_sort_key
from feddom.federated_trainer import FederatedTrainer, RoundReport
from feddom.fl_strategy import FedDomStrategy, create_strategy, domain_weight_shares
from feddom.jscc_model import JsccModel, parameter_count, snr_column
from feddom.metrics import METRICS_VERSION, MetricReport, ms_ssim, psnr
from feddom.modules import ModelParams, load_checkpoint, save_checkpoint
from feddom.tensor import Tensor, no_tape
from feddom.utils import STREAM_EVAL, STREAM_INIT, ConfigurationError, derive_rng, stable_hash, \
    validate_output_path

logger = logging.getLogger(__name__)

RESULTS_SCHEMA = "feddom-results/1"
RESULTS_FILE = "results.csv"
CONVERGENCE_FILE = "convergence.csv"
ROUNDS_FILE = "rounds.csv"
TRACE_FILE = "trace.csv"
SUMMARY_FILE = "summary.json"
STATE_FILE = "state.json"
CHECKPOINT_DIR = "checkpoints"
ROUND_COLUMNS = ("round", "strategy", "mean_loss", "param_variance", "feature_dispersion", "diverged")
COMPARISON_STRATEGIES = ("fedavg", "fedprox", "moon", "feddom")
SWEEP_LAMBDAS = (1.0, 1.5, 2.0)
AVG_OF_ALL = "Avg of All"
AVG_OF_LOW_SAMPLE = "Avg of low-sample"


@dataclass
class ResultRow:
    round: int
    strategy: str
    domain: str
    snr_db: float
    psnr: float
    ms_ssim: float
    mean_loss: float
    param_variance: float

    @classmethod
    def columns(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def to_csv(self) -> List[str]:
        return [str(self.round), self.strategy, self.domain, _fmt(self.snr_db), _fmt(self.psnr),
                _fmt(self.ms_ssim), _fmt(self.mean_loss), _fmt(self.param_variance)]

    @classmethod
    def from_csv(cls, row: Dict[str, str]) -> "ResultRow":
        try:
            return cls(int(row["round"]), row["strategy"], row["domain"], float(row["snr_db"]), float(row["psnr"]),
                       float(row["ms_ssim"]), float(row["mean_loss"]), float(row["param_variance"]))
        except (KeyError, ValueError) as e:
            raise ConfigurationError(f"Malformed result row {row}: {e}") from e


def _fmt(value: float) -> str:
    return f"{float(value):.8f}"


# ------------------------------------------------------------------
# CSV persistence
# ------------------------------------------------------------------
def _reset_csv(path: Path, columns: Sequence[str]) -> None:
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(columns)


def _append_csv(path: Path, rows: Iterable[Sequence[str]]) -> None:
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in rows:
            writer.writerow(row)
        fh.flush()
        os.fsync(fh.fileno())


def _truncate_csv(path: Path, columns: Sequence[str], last_round: int) -> None:
    """Keep only rows whose round is <= ``last_round``."""
    if not path.is_file():
        _reset_csv(path, columns)
        return
    with path.open(newline="") as fh:
        kept = [row for row in csv.reader(fh)][1:]
    kept = [row for row in kept if row and int(row[0]) <= last_round]
    _reset_csv(path, columns)
    _append_csv(path, kept)


def read_results(path: Path) -> List[ResultRow]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Results file '{path}' does not exist")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ResultRow.columns():
            raise ConfigurationError(f"Unexpected results header in '{path}': {reader.fieldnames}")
        return [ResultRow.from_csv(row) for row in reader]


def _trace_rows(report: RoundReport) -> List[List[str]]:
    rows = []
    for log in sorted(report.logs, key=lambda lg: lg.client_id):
        for s in log.steps:
            rows.append([str(s.round), str(s.client_id), s.domain, str(s.step), _fmt(s.loss), _fmt(s.recon_loss),
                         _fmt(s.gen_loss), _fmt(s.aux_loss), _fmt(s.grad_norm_sq), _fmt(s.lr), _fmt(s.lam)])
    return rows


# ------------------------------------------------------------------
# Evaluation
# ------------------------------------------------------------------
def _snr_key(snr_db: float) -> int:
    return int(round(snr_db * 1000))


def evaluate_domain(model: JsccModel, images: np.ndarray, snr_db: float, channel_cfg: ChannelConfig,
                    rng: np.random.Generator, batch_size: int = 64, scales: int = 3) -> Tuple[float, float]:
    """
    Mean per-image PSNR and MS-SSIM of one domain's test images sent through the channel at ``snr_db``.
    """
    psnrs, ssims = [], []
    with no_tape():
        for start in range(0, len(images), batch_size):
            x = Tensor(images[start:start + batch_size])
            col = snr_column(snr_db, x.shape[0])
            latent = model.encoder(x, col)
            received = transmit(power_normalize(latent, channel_cfg.transmit_power), channel_cfg, snr_db, rng)
            recon = model.decoder(received, col).data
            for original, restored in zip(x.data, recon):
                psnrs.append(psnr(original, restored))
                ssims.append(ms_ssim(original, restored, scales=scales))
    return float(np.mean(psnrs)), float(np.mean(ssims))


def evaluate_grid(model: JsccModel, domain_data: Dict[str, DomainData], snr_points: Sequence[float],
                  channel_cfg: ChannelConfig, seed: int, round_index: int, batch_size: int = 64,
                  scales: int = 3) -> Dict[Tuple[str, float], Tuple[float, float]]:
    """Per-(domain, SNR) quality; every cell draws channel noise from its own stream."""
    out = {}
    for domain in sorted(domain_data, key=domain_sort_key):
        for snr in snr_points:
            rng = derive_rng(seed, STREAM_EVAL, round_index, stable_hash(domain), _snr_key(snr))
            out[(domain, snr)] = evaluate_domain(model, domain_data[domain].test, snr, channel_cfg, rng,
                                                 batch_size, scales)
    return out


# ------------------------------------------------------------------
# Checkpoints
# ------------------------------------------------------------------
def save_server_checkpoint(trainer: FederatedTrainer, out_dir: Path, round_index: int) -> Path:
    """
    Write the global model, domain models and contrastive history for ``round_index``; ``state.json`` is
    replaced last so it always names a complete checkpoint.
    """
    ckpt_dir = out_dir / CHECKPOINT_DIR
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    server = trainer.server
    global_file = f"global_r{round_index:04d}.fdm"
    save_checkpoint(ckpt_dir / global_file, server.global_params)
    domain_files = {}
    for domain, params in sorted(server.domain_models.items()):
        name = f"domain_{domain}_r{round_index:04d}.fdm"
        save_checkpoint(ckpt_dir / name, params)
        domain_files[domain] = name
    history_files = {}
    for client in trainer.clients:
        if client.prev_params is not None:
            name = f"client_{client.client_id:03d}_prev_r{round_index:04d}.fdm"
            save_checkpoint(ckpt_dir / name, client.prev_params)
            history_files[str(client.client_id)] = name

    g = server.global_feature
    state = {
        "round": round_index,
        "global": global_file,
        "global_feature": None if g is None else [float(v) for v in g],
        "feature_dtype": None if g is None else str(np.asarray(g).dtype),
        "domain_models": domain_files,
        "client_history": history_files,
    }
    tmp = ckpt_dir / (STATE_FILE + ".tmp")
    tmp.write_text(json.dumps(state, indent=2, sort_keys=True))
    os.replace(tmp, ckpt_dir / STATE_FILE)
    logger.info(f"Checkpoint for round {round_index} saved to {ckpt_dir}")
    return ckpt_dir / global_file


def restore_server_checkpoint(trainer: FederatedTrainer, out_dir: Path) -> int:
    """
    Load the last complete checkpoint into ``trainer``.

    :return: The checkpointed round, or 0 when there is none.
    """
    ckpt_dir = out_dir / CHECKPOINT_DIR
    state_path = ckpt_dir / STATE_FILE
    if not state_path.is_file():
        return 0
    try:
        state = json.loads(state_path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Corrupt checkpoint state '{state_path}': {e}") from e
    server = trainer.server
    restored = load_checkpoint(ckpt_dir / state["global"])
    server.global_params.check_layout(restored)
    server.global_params = restored
    g = state.get("global_feature")
    server.global_feature = None if g is None else np.asarray(g, dtype=state["feature_dtype"])
    server.domain_models = {d: load_checkpoint(ckpt_dir / name) for d, name in state["domain_models"].items()}
    by_id = {c.client_id: c for c in trainer.clients}
    for cid, name in state["client_history"].items():
        by_id[int(cid)].prev_params = load_checkpoint(ckpt_dir / name)
    server.round = int(state["round"]) + 1
    logger.info(f"Resumed from round {state['round']} checkpoint")
    return int(state["round"])


# ------------------------------------------------------------------
# Runs
# ------------------------------------------------------------------
def _output_files(out_dir: Path) -> Dict[str, Tuple[Path, Sequence[str]]]:
    return {
        "results": (out_dir / RESULTS_FILE, ResultRow.columns()),
        "convergence": (out_dir / CONVERGENCE_FILE, ResultRow.columns()),
        "rounds": (out_dir / ROUNDS_FILE, ROUND_COLUMNS),
        "trace": (out_dir / TRACE_FILE, TRACE_COLUMNS),
    }


def build_trainer(cfg: ExperimentConfig, verbose: bool = False) -> Tuple[FederatedTrainer, Dict[str, DomainData]]:
    T.set_default_dtype(cfg.dtype)
    domain_data, counts = resolve_partition(cfg)
    clients = assign_clients(domain_data, counts, cfg.seed)
    strategy = create_strategy(cfg.strategy, verbose=verbose)
    trainer = FederatedTrainer(cfg.model, cfg.channel, strategy, clients, seed=cfg.seed, threads=cfg.threads,
                               domains=cfg.dataset.domain_names, verbose=verbose)
    return trainer, domain_data


def run_experiment(cfg: ExperimentConfig, resume: bool = False, label: Optional[str] = None,
                   verbose: bool = False) -> List[ResultRow]:
    """
    Run every round of ``cfg``, appending results as they are produced.

    :param cfg: Experiment configuration.
    :param resume: Continue from the last complete checkpoint in ``cfg.output_dir``.
    :param label: Strategy label written to result rows (default: the strategy kind).
    :param verbose: Whether to enable verbose logging.
    :return: Every grid ResultRow of the run, including rows from before a resume.
    :raises DivergenceError: If a client diverges under the "abort" policy; rows so far stay on disk.
    """
    out_dir = validate_output_path(Path(cfg.output_dir), create_if_missing=True)
    label = label or cfg.strategy.kind
    trainer, domain_data = build_trainer(cfg, verbose=verbose)
    files = _output_files(out_dir)

    last_round = restore_server_checkpoint(trainer, out_dir) if resume else 0
    for path, columns in files.values():
        if last_round:
            _truncate_csv(path, columns, last_round)
        else:
            _reset_csv(path, columns)
    save_config(cfg, out_dir / "config.json")

    domain_aware = isinstance(trainer.strategy, FedDomStrategy) and cfg.strategy.domain_aware
    shares = domain_weight_shares([(c.domain, c.dataset.count) for c in trainer.clients], domain_aware)
    logger.info(f"Domain shares of the global model: {shares}")

    eval_channel = cfg.eval_channel
    rounds = cfg.strategy.rounds
    report = None
    quality: List[MetricReport] = []
    for r in range(last_round + 1, rounds + 1):
        report = trainer.run_round()
        _append_csv(files["rounds"][0], [[str(r), label, _fmt(report.mean_loss), _fmt(report.param_variance),
                                          _fmt(report.feature_dispersion),
                                          ";".join(str(c) for c in report.diverged)]])
        _append_csv(files["trace"][0], _trace_rows(report))

        if r % cfg.eval.eval_every == 0 or r == rounds:
            model = trainer.global_model
            grid = evaluate_grid(model, domain_data, cfg.eval.snr_points_db, eval_channel, cfg.seed, r,
                                 cfg.eval.batch_size, cfg.eval.ms_ssim_scales)
            _append_csv(files["results"][0], [
                ResultRow(r, label, d, snr, p, s, report.mean_loss, report.param_variance).to_csv()
                for (d, snr), (p, s) in grid.items()])
            quality = [MetricReport.from_grid(grid, snr) for snr in cfg.eval.snr_points_db]
            if verbose:
                logger.info(f"[{label}] round {r}: " + ", ".join(
                    f"{q.snr_db:g} dB {q.psnr_db:.2f} dB PSNR / {q.ms_ssim:.4f} MS-SSIM" for q in quality))
            if cfg.eval.convergence_snr_db is not None:
                conv = evaluate_grid(model, domain_data, [cfg.eval.convergence_snr_db], eval_channel, cfg.seed, r,
                                     cfg.eval.batch_size, cfg.eval.ms_ssim_scales)
                _append_csv(files["convergence"][0], [
                    ResultRow(r, label, d, snr, p, s, report.mean_loss, report.param_variance).to_csv()
                    for (d, snr), (p, s) in conv.items()])

        if r % cfg.checkpoint_every == 0 or r == rounds:
            save_server_checkpoint(trainer, out_dir, r)
        if verbose:
            logger.info(f"[{label}] round {r}/{rounds} complete")

    summary = {
        "label": label,
        "strategy": cfg.strategy.to_dict(),
        "seed": cfg.seed,
        "rounds": rounds,
        "results_schema": RESULTS_SCHEMA,
        "metrics_version": METRICS_VERSION,
        "n": cfg.model.n,
        "k": cfg.model.k,
        "bandwidth_ratio": cfg.model.bandwidth_ratio,
        "parameter_count": parameter_count(trainer.model),
        "domain_shares": shares,
        "clients": [{"client_id": c.client_id, "domain": c.domain, "count": c.dataset.count}
                    for c in trainer.clients],
    }
    if report is not None:
        summary["final"] = {"mean_loss": report.mean_loss, "param_variance": report.param_variance,
                            "feature_dispersion": report.feature_dispersion}
    if quality:
        summary["quality"] = [q.to_dict() for q in quality]
    (out_dir / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True))
    return read_results(files["results"][0])


def low_sample_domains(domain_counts: Dict[str, int]) -> List[str]:
    """Every domain except the one holding the most training samples, in domain order."""
    ordered = sorted(domain_counts, key=domain_sort_key)
    if len(ordered) < 2:
        return []
    largest = max(ordered, key=lambda d: domain_counts[d])
    return [d for d in ordered if d != largest]


def domain_totals(run_dir: Path) -> Dict[str, int]:
    """Training samples per domain, from a finished run's ``summary.json``."""
    path = Path(run_dir) / SUMMARY_FILE
    if not path.is_file():
        raise ConfigurationError(f"Summary '{path}' does not exist")
    totals: Dict[str, int] = {}
    for client in json.loads(path.read_text())["clients"]:
        totals[client["domain"]] = totals.get(client["domain"], 0) + int(client["count"])
    return totals


def run_comparison(cfg: ExperimentConfig, strategies: Sequence[str] = COMPARISON_STRATEGIES,
                   verbose: bool = False, snr_db: Optional[float] = None) -> pd.DataFrame:
    """
    Run each strategy with shared seeds into ``<output_dir>/<strategy>`` and write the comparison tables.

    The tables also average the domains other than the best-represented one.
    """
    base = Path(cfg.output_dir)
    rows: List[ResultRow] = []
    for kind in strategies:
        sub = cfg.with_strategy(kind=kind, mu=None)
        sub.output_dir = str(base / kind)
        logger.info(f"Running strategy '{kind}'")
        rows.extend(run_experiment(sub, label=kind, verbose=verbose))
    low_sample = low_sample_domains(domain_totals(base / strategies[0]))
    return emit_comparison(rows, base, snr_db=snr_db, low_sample=low_sample)


def sweep_lambda(cfg: ExperimentConfig, lambdas: Sequence[float] = SWEEP_LAMBDAS,
                 verbose: bool = False) -> pd.DataFrame:
    """FedDoM with each lambda into ``<output_dir>/lambda_<value>``, plus a comparison table."""
    base = Path(cfg.output_dir)
    rows: List[ResultRow] = []
    for lam in lambdas:
        sub = cfg.with_strategy(kind="feddom", lam=float(lam))
        label = f"feddom(lambda={lam:g})"
        sub.output_dir = str(base / f"lambda_{lam:g}")
        rows.extend(run_experiment(sub, label=label, verbose=verbose))
    low_sample = low_sample_domains(domain_totals(base / f"lambda_{lambdas[0]:g}"))
    return emit_comparison(rows, base, low_sample=low_sample)


def emit_comparison(rows: Sequence[ResultRow], out_dir: Optional[Path] = None,
                    snr_db: Optional[float] = None, low_sample: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """
    One row per strategy: per-domain PSNR and MS-SSIM averaged over the evaluated SNR points of the
    strategy's last evaluated round, plus the average over domains ("Avg of All").

    :param rows: Result rows of one or more strategies.
    :param out_dir: When given, writes ``comparison.csv`` and an aligned ``comparison.txt``.
    :param snr_db: Restrict to one SNR point.
    :param low_sample: Domains averaged into an extra "Avg of low-sample" pair of columns.
    :return: The comparison table.
    """
    if not rows:
        raise ConfigurationError("No result rows to compare")
    df = pd.DataFrame([r.__dict__ for r in rows])
    if snr_db is not None:
        df = df[np.isclose(df["snr_db"], snr_db)]
        if df.empty:
            raise ConfigurationError(f"No result rows at {snr_db} dB")
    last = df.groupby("strategy")["round"].transform("max")
    df = df[df["round"] == last]

    strategy_order = list(dict.fromkeys(df["strategy"]))
    domains = sorted(df["domain"].unique(), key=domain_sort_key)
    means = df.groupby(["strategy", "domain"])[["psnr", "ms_ssim"]].mean()

    records = []
    for strategy in strategy_order:
        record = {"strategy": strategy}
        per_domain = means.loc[strategy]
        for domain in domains:
            if domain in per_domain.index:
                record[f"{domain} PSNR"] = float(per_domain.loc[domain, "psnr"])
                record[f"{domain} MS-SSIM"] = float(per_domain.loc[domain, "ms_ssim"])
        record[f"{AVG_OF_ALL} PSNR"] = float(per_domain["psnr"].mean())
        record[f"{AVG_OF_ALL} MS-SSIM"] = float(per_domain["ms_ssim"].mean())
        if low_sample:
            subset = per_domain[per_domain.index.isin(list(low_sample))]
            record[f"{AVG_OF_LOW_SAMPLE} PSNR"] = float(subset["psnr"].mean())
            record[f"{AVG_OF_LOW_SAMPLE} MS-SSIM"] = float(subset["ms_ssim"].mean())
        records.append(record)
    table = pd.DataFrame(records)

    if out_dir is not None:
        out_dir = validate_output_path(Path(out_dir))
        table.to_csv(out_dir / "comparison.csv", index=False, float_format="%.6f", lineterminator="\n")
        (out_dir / "comparison.txt").write_text(table.to_string(index=False, float_format=lambda v: f"{v:.4f}")
                                                + "\n")
        logger.info(f"Comparison of {len(table)} strategies written to {out_dir}")
    return table


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint: Path, channel: Optional[str] = None,
                        snr_points: Optional[Sequence[float]] = None, label: Optional[str] = None) \
        -> List[ResultRow]:
    """
    Evaluate saved global weights over the SNR grid, optionally under a different channel than in training,
    and write ``eval.csv`` into the output directory.
    """
    T.set_default_dtype(cfg.dtype)
    checkpoint = Path(checkpoint)
    if not checkpoint.is_file():
        raise ConfigurationError(f"Checkpoint '{checkpoint}' does not exist")
    domain_data, _ = resolve_partition(cfg)
    model = JsccModel(cfg.model, derive_rng(cfg.seed, STREAM_INIT))
    params: ModelParams = load_checkpoint(checkpoint)
    model.params().assign(params)

    channel_cfg = cfg.eval_channel
    if channel is not None:
        channel_cfg = ChannelConfig(kind=channel, snr_set_db=cfg.channel.snr_set_db,
                                    transmit_power=cfg.channel.transmit_power, equalize=cfg.channel.equalize)
    stem = checkpoint.stem
    round_index = int(stem.rsplit("_r", 1)[1]) if "_r" in stem and stem.rsplit("_r", 1)[1].isdigit() else 0
    points = list(snr_points or cfg.eval.snr_points_db)
    grid = evaluate_grid(model, domain_data, points, channel_cfg, cfg.seed, round_index, cfg.eval.batch_size,
                         cfg.eval.ms_ssim_scales)
    label = label or f"{cfg.strategy.kind}/{channel_cfg.kind}"
    rows = [ResultRow(round_index, label, d, snr, p, s, float("nan"), float("nan")) for (d, snr), (p, s) in
            grid.items()]
    out_dir = validate_output_path(Path(cfg.output_dir))
    path = out_dir / "eval.csv"
    _reset_csv(path, ResultRow.columns())
    _append_csv(path, [r.to_csv() for r in rows])
    return rows


def latest_checkpoint(run_dir: Path) -> Optional[Path]:
    state_path = Path(run_dir) / CHECKPOINT_DIR / STATE_FILE
    if not state_path.is_file():
        return None
    return state_path.parent / json.loads(state_path.read_text())["global"]


def run_analysis(cfg: ExperimentConfig, run_dir: Optional[Path] = None, probes: int = 8, window: int = 1,
                 sample_images: int = 32) -> dict:
    """
    Convergence diagnostics for a finished run: constants estimated at the latest checkpoint on a sample of
    training images, bounds evaluated over the run's trace, written to ``diagnostics.json``.
    """
    T.set_default_dtype(cfg.dtype)
    run_dir = Path(run_dir or cfg.output_dir)
    traces = read_trace_csv(run_dir / TRACE_FILE)
    checkpoint = latest_checkpoint(run_dir)
    if checkpoint is None:
        raise ConfigurationError(f"No checkpoint in '{run_dir}' to estimate constants at")
    if not any(t.start_loss is not None for t in traces):
        raise ConfigurationError(f"Trace in '{run_dir}' has no start-of-round losses; rerun with "
                                 f"strategy.trace_probe enabled")

    domain_data, counts = resolve_partition(cfg)
    clients = assign_clients(domain_data, counts, cfg.seed)
    per_client = max(1, sample_images // len(clients))
    images = np.concatenate([c.images[:per_client] for c in clients])
    probe = CodecProbe(cfg.model, cfg.channel, load_checkpoint(checkpoint), images,
                       snr_db=float(np.median(cfg.channel.snr_set_db)), seed=cfg.seed)
    est = estimate_assumptions(probe, probes, derive_rng(cfg.seed, STREAM_EVAL, stable_hash("analysis")),
                               batch_size=cfg.strategy.batch_size)
    diagnostics = diagnose(traces, est, window)
    diagnostics["checkpoint"] = checkpoint.name
    write_diagnostics(diagnostics, run_dir / "diagnostics.json")
    return diagnostics
