from pathlib import Path
from typing import Optional, Sequence

from feddom.config import ExperimentConfig, default_config, load_config
from feddom.experiment import evaluate_checkpoint, run_comparison, run_experiment
from feddom.logging_config import configure_feddom_logging


def _config(config_path: Optional[str], output_dir: Optional[str], seed: Optional[int],
            rounds: Optional[int], threads: Optional[int]) -> ExperimentConfig:
    cfg = load_config(Path(config_path)) if config_path else default_config()
    if output_dir is not None:
        cfg.output_dir = output_dir
    if seed is not None:
        cfg.seed = seed
    if rounds is not None:
        cfg.strategy.rounds = rounds
    if threads is not None:
        cfg.threads = threads
    return cfg


def run_training(config_path: Optional[str] = None, output_dir: Optional[str] = None, strategy_name: str = "feddom",
                 seed: Optional[int] = None, rounds: Optional[int] = None, threads: Optional[int] = None,
                 resume: bool = False, verbose: bool = True) -> None:
    """
    Train one strategy and print the final-round results.
    """
    configure_feddom_logging(verbose)
    cfg = _config(config_path, output_dir, seed, rounds, threads)
    if strategy_name != cfg.strategy.kind:
        cfg = cfg.with_strategy(kind=strategy_name, mu=None)
    rows = run_experiment(cfg, resume=resume, verbose=verbose)
    last = max(r.round for r in rows)
    print(f"\n[Results, round {last}]")
    for row in rows:
        if row.round == last:
            print(f"{row.domain:>8} {row.snr_db:5.1f} dB  PSNR {row.psnr:7.3f}  MS-SSIM {row.ms_ssim:.4f}")


def run_compare(config_path: Optional[str] = None, output_dir: Optional[str] = None,
                strategies: Sequence[str] = ("fedavg", "fedprox", "moon", "feddom"), seed: Optional[int] = None,
                rounds: Optional[int] = None, verbose: bool = True) -> None:
    """
    Train several strategies with shared seeds and print the comparison table.
    """
    configure_feddom_logging(verbose)
    cfg = _config(config_path, output_dir, seed, rounds, None)
    table = run_comparison(cfg, strategies, verbose=verbose)
    print(table.to_string(index=False))


def run_eval(checkpoint: str, config_path: Optional[str] = None, output_dir: Optional[str] = None,
             channel: Optional[str] = None, verbose: bool = True) -> None:
    """
    Evaluate a saved global model over the SNR grid.
    """
    configure_feddom_logging(verbose)
    cfg = _config(config_path, output_dir, None, None, None)
    for row in evaluate_checkpoint(cfg, Path(checkpoint), channel=channel):
        print(f"{row.domain:>8} {row.snr_db:5.1f} dB  PSNR {row.psnr:7.3f}  MS-SSIM {row.ms_ssim:.4f}")


if __name__ == "__main__":
    MODE = "train"  # change to "compare" or "eval" as needed

    if MODE == "train":
        run_training(
            output_dir="runs/feddom",
            strategy_name="feddom",
            rounds=5,
            verbose=True
        )
    elif MODE == "compare":
        run_compare(
            output_dir="runs/compare",
            rounds=5,
            verbose=True
        )
    elif MODE == "eval":
        run_eval(
            checkpoint="runs/feddom/checkpoints/global_r0005.fdm",
            output_dir="runs/feddom",
            channel="rayleigh",
            verbose=True
        )
