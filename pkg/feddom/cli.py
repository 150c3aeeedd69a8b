import argparse
import logging
import sys
from pathlib import Path
from typing import NoReturn, Optional, Sequence

from feddom.channel import CHANNEL_KINDS
from feddom.config import ExperimentConfig, default_config, load_config
from feddom.data import materialize_synthetic
from feddom.experiment import (COMPARISON_STRATEGIES, SWEEP_LAMBDAS, emit_comparison,
                               evaluate_checkpoint, latest_checkpoint, run_analysis, run_comparison,
                               run_experiment, sweep_lambda)
from feddom.logging_config import configure_feddom_logging
from feddom.utils import ConfigurationError, DivergenceError, UsageError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class FedDomCLI:
    """
    Command-line interface for generating data, running federated experiments and analysing them.
    """

    def __init__(self, argv: Optional[Sequence[str]] = None) -> None:
        """
        Build the parser and parse ``argv`` (default: ``sys.argv[1:]``).

        :raises SystemExit: With code 1 on invalid arguments.
        """
        self.parser = _Parser(description="Federated cross-domain training of a JSCC image codec.")
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument("--config", help="Path to a feddom-config/1 JSON file (default: desk-scale defaults)")
        common.add_argument("--seed", type=int, help="Override the experiment seed")
        common.add_argument("--threads", type=int, help="Worker threads for client training")
        common.add_argument("--out", help="Override the output directory")
        common.add_argument("--rounds", type=int, help="Override the number of communication rounds")
        common.add_argument("--verbose", action="store_true", help="Enable verbose logging")
        common.add_argument("--log-file", help="Also append INFO-level log records to this file")

        subparsers = self.parser.add_subparsers(
            dest="command",
            required=True,
            parser_class=_Parser,
            help="Command to run (gen-data | run | sweep-lambda | compare | analyze | eval)."
        )

        subparsers.add_parser("gen-data", parents=[common],
                              help="Write the synthetic domains as PPM folders plus a manifest")

        run_parser = subparsers.add_parser("run", parents=[common], help="Run one experiment")
        run_parser.add_argument("--resume", action="store_true", help="Continue from the last checkpoint")
        run_parser.add_argument("--channel", choices=CHANNEL_KINDS, help="Evaluation channel")

        sweep_parser = subparsers.add_parser("sweep-lambda", parents=[common],
                                             help="Run FedDoM for several generalization-loss weights")
        sweep_parser.add_argument("--lambdas", type=float, nargs="+", default=list(SWEEP_LAMBDAS),
                                  help="Lambda values to sweep")

        compare_parser = subparsers.add_parser("compare", parents=[common],
                                               help="Run several strategies with shared seeds and compare them")
        compare_parser.add_argument("--strategies", nargs="+", default=list(COMPARISON_STRATEGIES),
                                    help="Strategies to compare")
        compare_parser.add_argument("--snr", type=float, help="Compare at one SNR point only")

        analyze_parser = subparsers.add_parser("analyze", parents=[common], help="Convergence diagnostics of a run")
        analyze_parser.add_argument("--run-dir", help="Run directory (default: the config's output directory)")
        analyze_parser.add_argument("--probes", type=int, default=8, help="Random probes per constant")
        analyze_parser.add_argument("--window", type=int, default=1, help="Moving-average width for loss checks")

        eval_parser = subparsers.add_parser("eval", parents=[common], help="Evaluate a checkpoint over an SNR grid")
        eval_parser.add_argument("--checkpoint", help="FDM1 weights (default: latest checkpoint in the output dir)")
        eval_parser.add_argument("--channel", choices=CHANNEL_KINDS, help="Evaluation channel")
        eval_parser.add_argument("--snr", type=float, nargs="+", help="SNR points in dB")

        self.args = self.parser.parse_args(argv)

    def load_config(self) -> ExperimentConfig:
        """
        Load the config file (or defaults) and apply command-line overrides.

        :raises ConfigurationError: If the file is missing or invalid.
        """
        cfg = load_config(Path(self.args.config)) if self.args.config else default_config()
        if self.args.seed is not None:
            cfg.seed = self.args.seed
        if self.args.threads is not None:
            if self.args.threads < 1:
                raise UsageError(f"--threads must be >= 1; received: {self.args.threads}")
            cfg.threads = self.args.threads
        if self.args.out is not None:
            cfg.output_dir = self.args.out
        if self.args.rounds is not None:
            if self.args.rounds < 1:
                raise UsageError(f"--rounds must be >= 1; received: {self.args.rounds}")
            cfg.strategy.rounds = self.args.rounds
        if getattr(self.args, "channel", None) and self.args.command == "run":
            cfg.eval.channel = self.args.channel
        return cfg

    def gen_data(self, cfg: ExperimentConfig) -> None:
        if self.args.seed is not None:
            cfg.dataset.seed = self.args.seed
        manifest = materialize_synthetic(cfg.dataset, Path(cfg.output_dir))
        logger.info(f"Dataset with domains {manifest.domain_names} written to {cfg.output_dir}")

    def run_experiment(self, cfg: ExperimentConfig) -> None:
        rows = run_experiment(cfg, resume=self.args.resume, verbose=self.args.verbose)
        emit_comparison(rows, Path(cfg.output_dir))

    def sweep_lambda(self, cfg: ExperimentConfig) -> None:
        sweep_lambda(cfg, self.args.lambdas, verbose=self.args.verbose)

    def compare(self, cfg: ExperimentConfig) -> None:
        table = run_comparison(cfg, self.args.strategies, verbose=self.args.verbose, snr_db=self.args.snr)
        logger.info(f"\n{table.to_string(index=False)}")

    def analyze(self, cfg: ExperimentConfig) -> None:
        if self.args.probes < 1:
            raise UsageError(f"--probes must be >= 1; received: {self.args.probes}")
        run_dir = Path(self.args.run_dir) if self.args.run_dir else None
        run_analysis(cfg, run_dir, probes=self.args.probes, window=self.args.window)

    def evaluate(self, cfg: ExperimentConfig) -> None:
        checkpoint = Path(self.args.checkpoint) if self.args.checkpoint else latest_checkpoint(Path(cfg.output_dir))
        if checkpoint is None:
            raise ConfigurationError(f"No checkpoint found in '{cfg.output_dir}'; pass --checkpoint")
        rows = evaluate_checkpoint(cfg, checkpoint, channel=self.args.channel, snr_points=self.args.snr)
        for row in rows:
            logger.info(f"{row.domain:>8} {row.snr_db:5.1f} dB  PSNR {row.psnr:7.3f}  MS-SSIM {row.ms_ssim:.4f}")

    def run(self) -> int:
        """
        Execute the selected command.

        :return: Exit code: 0 success, 1 usage, 2 configuration, 3 divergence.
        """
        configure_feddom_logging(self.args.verbose, Path(self.args.log_file) if self.args.log_file else None)
        handlers = {
            "gen-data": self.gen_data,
            "run": self.run_experiment,
            "sweep-lambda": self.sweep_lambda,
            "compare": self.compare,
            "analyze": self.analyze,
            "eval": self.evaluate,
        }
        try:
            cfg = self.load_config()
            handlers[self.args.command](cfg)
        except DivergenceError as e:
            logger.error(f"Divergence in round {e.round_index}, client {e.client_id}: {e}")
            return EXIT_DIVERGENCE
        except UsageError as e:
            logger.error(str(e))
            return EXIT_USAGE
        except ConfigurationError as e:
            logger.error(str(e))
            return EXIT_CONFIG
        return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Entry point for the FedDomCLI.
    """
    cli = FedDomCLI(argv)
    return cli.run()


if __name__ == "__main__":
    sys.exit(main())
