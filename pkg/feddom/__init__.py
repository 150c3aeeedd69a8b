from .config import ExperimentConfig, default_config, load_config, save_config
from .experiment import emit_comparison, run_experiment
from .federated_trainer import FederatedTrainer, local_train
from .fl_strategy import FederatedStrategy, StrategyConfig, create_strategy
from .jscc_model import JsccConfig, JsccModel
from .utils import get_strategy_class, validate_output_path

__all__ = [
    "ExperimentConfig",
    "FederatedStrategy",
    "FederatedTrainer",
    "JsccConfig",
    "JsccModel",
    "StrategyConfig",
    "create_strategy",
    "default_config",
    "emit_comparison",
    "get_strategy_class",
    "load_config",
    "local_train",
    "run_experiment",
    "save_config",
    "validate_output_path",
]
