"""Urban dynamics forecasting with masked-autoencoder tokens, a PFA-tuned backbone and test-time adaptation."""

from .config import ABLATIONS, ExperimentConfig, load_config
from .experiments import AblationSpec, SweepSpec, run_ablations, run_experiment, run_sweep
from .metrics import MetricReport, mae_metric, rmse_metric
from .pipeline import Pipeline, prepare_data

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS",
    "AblationSpec",
    "ExperimentConfig",
    "MetricReport",
    "Pipeline",
    "SweepSpec",
    "load_config",
    "mae_metric",
    "prepare_data",
    "rmse_metric",
    "run_ablations",
    "run_experiment",
    "run_sweep",
]
