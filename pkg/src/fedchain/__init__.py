"""Online federated traffic prediction over a simulated permissioned blockchain."""

from .experiment import ExperimentConfig, run_experiment
from .federation import Federation, fedavg
from .nn import ModelArch, init_model

__all__ = ["ExperimentConfig", "Federation", "ModelArch", "fedavg", "init_model",
           "run_experiment"]
