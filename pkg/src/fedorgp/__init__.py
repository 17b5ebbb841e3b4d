"""Heterogeneous federated learning with server-trained, mutually orthogonal
class prototypes, simulated in float64 numpy."""

__version__ = "0.1.0"

from .federation import ExperimentConfig, ExperimentReport, run_experiment  # noqa: E402

__all__ = ["ExperimentConfig", "ExperimentReport", "run_experiment", "__version__"]
