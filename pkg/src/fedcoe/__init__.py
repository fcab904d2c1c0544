"""FedCoE: federated mixture of experts with a shared server-side gate,
correlation-guided expert aggregation and zero-shot cold start."""

from .config import ConfigError, RunConfig, parse_config
from .orchestrator import RunResult, run_federation

__version__ = "0.1.0"

__all__ = ["ConfigError", "RunConfig", "parse_config", "run_federation", "RunResult", "__version__"]
