"""Critical load restoration: feeder model, forecasts, MPC baselines and curriculum RL."""
from .network import NetworkModel, load_network, save_network, validate_network
from .fixtures import build_fixture_13bus, build_fixture_123bus, build_toy_network
from .forecast import ForecastConfig, ScenarioSet, build_dataset, synthetic_history
from .env import STAGE1, STAGE2, ClrEnv, rollout
from .mpc import MpcPolicy, nr_config, rc_config

__version__ = "0.1.0"

__all__ = [
    "NetworkModel", "load_network", "save_network", "validate_network",
    "build_fixture_13bus", "build_fixture_123bus", "build_toy_network",
    "ForecastConfig", "ScenarioSet", "build_dataset", "synthetic_history",
    "STAGE1", "STAGE2", "ClrEnv", "rollout", "MpcPolicy", "nr_config", "rc_config",
]
