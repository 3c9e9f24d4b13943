"""Realtime-sync tree store, device agent, and deterministic fault simulator."""

from .datatree import ABSENT, ChangeEvent, DataTree, Path, WriteOp, parse_path
from .rules import AuthContext, RuleSet, default_ruleset, load_ruleset
from .server import SyncServerCore, TokenInfo
from .agent import AgentConfig, DeviceAgent, SensorFrame, ProcessedFrame
from .simnet import ExperimentConfig, MetricsReport, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ABSENT",
    "AgentConfig",
    "AuthContext",
    "ChangeEvent",
    "DataTree",
    "DeviceAgent",
    "ExperimentConfig",
    "MetricsReport",
    "Path",
    "ProcessedFrame",
    "RuleSet",
    "SensorFrame",
    "SyncServerCore",
    "TokenInfo",
    "WriteOp",
    "default_ruleset",
    "load_ruleset",
    "parse_path",
    "run_experiment",
]
