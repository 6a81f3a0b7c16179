"""Two-tier machine model, step engines and training drivers."""
from .engine import EngineError, SentinelStepper, StepStats
from .machine import PRESETS, MachineConfig, TierConfig, reference_hw
from .training import PolicyKind, SimResult, compare_policies, run_training, sweep_mi
from .workload import Workload, compile_workload

__all__ = [
    "EngineError", "MachineConfig", "PRESETS", "PolicyKind", "SentinelStepper", "SimResult", "StepStats",
    "TierConfig", "Workload", "compare_policies", "compile_workload", "reference_hw", "run_training", "sweep_mi",
]
