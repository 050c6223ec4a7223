"""Shared-base plus per-objective-delta optimizer states for alternating multi-objective training."""

from .baselines import METHODS, Alternate, DualOptim, FLAdapted, Joint, fl_adapted_step, joint_step
from .core import AdamW, AdamWParams, Muon, MuonParams, adamw_step, muon_step, newton_schulz5
from .dualoptim_plus import DualOptimPlus, DualState, dualoptim_plus_step, init_dual_state
from .harness import ConfigError, RunConfig, RunReport, build_config, run_experiment, sweep
from .quant8 import QuantizedOptimizer, dequantize, dynamic_codebook, quantize
from .schedule import AlternationSchedule, CyclicSchedule, LrSchedule
from .theory import GradientDynamics, closed_form_limits, simulate_states, verify_grid

__all__ = [
    "METHODS", "Alternate", "DualOptim", "FLAdapted", "Joint", "fl_adapted_step", "joint_step",
    "AdamW", "AdamWParams", "Muon", "MuonParams", "adamw_step", "muon_step", "newton_schulz5",
    "DualOptimPlus", "DualState", "dualoptim_plus_step", "init_dual_state",
    "ConfigError", "RunConfig", "RunReport", "build_config", "run_experiment", "sweep",
    "QuantizedOptimizer", "dequantize", "dynamic_codebook", "quantize",
    "AlternationSchedule", "CyclicSchedule", "LrSchedule",
    "GradientDynamics", "closed_form_limits", "simulate_states", "verify_grid",
]
