"""Normalising-flow sampling for lattice field theories, with an analog
in-memory-computing cost and noise emulator.

The subpackages are importable on their own; the names re-exported here
cover the usual workflow: build an action, train a flow, sample with a
Metropolis correction and measure observables.
"""

from .errors import ConfigError, LFTError, NumericError
from .flow import MixerConfig, FlowWeights, init_weights, sample_batch, flow_log_density
from .hardware import (ConductanceMap, CostConstants, NoiseModel, degraded_inference,
                       hardware_report, layer_profiles, lora_recovery, scaling_sweep)
from .io import read_checkpoint, read_ensemble, write_checkpoint, write_ensemble
from .lattice import GaussianAction, GrapheneAction, Phi4Action, make_action
from .samplers import Ensemble, HmcParams, hmc_chain, propose_and_sample
from .training import TrainHyper, evaluate_ess, finetune_lora, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "LFTError", "NumericError",
    "MixerConfig", "FlowWeights", "init_weights", "sample_batch", "flow_log_density",
    "ConductanceMap", "CostConstants", "NoiseModel", "degraded_inference", "hardware_report",
    "layer_profiles", "lora_recovery", "scaling_sweep",
    "read_checkpoint", "read_ensemble", "write_checkpoint", "write_ensemble",
    "GaussianAction", "GrapheneAction", "Phi4Action", "make_action",
    "Ensemble", "HmcParams", "hmc_chain", "propose_and_sample",
    "TrainHyper", "evaluate_ess", "finetune_lora", "train",
]
