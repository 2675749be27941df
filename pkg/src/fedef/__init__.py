"""Simulation library for compressed federated learning with error feedback."""

from .compressors import (CompressorSpec, bit_cost, compress, deviation_bound, materialize,
                          measure_deviation)
from .engine import FederationEngine, RunConfig, run_experiment, sample_participants
from .errors import (ConfigurationError, DivergenceError, FedEFError, InvariantViolation,
                     NumericInputError, StructuralError, UndefinedRatioError)
from .local_trainer import ClientState, Hyperparams, ef_upload, run_local_round
from .metrics import RoundRecord, grad_metrics, measure_q_a, write_csv, write_summary_json
from .param_space import GroupLayout, ParamVector, add_scaled, group_l1_norms, sq_norm
from .problems import ProblemSpec, make_quadratic, shard_partition, synth_client_gradients

__version__ = "0.1.0"

__all__ = [
    "CompressorSpec", "bit_cost", "compress", "deviation_bound", "materialize", "measure_deviation",
    "FederationEngine", "RunConfig", "run_experiment", "sample_participants",
    "ConfigurationError", "DivergenceError", "FedEFError", "InvariantViolation", "NumericInputError",
    "StructuralError", "UndefinedRatioError",
    "ClientState", "Hyperparams", "ef_upload", "run_local_round",
    "RoundRecord", "grad_metrics", "measure_q_a", "write_csv", "write_summary_json",
    "GroupLayout", "ParamVector", "add_scaled", "group_l1_norms", "sq_norm",
    "ProblemSpec", "make_quadratic", "shard_partition", "synth_client_gradients",
]
