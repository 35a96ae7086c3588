"""Heterogeneous graph embeddings from unfolded proximal descent.

Node embeddings are the iterates of K preconditioned (optionally proximal)
gradient steps on a relation-aware energy with one trainable compatibility
matrix per directed edge type; all energy parameters are trained end to end
against a node classification loss by exact reverse-mode differentiation
through the unfolded steps.
"""

from .energy import (
    EmbeddingSet,
    EnergyConfig,
    ParamSet,
    assemble_system,
    base_embed,
    energy_grad,
    energy_value,
    exact_solution,
)
from .diff import GradSet, Tape, backward, forward_with_tape, grad_check
from .hetgraph import (
    DatasetError,
    EdgeTypeSchema,
    HeteroGraph,
    NodeTypeSchema,
    load_graph,
    save_graph,
    validate_graph,
)
from .synth import SynthConfig, build_graph, generate, preset_config
from .training import (
    Metrics,
    TrainConfig,
    evaluate,
    init_params,
    load_params,
    meta_loss,
    save_params,
    train,
)
from .unfolding import (
    UnfoldConfig,
    UnfoldResult,
    preconditioner,
    prox_relu,
    step_bound,
    step_bound_report,
    unfold,
    unfold_step,
)

__all__ = [
    "DatasetError",
    "EdgeTypeSchema",
    "EmbeddingSet",
    "EnergyConfig",
    "GradSet",
    "HeteroGraph",
    "Metrics",
    "NodeTypeSchema",
    "ParamSet",
    "SynthConfig",
    "Tape",
    "TrainConfig",
    "UnfoldConfig",
    "UnfoldResult",
    "assemble_system",
    "backward",
    "base_embed",
    "build_graph",
    "energy_grad",
    "energy_value",
    "evaluate",
    "exact_solution",
    "forward_with_tape",
    "generate",
    "grad_check",
    "init_params",
    "load_graph",
    "load_params",
    "meta_loss",
    "preconditioner",
    "preset_config",
    "prox_relu",
    "save_graph",
    "save_params",
    "step_bound",
    "step_bound_report",
    "train",
    "unfold",
    "unfold_step",
    "validate_graph",
]

__version__ = "0.1.0"
