"""Mixture-of-memories linear recurrent layers in NumPy.

The layer keeps several matrix-valued memories, routes each token to a
top-k subset of them, and always updates an optional shared memory. The
subpackage :mod:`mom.recall` trains small models on associative recall.
"""
from .errors import InconsistentFunction, InvalidArgument, TrainingDiverged, UnsupportedOperation
from .kernels import GateValues, RuleKind, UpdateRuleSpec, read, scan, step
from .layer import (
    MomLayerParams,
    MomState,
    forward_sequence_naive,
    forward_step,
    init_layer_params,
)
from .router import (
    LoadBalanceStats,
    RouterDecision,
    RouterParams,
    aux_load_balance_loss,
    route,
)
from .varlen import VarlenPlan, build_plan, dispatch, forward_varlen, gather, scatter_combine
from .backward import layer_backward, layer_forward
from .gradcheck import GradReport, check_layer_gradients, finite_diff_grad, parallel_form_oracle

__all__ = [
    "InconsistentFunction", "InvalidArgument", "TrainingDiverged", "UnsupportedOperation",
    "GateValues", "RuleKind", "UpdateRuleSpec", "read", "scan", "step",
    "MomLayerParams", "MomState", "forward_sequence_naive", "forward_step", "init_layer_params",
    "LoadBalanceStats", "RouterDecision", "RouterParams", "aux_load_balance_loss", "route",
    "VarlenPlan", "build_plan", "dispatch", "forward_varlen", "gather", "scatter_combine",
    "layer_backward", "layer_forward",
    "GradReport", "check_layer_gradients", "finite_diff_grad", "parallel_form_oracle",
]
