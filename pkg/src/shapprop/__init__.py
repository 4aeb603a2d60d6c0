"""Layer-wise SHAP value propagation for compute-graph models."""

from .engine import (
    REVEAL_CANCEL,
    REVEAL_CANCEL_MEAN,
    RESCALE,
    Attribution,
    RuleConfig,
    explain,
    explain_loss,
    explain_single,
    explain_stack,
)
from .graph import ComputeGraph, Tree, forward, load_model, save_model
from .oracle import shapley_background, shapley_single_reference
from .treeshap import tree_shap_single_reference

__version__ = "0.1.0"
