"""Visual-token pruning with cross-layer bypass on a toy decoder-only transformer."""

__version__ = "0.1.0"

from .cost_model import CostInputs, bypass_overhead, layer_flops, schedule_flops, total_flops  # noqa: E402
from .estimators import CapabilityProfiler, PruningLayerSelector, TokenPruner  # noqa: E402
from .layer_select import (  # noqa: E402
    PerformanceProfile,
    SelectionResult,
    eligible_layers,
    exhaustive_selector,
    optimal_pruning_layers,
    profile_selection_capability,
)
from .model import ModelConfig, ModelWeights, TokenSequence, forward_full, init_model  # noqa: E402
from .pruning import PruneSchedule, Stage, run_with_schedule  # noqa: E402

__all__ = [
    "CapabilityProfiler", "CostInputs", "ModelConfig", "ModelWeights", "PerformanceProfile", "PruneSchedule",
    "PruningLayerSelector", "TokenPruner",
    "SelectionResult", "Stage", "TokenSequence", "bypass_overhead", "eligible_layers",
    "exhaustive_selector", "forward_full", "init_model", "layer_flops", "optimal_pruning_layers",
    "profile_selection_capability", "run_with_schedule", "schedule_flops", "total_flops",
]
