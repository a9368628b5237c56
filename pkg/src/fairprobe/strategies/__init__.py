"""Training strategies: WCE baseline, DANN, FairDisCO, FADES, GroupDRO and MOE."""

from .config import BATCH_GRID, DOMAIN_AWARE, LR_GRID, STRATEGIES, StrategyConfig
from .objectives import (
    ADVERSARIES,
    Batch,
    adversary_objective,
    dann_objective,
    evaluate_objective,
    fades_objective,
    fairdisco_objective,
    gaussian_total_correlation,
    groupdro_objective,
    groupdro_step,
    hard_conditional_mi,
    moe_objective,
    players,
    supervised_contrastive,
    wce_objective,
)
from .training import GridResult, TrainedModel, accuracy, grid_search, init_params, train, write_history

__all__ = [
    "BATCH_GRID", "DOMAIN_AWARE", "LR_GRID", "STRATEGIES", "StrategyConfig", "ADVERSARIES", "Batch",
    "adversary_objective",
    "dann_objective", "evaluate_objective", "fades_objective", "fairdisco_objective",
    "gaussian_total_correlation", "groupdro_objective", "groupdro_step", "hard_conditional_mi",
    "moe_objective", "players", "supervised_contrastive", "wce_objective", "GridResult",
    "TrainedModel", "accuracy", "grid_search", "init_params", "train", "write_history",
]
