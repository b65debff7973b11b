from .experiments import (
    ALIASES,
    EXPERIMENTS,
    ExperimentResult,
    empirical_horizon,
    map_samples,
    run_capacity_comparison,
    run_info_prune_curve,
    run_schedule_bench,
    run_strategy_eval,
    run_withdraw_sweep,
    withdraw_curve,
)
from .recipes import MODEL_PRESETS, TrainRecipe, accuracy, held_out, preset_arch, train_model
from .tasks import KINDS, TaskDataset, TaskSpec, Vocab, concat, exclude, gen_task, majority_label

__all__ = [
    "ALIASES", "EXPERIMENTS", "ExperimentResult", "KINDS", "MODEL_PRESETS", "TaskDataset",
    "TaskSpec", "TrainRecipe", "Vocab", "accuracy", "concat", "empirical_horizon", "exclude",
    "gen_task", "held_out", "majority_label", "map_samples", "preset_arch",
    "run_capacity_comparison", "run_info_prune_curve", "run_schedule_bench",
    "run_strategy_eval", "run_withdraw_sweep", "train_model", "withdraw_curve",
]
