"""Value-aware importance weighting for off-policy prediction."""
from .weights import (
    DegenerateInputError,
    KktSolution,
    SingularInputError,
    WeightKind,
    WeightStats,
    clip_weights,
    compute_weights,
    is_weights,
    kkt_oracle,
    l2_to_c_weights,
    l2_to_one_weights,
    minvar_length_c_weights,
    minvar_product_weights,
    sparho_weights,
    weight_stats,
)
from .envs import TabularMDP, make_custom_mdp, make_grid_world, make_path_world, sample_episode
from .algorithms import EmphaticLearner, LearnerConfig, TraceLearner, Variant
from .dynamics import expected_mc_update, expected_return_vector, true_action_values

__version__ = "0.1.0"

__all__ = [
    "DegenerateInputError",
    "EmphaticLearner",
    "KktSolution",
    "LearnerConfig",
    "SingularInputError",
    "TabularMDP",
    "TraceLearner",
    "Variant",
    "WeightKind",
    "WeightStats",
    "clip_weights",
    "compute_weights",
    "expected_mc_update",
    "expected_return_vector",
    "is_weights",
    "kkt_oracle",
    "l2_to_c_weights",
    "l2_to_one_weights",
    "make_custom_mdp",
    "make_grid_world",
    "make_path_world",
    "minvar_length_c_weights",
    "minvar_product_weights",
    "sample_episode",
    "sparho_weights",
    "true_action_values",
    "weight_stats",
]
