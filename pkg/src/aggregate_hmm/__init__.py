"""Hidden Markov models learned from aggregate population counts."""
from .evaluate import delta_nll, nll, param_distance
from .inference import cfb_continuous, cfb_discrete, standard_forward
from .learning import EmOptions, baum_welch_reference, em_fit_discrete, em_fit_ensemble, em_fit_gaussian
from .model import (AggregateSequence, DiscreteEmission, GaussianEmission, HmmParams,
                    MarginalSet, TrajectorySet, random_init, validate)
from .synth import aggregate, gen_ground_truth, sample_trajectories
from .tree import TreeModel, bethe_free_energy, run_sbp

__all__ = [
    "AggregateSequence", "DiscreteEmission", "EmOptions", "GaussianEmission", "HmmParams",
    "MarginalSet", "TrajectorySet", "TreeModel", "aggregate", "baum_welch_reference",
    "bethe_free_energy", "cfb_continuous", "cfb_discrete", "delta_nll", "em_fit_discrete",
    "em_fit_ensemble", "em_fit_gaussian", "gen_ground_truth", "nll", "param_distance",
    "random_init", "run_sbp", "sample_trajectories", "standard_forward", "validate",
]
