"""Odometry-augmented hidden Markov models for learning topological maps.

The package covers the model and its file formats, circular statistics,
scaled forward/backward inference, constrained EM reestimation, three
initializers, a corridor-world simulator, evaluation by sampled KL
divergence and essential maps, and the ``odohmm`` command line.
"""
from .circular import (bessel_i0, bessel_i1, bessel_ratio, circular_mean, estimate_von_mises,
                       invert_bessel_ratio, von_mises_density, wrap_angle)
from .evaluation import EssentialMap, KlReport, extract_essential_map, sampled_kl
from .inference import EStepTables, ImpossibleSequenceError, backward, e_step, forward, log_likelihood
from .initialization import (StateOverflowError, TagConfig, bucket_odometry, init_model_kmeans,
                             init_model_random, init_model_tag_based, tag_states)
from .model import (AugmentedHmm, ConstraintRegime, CoordinateRegime, ExperienceSequence,
                    InputError, ModelStructureError, load_model, load_sequence, save_model,
                    save_sequence, validate_model)
from .reestimation import EmConfig, EmTrace, em_step, learn
from .simulation import build_environment, canned_spec, sample_experience

__version__ = "0.1.0"

__all__ = [
    "AugmentedHmm", "ConstraintRegime", "CoordinateRegime", "EStepTables", "EmConfig", "EmTrace",
    "EssentialMap", "ExperienceSequence", "ImpossibleSequenceError", "InputError", "KlReport",
    "ModelStructureError", "StateOverflowError", "TagConfig", "backward", "bessel_i0",
    "bessel_i1", "bessel_ratio", "bucket_odometry", "build_environment", "canned_spec",
    "circular_mean", "e_step", "em_step", "estimate_von_mises", "extract_essential_map",
    "forward", "init_model_kmeans", "init_model_random", "init_model_tag_based",
    "invert_bessel_ratio", "learn", "load_model", "load_sequence", "log_likelihood",
    "sample_experience", "sampled_kl", "save_model", "save_sequence", "tag_states",
    "validate_model", "von_mises_density", "wrap_angle",
]
