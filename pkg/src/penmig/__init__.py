"""Term selection in generalized additive models with the parameter-expanded
normal-mixture-of-inverse-gammas (peNMIG) spike-and-slab prior."""

from .model import Family, Hyperparams, ModelSpec, assemble_predictor, build_model, log_likelihood
from .reparam import DesignBlock, decompose, truncation_rank
from .terms import TermSpec
from .config import ModelConfig, parse_model_config, render_model_config
from .estimator import SpikeSlabGAM
from .sampler import SamplerConfig, run_chains

__version__ = "0.1.0"

__all__ = [
    "DesignBlock",
    "Family",
    "Hyperparams",
    "ModelConfig",
    "ModelSpec",
    "SamplerConfig",
    "SpikeSlabGAM",
    "TermSpec",
    "assemble_predictor",
    "build_model",
    "decompose",
    "log_likelihood",
    "parse_model_config",
    "render_model_config",
    "run_chains",
    "truncation_rank",
]
