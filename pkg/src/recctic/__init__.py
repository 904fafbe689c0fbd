"""Continuous-time cascade models with recurrent node states."""

__version__ = "0.1.0"

from .episodes import Cascade, Episode, censor, load_cascades, load_episodes, make_bins
from .evaluation import MetricsReport, evaluate
from .generator import SimulationConfig, generate, generate_conditioned, marginal_infection_probs
from .inference import TrainConfig, importance_log_likelihood, joint_log_prob, train
from .models import ClassicCTIC, EmbCTIC, RecCTIC, build_model, load_model, save_model
from .synth import SyntheticSpec, build_graph, sample_corpus

__all__ = [
    "Cascade",
    "ClassicCTIC",
    "EmbCTIC",
    "Episode",
    "MetricsReport",
    "RecCTIC",
    "SimulationConfig",
    "SyntheticSpec",
    "TrainConfig",
    "build_graph",
    "build_model",
    "censor",
    "evaluate",
    "generate",
    "generate_conditioned",
    "importance_log_likelihood",
    "joint_log_prob",
    "load_cascades",
    "load_episodes",
    "load_model",
    "make_bins",
    "marginal_infection_probs",
    "sample_corpus",
    "save_model",
    "train",
]
