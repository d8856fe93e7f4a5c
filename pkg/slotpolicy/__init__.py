"""
slotpolicy: Object-centric slot encoders and GMM behavior cloning

A numpy-only pipeline: a small reverse-mode autodiff engine, a slot
attention video encoder, a transformer policy with a Gaussian-mixture head,
a 2.5D tabletop simulator with scripted experts, and the evaluation
protocol over generalization levels.
"""

__version__ = "0.2.0"

from .config import Config, load_config
from .dataset import EpisodeRecord, EpisodeStore, generate_dataset, load_batch
from .evaluation import EvalReport, ExpertController, PolicyController, decompose_rollout, evaluate, rollout
from .policy import Action, SlotPolicy, gmm_nll, sample_action
from .rng import Stream
from .savi import HolisticEncoder, Savi, SaviConfig, build_encoder
from .sim import MiniShape, SimConfig
from .trainer import Trainer

__all__ = [
    "Action", "Config", "EpisodeRecord", "EpisodeStore", "EvalReport", "ExpertController", "HolisticEncoder", "MiniShape",
    "PolicyController", "Savi", "SaviConfig", "SimConfig", "SlotPolicy", "Stream", "Trainer",
    "build_encoder", "decompose_rollout", "evaluate", "generate_dataset", "gmm_nll", "load_batch",
    "load_config", "rollout", "sample_action",
]
