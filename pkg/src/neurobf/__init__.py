"""Keyed neural obfuscation for private image release, with a contrastive
re-identification attacker, guesswork metrics, baseline encoders and a
downstream utility harness."""

from .attacker import Attacker, AttackerConfig, evaluate_attacker, train_attacker
from .data import Dataset, SyntheticSpec, generate_synthetic
from .metrics import PairScoreMatrix, aggregate, brute_force_guesswork, guesswork, reid_auc
from .nn import Rng
from .scheme import KeyedObfuscationScheme, Obfuscator, SchemeConfig, encode_images, sample_key
from .training import TrainConfig, Trainer, train_obfuscator
from .utility import ClassifierConfig, run_utility

__version__ = "0.1.0"

__all__ = [
    "Attacker",
    "AttackerConfig",
    "ClassifierConfig",
    "Dataset",
    "KeyedObfuscationScheme",
    "Obfuscator",
    "PairScoreMatrix",
    "Rng",
    "SchemeConfig",
    "SyntheticSpec",
    "TrainConfig",
    "Trainer",
    "aggregate",
    "brute_force_guesswork",
    "encode_images",
    "evaluate_attacker",
    "generate_synthetic",
    "guesswork",
    "reid_auc",
    "run_utility",
    "sample_key",
    "train_attacker",
    "train_obfuscator",
]
