"""Reparameterized one-layer transformers on a noisy in-context bigram task."""
from .embedding import EmbeddingBasis, standard_basis
from .losses import bayes_risk, cross_entropy, population_loss_noiseless, population_loss_noisy
from .model import AttentionKind, ModelParams, Scheme, forward, forward_batch
from .task_data import ConfigError, DomainError, Sentence, SentenceBatch, TaskConfig, sample_batch
from .training import NGD, TrainConfig, TrainTrajectory, train_noise_estimated, train_full, train_population

__all__ = [
    "EmbeddingBasis", "standard_basis", "bayes_risk", "cross_entropy", "population_loss_noiseless",
    "population_loss_noisy", "AttentionKind", "ModelParams", "Scheme", "forward", "forward_batch",
    "ConfigError", "DomainError", "Sentence", "SentenceBatch", "TaskConfig", "sample_batch", "NGD",
    "TrainConfig", "TrainTrajectory", "train_noise_estimated", "train_full", "train_population",
]
__version__ = "0.1.0"
