"""Dynamic Poisson factorization: time-evolving user and item factors for
implicit-feedback recommendation, fit by mean-field variational inference."""

__version__ = "0.1.0"

from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .data import InteractionTensor, RawEvent, TimeBucketing, binarize, bucket_events, rolling_split
from .evaluation import MetricReport, evaluate_rolling
from .inference import FitConfig, FitResult, VariationalState, elbo, fit, init_variational
from .model import Hyperparams, LatentState, simulate
from .predict import predict_score, rank_items

__all__ = [
    "Checkpoint", "FitConfig", "FitResult", "Hyperparams", "InteractionTensor", "LatentState",
    "MetricReport", "RawEvent", "TimeBucketing", "VariationalState", "binarize",
    "bucket_events", "elbo", "evaluate_rolling", "fit", "init_variational", "predict_score",
    "rank_items", "read_checkpoint", "rolling_split", "simulate", "write_checkpoint",
]
