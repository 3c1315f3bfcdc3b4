"""Speaker-embedding back-end toolkit: transforms, PLDA, score normalization,
calibration, metrics and encoder kernels on fixed-dimension embeddings."""
from .data import (EmbeddingSet, ScoreSet, Trial, TrialList, read_embeddings, read_scores,
                   read_trials, write_embeddings, write_scores, write_trials)
from .metrics import Report, compute_act_cost, compute_eer, compute_min_cost, evaluate
from .plda import PldaModel, train_plda
from .transforms import LinearTransform

__all__ = [
    "EmbeddingSet", "ScoreSet", "Trial", "TrialList", "read_embeddings", "read_scores",
    "read_trials", "write_embeddings", "write_scores", "write_trials", "Report",
    "compute_act_cost", "compute_eer", "compute_min_cost", "evaluate", "PldaModel",
    "train_plda", "LinearTransform",
]
__version__ = "0.1.0"
