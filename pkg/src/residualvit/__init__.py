"""Interleaved I/P feature video encoding with a residual-token student."""
from .autodiff import DimensionError, EvaluationError, Tape, Tensor, grad_check
from .distill import Corpus, TrainConfig, Video, gen_synthetic_corpus, mean_cosine_to_teacher, train
from .grounding import GroundingConfig, MomentPrediction, ground
from .reduction import ReductionConfig, retained_count
from .residual import (InterleaveConfig, ResidualTokenizer, encode_video_interleaved, naive_cost,
                       extended_cost)
from .teacher import DualEncoder, EncoderConfig, Feature, Frame

__version__ = "0.1.0"

__all__ = [
    "DimensionError", "EvaluationError", "Tape", "Tensor", "grad_check",
    "Corpus", "TrainConfig", "Video", "gen_synthetic_corpus", "mean_cosine_to_teacher", "train",
    "GroundingConfig", "MomentPrediction", "ground",
    "ReductionConfig", "retained_count",
    "InterleaveConfig", "ResidualTokenizer", "encode_video_interleaved", "naive_cost", "extended_cost",
    "DualEncoder", "EncoderConfig", "Feature", "Frame",
]
