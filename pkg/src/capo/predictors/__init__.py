"""Trajectory predictors behind one sampling / scoring interface."""

from .attention import AttentionConfig, AttentionPredictor, attention_head, ego_attention
from .base import PredictedTrajectorySet, PredictionModel
from .cv import ConstantVelocityGaussian
from .oracle import OraclePredictor
from .seq2seq import Seq2SeqPredictor

MODEL_KINDS = {
    "seq2seq": Seq2SeqPredictor,
    "attention": AttentionPredictor,
    "cv_gaussian": ConstantVelocityGaussian,
    "oracle": OraclePredictor,
}


def build_model(kind: str, **config) -> PredictionModel:
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind '{kind}' (expected one of {sorted(MODEL_KINDS)})") from None
    return cls(**config)


__all__ = [
    "AttentionConfig",
    "AttentionPredictor",
    "ConstantVelocityGaussian",
    "MODEL_KINDS",
    "OraclePredictor",
    "PredictedTrajectorySet",
    "PredictionModel",
    "Seq2SeqPredictor",
    "attention_head",
    "build_model",
    "ego_attention",
]
