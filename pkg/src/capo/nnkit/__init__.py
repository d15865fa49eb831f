"""Small reverse-mode autodiff toolkit: tensors, GRU, mixtures, Adam."""

from .layers import affine, gmm_log_prob, gmm_nll, gmm_sample, gru_step, init_affine, init_gru
from .optim import AdamState, adam_update
from .store import ParamStore, load_checkpoint, save_checkpoint
from .tensor import NonFiniteGradientError, Tensor, backward, softmax, value_of

__all__ = [
    "AdamState",
    "NonFiniteGradientError",
    "ParamStore",
    "Tensor",
    "adam_update",
    "affine",
    "backward",
    "gmm_log_prob",
    "gmm_nll",
    "gmm_sample",
    "gru_step",
    "init_affine",
    "init_gru",
    "load_checkpoint",
    "save_checkpoint",
    "softmax",
    "value_of",
]
