"""Neural building blocks on top of :mod:`capo.nnkit.tensor`.

Parameters are passed in as mappings so the same function serves both the
differentiable training path (values are :class:`Tensor`) and the plain-numpy
inference path (values are arrays).
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from . import tensor as nt

LOG_2PI = math.log(2.0 * math.pi)


def affine(x, weight, bias=None):
    out = nt.matmul(x, weight)
    return out if bias is None else nt.add(out, bias)


def init_affine(rng: np.random.Generator, n_in: int, n_out: int, scale: float = 1.0) -> dict:
    bound = scale / math.sqrt(n_in)
    return {
        "W": rng.uniform(-bound, bound, size=(n_in, n_out)),
        "b": np.zeros(n_out),
    }


def init_gru(rng: np.random.Generator, n_in: int, n_hidden: int, scale: float = 1.0) -> dict:
    bound = scale / math.sqrt(n_hidden)
    return {
        "Wx": rng.uniform(-bound, bound, size=(n_in, 3 * n_hidden)),
        "Wh": rng.uniform(-bound, bound, size=(n_hidden, 3 * n_hidden)),
        "bx": np.zeros(3 * n_hidden),
        "bh": np.zeros(3 * n_hidden),
    }


def gru_step(h, x, params: Mapping):
    """One GRU update, gates ordered (reset, update, candidate).

    ``h`` is ``(..., H)`` and ``x`` is ``(..., I)``; the weights are fused as
    ``Wx: (I, 3H)`` and ``Wh: (H, 3H)``.
    """
    Wx, Wh = params["Wx"], params["Wh"]
    n_hidden = nt.value_of(Wh).shape[0]
    if nt.value_of(Wx).shape[1] != 3 * n_hidden:
        raise ValueError("GRU weight shapes disagree on hidden size")
    if nt.value_of(x).shape[-1] != nt.value_of(Wx).shape[0]:
        raise ValueError(
            f"GRU input has {nt.value_of(x).shape[-1]} features, weights expect {nt.value_of(Wx).shape[0]}"
        )
    if nt.value_of(h).shape[-1] != n_hidden:
        raise ValueError(f"GRU hidden has {nt.value_of(h).shape[-1]} units, weights expect {n_hidden}")

    gx = nt.add(nt.matmul(x, Wx), params["bx"])
    gh = nt.add(nt.matmul(h, Wh), params["bh"])
    H = n_hidden
    r = nt.sigmoid(nt.add(gx[..., :H], gh[..., :H]))
    z = nt.sigmoid(nt.add(gx[..., H : 2 * H], gh[..., H : 2 * H]))
    n = nt.tanh(nt.add(gx[..., 2 * H :], nt.mul(r, gh[..., 2 * H :])))
    return nt.add(n, nt.mul(z, nt.sub(h, n)))


def gmm_log_prob(y, log_weights, means, scales):
    """Log density of 2D points under diagonal Gaussian mixtures.

    Shapes: ``y (..., D)``, ``log_weights (..., M)``, ``means (..., M, D)``,
    ``scales (..., M, D)``. Returns ``(...)``.
    """
    sv = nt.value_of(scales)
    if np.any(sv <= 0):
        raise ValueError("mixture scales must be strictly positive")
    D = sv.shape[-1]
    z = nt.div(nt.sub(nt.expand_dims(y, -2), means), scales)
    comp = nt.sub(
        nt.mul(-0.5, nt.sum_(nt.mul(z, z), axis=-1)),
        nt.add(nt.sum_(nt.log(scales), axis=-1), 0.5 * D * LOG_2PI),
    )
    return nt.logsumexp(nt.add(log_weights, comp), axis=-1)


def gmm_nll(y, weights, means, scales):
    """Negative log-likelihood with mixture weights given as probabilities."""
    wv = nt.value_of(weights)
    if np.any(np.abs(wv.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("mixture weights must sum to 1")
    return nt.neg(gmm_log_prob(y, nt.log(weights), means, scales))


def gmm_sample(log_weights, means, scales, rng: np.random.Generator, uniforms=None, normals=None):
    """Reparameterized draw from a diagonal mixture.

    The component index is a discrete (non-differentiable) choice; the draw is
    ``mean + scale * eps`` so gradients reach the chosen component's mean and
    scale. Pre-drawn ``uniforms``/``normals`` allow common random numbers.
    """
    lw = nt.value_of(log_weights)
    mv = nt.value_of(means)
    batch = lw.shape[:-1]
    if uniforms is None:
        uniforms = rng.random(batch)
    if normals is None:
        normals = rng.standard_normal(batch + mv.shape[-1:])
    probs = np.exp(lw - lw.max(axis=-1, keepdims=True))
    cdf = np.cumsum(probs, axis=-1)
    cdf /= cdf[..., -1:]
    idx = (uniforms[..., None] > cdf).sum(axis=-1)
    idx = np.minimum(idx, lw.shape[-1] - 1)
    onehot = (np.arange(lw.shape[-1]) == idx[..., None]).astype(np.float64)[..., None]
    mu = nt.sum_(nt.mul(means, onehot), axis=-2)
    sd = nt.sum_(nt.mul(scales, onehot), axis=-2)
    return nt.add(mu, nt.mul(sd, normals))
