"""GRU encoder / autoregressive GRU decoder emitting a Gaussian mixture per step.

Positions are modelled through per-step displacements: step ``t`` is
``y_t = y_{t-1} + d_t`` with ``d_t`` drawn from a diagonal mixture whose
parameters come from the decoder state. The Jacobian of that change of
variables is 1, so the displacement log-density is the position log-density.

Every function takes a nested parameter mapping whose leaves are either numpy
arrays (fast inference) or nnkit Tensors (training). With plain arrays the
encoder and the sampler dispatch to compiled loops that do the same arithmetic.
"""

from __future__ import annotations

import math

import numpy as np

from .. import _kernels
from ..nnkit import init_affine, init_gru
from ..nnkit import layers as L
from ..nnkit import tensor as nt

VEL_SCALE = 2.0  # m/s
LAT_SCALE = 5.0  # m
MIN_SCALE = 0.05  # m/s, floor on the per-step velocity std
SCALE_BIAS = math.log(math.expm1(0.45))


def velocities(positions: np.ndarray, dt: float) -> np.ndarray:
    """Finite-difference velocities of ``(..., L, 2)`` positions, ``(..., L-1, 2)``."""
    return np.diff(positions, axis=-2) / dt


def step_features(vel, pos, vel_scale: float = VEL_SCALE, lat_scale: float = LAT_SCALE):
    """Decoder/encoder input from velocity and position: (vx, vy, y) scaled."""
    return nt.concat([nt.mul(vel, 1.0 / vel_scale), nt.mul(pos[..., 1:2], 1.0 / lat_scale)], axis=-1)


def _plain(tree) -> bool:
    return all(type(v) is np.ndarray for v in tree.values())


def init_decoder(rng: np.random.Generator, n_in: int, hidden: int, n_components: int) -> dict:
    n_out = n_components * 5
    head = init_affine(rng, hidden, n_out, scale=0.05)
    skip = init_affine(rng, n_in, n_out, scale=0.05)
    # raw scales live in the last 2M outputs
    head["b"][3 * n_components :] = SCALE_BIAS
    return {
        "gru": init_gru(rng, n_in, hidden),
        "head": {"W": head["W"], "b": head["b"], "Wskip": skip["W"]},
    }


def encode(gru_params, feats):
    """Run a GRU over ``feats (R, L, F)``; returns the final hidden ``(R, H)``."""
    fv = nt.value_of(feats)
    if type(feats) is not nt.Tensor and _plain(gru_params) and fv.ndim == 3:
        p = gru_params
        return _kernels.gru_encode(np.ascontiguousarray(fv), p["Wx"], p["Wh"], p["bx"], p["bh"])
    H = nt.value_of(gru_params["Wh"]).shape[0]
    h = np.zeros(fv.shape[:-2] + (H,))
    for j in range(fv.shape[-2]):
        h = L.gru_step(h, feats[..., j, :], gru_params)
    return h


def head_outputs(head, h, x_in, n_components: int, dt: float):
    """Mixture parameters for displacement: (log_weights, means, scales)."""
    out = nt.add(nt.add(nt.matmul(h, head["W"]), nt.matmul(x_in, head["Wskip"])), head["b"])
    M = n_components
    logits = out[..., :M]
    shape = nt.value_of(out).shape[:-1] + (M, 2)
    means = nt.mul(nt.reshape(out[..., M : 3 * M], shape), dt)
    raw = nt.reshape(out[..., 3 * M : 5 * M], shape)
    scales = nt.mul(nt.add(nt.softplus(raw), MIN_SCALE), dt)
    return nt.log_softmax(logits, axis=-1), means, scales


def teacher_forced_log_prob(
    dec, h0, last_pos, last_vel, future, n_components: int, dt: float, feature_scales=(VEL_SCALE, LAT_SCALE)
):
    """Sum over the horizon of per-step log-densities, shape ``h0.shape[:-1]``.

    ``future`` is ``(R, T, 2)``; ``last_pos``/``last_vel`` are ``(R, 2)``.
    """
    future = np.asarray(future, float)
    T = future.shape[-2]
    prev_pos = np.concatenate([last_pos[..., None, :], future[..., :-1, :]], axis=-2)
    prev_vel = np.concatenate([last_vel[..., None, :], np.diff(prev_pos, axis=-2) / dt], axis=-2)
    feats = step_features(prev_vel, prev_pos, *feature_scales)
    h = h0
    outs = []
    for t in range(T):
        h = L.gru_step(h, feats[..., t, :], dec["gru"])
        outs.append(h)
    hs = nt.stack(outs, axis=-2)  # (R, T, H)
    logw, means, scales = head_outputs(dec["head"], hs, feats, n_components, dt)
    disp = future - prev_pos
    return nt.sum_(L.gmm_log_prob(disp, logw, means, scales), axis=-1)


def sample_rollout(
    dec, h0, last_pos, last_vel, n_components: int, dt: float, T: int, rng, noise=None, feature_scales=(VEL_SCALE, LAT_SCALE)
):
    """Autoregressive draw; returns positions ``(R, T, 2)``.

    ``noise`` optionally supplies ``(uniforms (T, R), normals (T, R, 2))`` for
    common random numbers. With Tensor params the result is a Tensor that is
    differentiable through the reparameterised Gaussian draws.
    """
    R = np.asarray(nt.value_of(last_pos)).shape[0]
    if noise is None:
        uniforms = rng.random((T, R))
        normals = rng.standard_normal((T, R, 2))
    else:
        uniforms, normals = noise
    if type(h0) is not nt.Tensor and _plain(dec["gru"]) and _plain(dec["head"]):
        g, hd = dec["gru"], dec["head"]
        consts = np.array([dt, *feature_scales, MIN_SCALE, n_components], float)
        return _kernels.gmm_rollout(
            np.ascontiguousarray(h0, dtype=np.float64),
            np.ascontiguousarray(last_pos, dtype=np.float64),
            np.ascontiguousarray(last_vel, dtype=np.float64),
            g["Wx"], g["Wh"], g["bx"], g["bh"], hd["W"], hd["Wskip"], hd["b"],
            np.ascontiguousarray(uniforms, dtype=np.float64),
            np.ascontiguousarray(normals, dtype=np.float64),
            consts,
        )
    h = h0
    pos, vel = last_pos, last_vel
    out = []
    for t in range(T):
        x_in = step_features(vel, pos, *feature_scales)
        h = L.gru_step(h, x_in, dec["gru"])
        logw, means, scales = head_outputs(dec["head"], h, x_in, n_components, dt)
        disp = L.gmm_sample(logw, means, scales, rng, uniforms=uniforms[t], normals=normals[t])
        pos = nt.add(pos, disp)
        vel = nt.mul(disp, 1.0 / dt)
        out.append(pos)
    return nt.stack(out, axis=-2)
