"""Ego-attention forecaster.

Every agent (ego included) is summarised by a GRU encoder. The ego decoder
is conditioned on a multi-head attention read-out in which the ego encoding
supplies the only query and the ego plus all agents supply keys and values.
Agent decoders see only their own encoding, so agents never attend to each
other and the attention coefficients measure how much the ego's forecast
leans on each agent.

Parameter groups: the ego encoder, attention projections and ego decoder
form ``ego``; the agent encoder (whose encodings feed both sides) is
``shared``; the agent decoder is ``agent``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..nnkit import init_affine, init_gru
from ..nnkit import tensor as nt
from ..simworld import ConfigError
from . import gru_gmm as G
from .base import PredictedTrajectorySet, PredictionModel

EGO_VEL_SCALE = 20.0  # m/s
REL_X_SCALE = 50.0  # m


@dataclass(frozen=True)
class AttentionConfig:
    n_heads: int = 2
    key_dim: int = 16
    embed_dim: int = 32

    def validate(self, prefix: str = "attention") -> "AttentionConfig":
        for name in ("n_heads", "key_dim", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{prefix}.{name}", "must be >= 1")
        return self


def attention_head(ego_encoding, agent_encodings, Wq, Wk, Wv):
    """Single head: the ego queries itself and every agent.

    ``ego_encoding (..., E)``, ``agent_encodings (..., N, E)``, projections
    ``(E, d_k)``. Returns ``(context (..., d_k), alpha (..., N + 1))`` where
    ``alpha[..., 0]`` is the ego's own coefficient.
    """
    ctx, alpha = ego_attention(
        ego_encoding,
        agent_encodings,
        nt.expand_dims(Wq, 0),
        nt.expand_dims(Wk, 0),
        nt.expand_dims(Wv, 0),
    )
    return ctx, alpha[..., 0, :]


def ego_attention(ego_encoding, agent_encodings, Wq, Wk, Wv):
    """Multi-head version with stacked projections ``(H, E, d_k)``.

    Returns the concatenated context ``(..., H * d_k)`` and coefficients
    ``(..., H, N + 1)``.
    """
    ev = nt.value_of(ego_encoding)
    av = nt.value_of(agent_encodings)
    if av.shape[-1] != ev.shape[-1]:
        raise ValueError(f"ego encoding has size {ev.shape[-1]}, agent encodings {av.shape[-1]}")
    H, E, dk = nt.value_of(Wq).shape
    if E != ev.shape[-1]:
        raise ValueError(f"projections expect size {E}, encodings have {ev.shape[-1]}")
    everyone = nt.concat([nt.expand_dims(ego_encoding, -2), agent_encodings], axis=-2)  # (..., N+1, E)
    q = nt.matmul(nt.expand_dims(nt.expand_dims(ego_encoding, -2), -2), Wq)  # (..., H, 1, dk)
    keys = nt.matmul(nt.expand_dims(everyone, -3), Wk)  # (..., H, N+1, dk)
    values = nt.matmul(nt.expand_dims(everyone, -3), Wv)
    scores = nt.mul(nt.matmul(q, nt.swapaxes(keys, -1, -2)), 1.0 / math.sqrt(dk))  # (..., H, 1, N+1)
    alpha = nt.softmax(scores, axis=-1)
    ctx = nt.matmul(alpha, values)  # (..., H, 1, dk)
    lead = ev.shape[:-1]
    ctx = nt.reshape(ctx, lead + (H * dk,))
    return ctx, nt.reshape(alpha, lead + (H, av.shape[-2] + 1))


class AttentionPredictor(PredictionModel):
    kind = "attention"
    k_test = 1
    has_attention = True

    def __init__(
        self,
        hidden: int = 32,
        n_components: int = 2,
        n_heads: int = 2,
        key_dim: int = 16,
        embed_dim: int = 32,
        dt: float = 0.1,
        horizon: int = 30,
        seed: int = 0,
    ):
        super().__init__()
        self.att = AttentionConfig(n_heads, key_dim, embed_dim).validate()
        self.hidden = int(hidden)
        self.n_components = int(n_components)
        self.dt = float(dt)
        self.horizon = int(horizon)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        H, E, dk = n_heads, embed_dim, key_dim
        st = self.store
        st.add("agent_enc", init_gru(rng, 4, hidden), "shared")
        st.add("ego_enc", init_gru(rng, 3, hidden), "ego")
        st.add("embed_ego", init_affine(rng, hidden, E), "ego")
        st.add("embed_agent", init_affine(rng, hidden, E), "ego")
        bound = 1.0 / math.sqrt(E)
        st.add(
            "attn",
            {name: rng.uniform(-bound, bound, size=(H, E, dk)) for name in ("Wq", "Wk", "Wv")},
            "ego",
        )
        st.add("ego_init", init_affine(rng, hidden + H * dk, hidden), "ego")
        ego_dec = G.init_decoder(rng, 3, hidden, n_components)
        st.add("ego_dec.gru", ego_dec["gru"], "ego")
        st.add("ego_dec.head", ego_dec["head"], "ego")
        st.add("agent_init", init_affine(rng, hidden, hidden), "agent")
        dec = G.init_decoder(rng, 3, hidden, n_components)
        st.add("agent_dec.gru", dec["gru"], "agent")
        st.add("agent_dec.head", dec["head"], "agent")

    def config(self) -> dict:
        return {
            "hidden": self.hidden,
            "n_components": self.n_components,
            "n_heads": self.att.n_heads,
            "key_dim": self.att.key_dim,
            "embed_dim": self.att.embed_dim,
            "dt": self.dt,
            "horizon": self.horizon,
            "seed": self.seed,
        }

    # -- encoders -----------------------------------------------------------

    def _agent_encode(self, tree, agents_past, ego_past):
        """Agent encodings ``(B, N, hidden)`` plus last position/velocity rows."""
        past = np.asarray(agents_past, float)
        B, N, P, _ = past.shape
        rows = past.reshape(B * N, P, 2)
        vel = G.velocities(rows, self.dt)
        rel = (past[..., 0] - np.asarray(ego_past, float)[:, None, :, 0]) / REL_X_SCALE
        feats = np.concatenate([G.step_features(vel, rows[:, 1:]), rel.reshape(B * N, P, 1)[:, 1:]], axis=-1)
        h = G.encode(tree["agent_enc"], feats)
        return nt.reshape(h, (B, N, self.hidden)), rows[:, -1], vel[:, -1]

    def _ego_encode(self, tree, ego_past):
        ego = np.asarray(ego_past, float)
        vel = G.velocities(ego, self.dt)
        feats = G.step_features(vel, ego[:, 1:], EGO_VEL_SCALE, G.LAT_SCALE)
        return G.encode(tree["ego_enc"], feats)

    def _attend(self, tree, h_ego, h_agents):
        e0 = nt.tanh(nt.add(nt.matmul(h_ego, tree["embed_ego"]["W"]), tree["embed_ego"]["b"]))
        ea = nt.tanh(nt.add(nt.matmul(h_agents, tree["embed_agent"]["W"]), tree["embed_agent"]["b"]))
        a = tree["attn"]
        return ego_attention(e0, ea, a["Wq"], a["Wk"], a["Wv"])

    # -- public surface -----------------------------------------------------

    def forward(self, agents_past, ego_past, agents_future, ego_future, params=None):
        """Teacher-forced log-likelihoods and attention.

        Returns ``(ego_log_prob (B,), agent_log_probs (B, N), alpha (B, H, N+1))``.
        """
        tree = self.store.nested(params)
        agents_past = np.asarray(agents_past, float)
        ego_past = np.asarray(ego_past, float)
        B, N = agents_past.shape[:2]
        h_agents, last_pos, last_vel = self._agent_encode(tree, agents_past, ego_past)
        h_ego = self._ego_encode(tree, ego_past)
        ctx, alpha = self._attend(tree, h_ego, h_agents)

        # ego: decode the deviation from constant-velocity extrapolation
        init = tree["ego_init"]
        h0 = nt.tanh(nt.add(nt.matmul(nt.concat([h_ego, ctx], axis=-1), init["W"]), init["b"]))
        ego_resid, ego_last, ego_vel = self._ego_residual(ego_past, np.asarray(ego_future, float))
        ego_lp = G.teacher_forced_log_prob(
            tree["ego_dec"], h0, ego_last, ego_vel, ego_resid, self.n_components, self.dt
        )

        fut = np.asarray(agents_future, float)
        ai = tree["agent_init"]
        h0a = nt.tanh(nt.add(nt.matmul(nt.reshape(h_agents, (B * N, self.hidden)), ai["W"]), ai["b"]))
        agent_lp = G.teacher_forced_log_prob(
            tree["agent_dec"], h0a, last_pos, last_vel, fut.reshape(B * N, -1, 2), self.n_components, self.dt
        )
        return ego_lp, nt.reshape(agent_lp, (B, N)), alpha

    def _ego_residual(self, ego_past, ego_future):
        """Shift ego positions by their constant-velocity extrapolation.

        A pure translation per step, so log-densities are unchanged. The
        decoder therefore starts from a zero-velocity state at the origin's
        lateral position.
        """
        v0 = (ego_past[:, -1] - ego_past[:, -2]) / self.dt
        steps = np.arange(1, ego_future.shape[-2] + 1)[:, None] * self.dt
        resid = ego_future - (ego_past[:, -1, None, :] + steps * v0[:, None, :])
        origin = np.zeros_like(ego_past[:, -1])
        origin[:, 1] = ego_past[:, -1, 1]
        resid[..., 1] += ego_past[:, -1, None, 1]
        return resid, origin, np.zeros_like(origin)

    def agent_log_probs(self, agents_past, agents_future, ego_past=None, params=None):
        if ego_past is None:
            raise ValueError("the attention model needs the ego history")
        tree = self.store.nested(params)
        agents_past = np.asarray(agents_past, float)
        B, N = agents_past.shape[:2]
        h_agents, last_pos, last_vel = self._agent_encode(tree, agents_past, ego_past)
        ai = tree["agent_init"]
        h0a = nt.tanh(nt.add(nt.matmul(nt.reshape(h_agents, (B * N, self.hidden)), ai["W"]), ai["b"]))
        fut = np.asarray(agents_future, float)
        lp = G.teacher_forced_log_prob(
            tree["agent_dec"], h0a, last_pos, last_vel, fut.reshape(B * N, -1, 2), self.n_components, self.dt
        )
        return nt.reshape(lp, (B, N))

    def attention_coefficients(self, agents_past, ego_past, params=None):
        """``alpha (B, H, N + 1)``; column 0 belongs to the ego."""
        tree = self.store.nested(params)
        h_agents, _, _ = self._agent_encode(tree, agents_past, ego_past)
        h_ego = self._ego_encode(tree, ego_past)
        return self._attend(tree, h_ego, h_agents)[1]

    def sample_batch(self, agents_past, K, rng, ego_past=None, params=None, noise=None):
        if ego_past is None:
            raise ValueError("the attention model needs the ego history")
        tree = self.store.nested(params)
        agents_past = np.asarray(agents_past, float)
        B, N = agents_past.shape[:2]
        h_agents, last_pos, last_vel = self._agent_encode(tree, agents_past, ego_past)
        ai = tree["agent_init"]
        h0 = nt.tanh(nt.add(nt.matmul(nt.reshape(h_agents, (B * N, self.hidden)), ai["W"]), ai["b"]))
        R = B * N
        h0 = nt.reshape(nt.broadcast_to(nt.expand_dims(h0, 0), (K, R, self.hidden)), (K * R, self.hidden))
        lp = np.broadcast_to(last_pos, (K, R, 2)).reshape(K * R, 2)
        lv = np.broadcast_to(last_vel, (K, R, 2)).reshape(K * R, 2)
        out = G.sample_rollout(
            tree["agent_dec"], h0, lp, lv, self.n_components, self.dt, self.horizon, rng, noise=noise
        )
        return nt.reshape(out, (K, B, N, self.horizon, 2))

    def sample(self, obs, K, rng) -> PredictedTrajectorySet:
        n = obs.agents_past.shape[0]
        if n == 0:
            return PredictedTrajectorySet(np.zeros((K, 0, self.horizon, 2)))
        s = self.sample_batch(obs.agents_past[None], K, rng, ego_past=obs.ego_past[None])
        return PredictedTrajectorySet(np.asarray(s)[:, 0])
