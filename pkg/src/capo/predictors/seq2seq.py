from __future__ import annotations

import numpy as np

from ..nnkit import init_affine, init_gru
from ..nnkit import tensor as nt
from . import gru_gmm as G
from .base import PredictedTrajectorySet, PredictionModel


class Seq2SeqPredictor(PredictionModel):
    """Per-agent GRU encoder and autoregressive GRU-GMM decoder.

    Agents are predicted independently with shared weights. Stands in for a
    normalising-flow forecaster: the objectives only need ``sample`` and a
    per-agent log-likelihood.
    """

    kind = "seq2seq"
    k_test = 1

    def __init__(self, hidden: int = 32, n_components: int = 2, dt: float = 0.1, horizon: int = 30, seed: int = 0):
        super().__init__()
        self.hidden = int(hidden)
        self.n_components = int(n_components)
        self.dt = float(dt)
        self.horizon = int(horizon)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.store.add("enc", init_gru(rng, 3, hidden), "agent")
        self.store.add("init", init_affine(rng, hidden, hidden), "agent")
        dec = G.init_decoder(rng, 3, hidden, n_components)
        self.store.add("dec.gru", dec["gru"], "agent")
        self.store.add("dec.head", dec["head"], "agent")

    def config(self) -> dict:
        return {
            "hidden": self.hidden,
            "n_components": self.n_components,
            "dt": self.dt,
            "horizon": self.horizon,
            "seed": self.seed,
        }

    def _tree(self, params):
        return self.store.nested(params)

    def _encode(self, tree, agents_past):
        """Flattened rows ``(R, ...)`` for every (scene, agent) pair."""
        past = np.asarray(agents_past, float)
        P = past.shape[-2]
        rows = past.reshape(-1, P, 2)
        vel = G.velocities(rows, self.dt)
        feats = G.step_features(vel, rows[:, 1:])
        h = G.encode(tree["enc"], feats)
        h0 = nt.tanh(nt.add(nt.matmul(h, tree["init"]["W"]), tree["init"]["b"]))
        return h0, rows[:, -1], vel[:, -1]

    def agent_log_probs(self, agents_past, agents_future, ego_past=None, params=None):
        tree = self._tree(params)
        lead = np.asarray(agents_past).shape[:-2]
        h0, last_pos, last_vel = self._encode(tree, agents_past)
        fut = np.asarray(agents_future, float)
        lp = G.teacher_forced_log_prob(
            tree["dec"], h0, last_pos, last_vel, fut.reshape(-1, fut.shape[-2], 2), self.n_components, self.dt
        )
        return nt.reshape(lp, lead)

    def sample_batch(self, agents_past, K, rng, ego_past=None, params=None, noise=None):
        tree = self._tree(params)
        lead = np.asarray(agents_past).shape[:-2]
        h0, last_pos, last_vel = self._encode(tree, agents_past)
        R = last_pos.shape[0]
        h0 = nt.reshape(nt.broadcast_to(nt.expand_dims(h0, 0), (K, R, self.hidden)), (K * R, self.hidden))
        lp = np.broadcast_to(last_pos, (K, R, 2)).reshape(K * R, 2)
        lv = np.broadcast_to(last_vel, (K, R, 2)).reshape(K * R, 2)
        out = G.sample_rollout(tree["dec"], h0, lp, lv, self.n_components, self.dt, self.horizon, rng, noise=noise)
        return nt.reshape(out, (K,) + lead + (self.horizon, 2))

    def sample(self, obs, K, rng) -> PredictedTrajectorySet:
        n = obs.agents_past.shape[0]
        if n == 0:
            return PredictedTrajectorySet(np.zeros((K, 0, self.horizon, 2)))
        samples = self.sample_batch(obs.agents_past[None], K, rng)
        return PredictedTrajectorySet(np.asarray(samples)[:, 0])

    def mean_rollout(self, agents_past, params=None):
        """Deterministic rollout following the most likely component's mean."""
        tree = self._tree(params)
        lead = np.asarray(agents_past).shape[:-2]
        h, pos, vel = self._encode(tree, agents_past)
        out = []
        for _ in range(self.horizon):
            x_in = G.step_features(vel, pos)
            h = G.L.gru_step(h, x_in, tree["dec"]["gru"])
            logw, means, _ = G.head_outputs(tree["dec"]["head"], h, x_in, self.n_components, self.dt)
            best = np.argmax(logw, axis=-1)
            disp = np.take_along_axis(means, best[:, None, None].repeat(2, axis=-1), axis=-2)[:, 0]
            pos = pos + disp
            vel = disp / self.dt
            out.append(pos)
        return np.stack(out, axis=-2).reshape(lead + (self.horizon, 2))
