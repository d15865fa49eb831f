from __future__ import annotations

import numpy as np

from ..simworld import N_UNIFORMS, advance_pedestrians
from .base import PredictedTrajectorySet, PredictionModel


class OraclePredictor(PredictionModel):
    """Samples futures by rolling the simulator's own pedestrian process.

    Needs the world snapshot carried by the observation. Rollouts draw from the
    caller's ``rng`` only, never from the world's per-pedestrian streams, so
    querying the oracle cannot change how the episode unfolds.
    """

    kind = "oracle"
    trainable = False

    def __init__(self, k_test: int = 5):
        super().__init__()
        self.k_test = int(k_test)

    def config(self) -> dict:
        return {"k_test": self.k_test}

    def sample(self, obs, K, rng) -> PredictedTrajectorySet:
        snap = obs.world
        if snap is None:
            raise ValueError("the oracle predictor needs the simulator state")
        T = int(snap.cfg.horizon_T)
        n = snap.peds.pos.shape[0]
        peds = snap.peds.tile(K)
        u = rng.random((T, K, n, N_UNIFORMS))
        out = np.empty((K, n, T, 2))
        for t in range(T):
            peds = advance_pedestrians(peds, u[t], snap.cfg, snap.params, snap.boost)
            out[:, :, t] = peds.pos
        return PredictedTrajectorySet(out)
