from __future__ import annotations

import math

import numpy as np

from .base import PredictedTrajectorySet, PredictionModel

LOG_2PI = math.log(2.0 * math.pi)


class ConstantVelocityGaussian(PredictionModel):
    """Constant-velocity mean with a Gaussian random walk around it.

    Each step adds isotropic noise of std ``sigma`` (metres), so the marginal
    std after ``t`` steps is ``sigma * sqrt(t)``. Scoring uses the increments,
    which is the exact density of the sampler.
    """

    kind = "cv_gaussian"
    trainable = False

    def __init__(self, sigma: float = 0.05, dt: float = 0.1, horizon: int = 30):
        super().__init__()
        if sigma <= 0:
            raise ValueError("sigma must be > 0")
        self.sigma = float(sigma)
        self.dt = float(dt)
        self.horizon = int(horizon)

    def config(self) -> dict:
        return {"sigma": self.sigma, "dt": self.dt, "horizon": self.horizon}

    def _last(self, agents_past):
        past = np.asarray(agents_past, float)
        last = past[..., -1, :]
        if past.shape[-2] < 2:
            return last, np.zeros_like(last)
        return last, past[..., -1, :] - past[..., -2, :]

    def mean(self, agents_past) -> np.ndarray:
        last, step = self._last(agents_past)
        t = np.arange(1, self.horizon + 1)[:, None]
        return last[..., None, :] + t * step[..., None, :]

    def agent_log_probs(self, agents_past, agents_future, ego_past=None, params=None):
        last, step = self._last(agents_past)
        fut = np.asarray(agents_future, float)
        prev = np.concatenate([last[..., None, :], fut[..., :-1, :]], axis=-2)
        resid = fut - prev - step[..., None, :]
        per_step = -0.5 * (resid**2).sum(-1) / self.sigma**2 - 2.0 * math.log(self.sigma) - LOG_2PI
        return per_step.sum(-1)

    def sample_batch(self, agents_past, K, rng, ego_past=None, params=None, noise=None):
        mean = self.mean(agents_past)
        eps = rng.standard_normal((K,) + mean.shape) if noise is None else noise
        return mean[None] + self.sigma * np.cumsum(eps, axis=-2)

    def sample(self, obs, K, rng) -> PredictedTrajectorySet:
        return PredictedTrajectorySet(self.sample_batch(obs.agents_past, K, rng))
