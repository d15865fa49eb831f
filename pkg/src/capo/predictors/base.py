from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from ..nnkit import ParamStore, load_checkpoint, save_checkpoint


@dataclass
class PredictedTrajectorySet:
    samples: np.ndarray  # (K, N, T, 2)
    mixtures: dict | None = None

    @property
    def K(self) -> int:
        return self.samples.shape[0]


class PredictionModel(ABC):
    """Common surface: sample futures for every agent and score them.

    Learned models keep their weights in ``self.store``; the differentiable
    entry points take an optional ``params`` mapping (name -> Tensor) so the
    objectives can backpropagate through them.
    """

    kind: str = "abstract"
    k_test: int = 1
    has_attention: bool = False
    trainable: bool = True

    def __init__(self):
        self.store = ParamStore()

    def config(self) -> dict:
        return {}

    @abstractmethod
    def sample(self, obs, K: int, rng: np.random.Generator) -> PredictedTrajectorySet: ...

    def agent_log_probs(self, agents_past, agents_future, ego_past=None, params=None):
        """Per-agent trajectory log-likelihood, shape ``(B, N)``."""
        raise NotImplementedError(f"{self.kind} does not provide a likelihood")

    def log_prob_agent(self, obs, future: np.ndarray, n: int) -> float:
        """log f(y_n | x) for agent ``n`` of one observation; ``future`` is ``(N, T, 2)``."""
        lp = self.agent_log_probs(obs.agents_past[None], np.asarray(future)[None], ego_past=obs.ego_past[None])
        return float(np.asarray(lp)[0, n])

    def sample_batch(self, agents_past, K, rng, ego_past=None, params=None, noise=None):
        """Samples for a batch of scenes, shape ``(K, B, N, T, 2)``."""
        raise NotImplementedError

    def save(self, path, extra: dict | None = None) -> None:
        header = {"model_kind": self.kind, "model_config": self.config(), **(extra or {})}
        save_checkpoint(path, self.store, header)

    @staticmethod
    def load(path) -> tuple["PredictionModel", dict]:
        from . import build_model

        store, header = load_checkpoint(path)
        model = build_model(header["model_kind"], **header["model_config"])
        if set(model.store.arrays) != set(store.arrays):
            raise ValueError("checkpoint parameters do not match the model architecture")
        model.store = store
        return model, header
