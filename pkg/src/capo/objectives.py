"""Weighting schemes for trajectory-likelihood training.

Every scheme except the control-matching one reduces to a weighted
negative log-likelihood ``-sum_n w_n log f(y_n | x)`` in which the weights
are constants: they are computed first and never differentiated. Where the
weights come from is what distinguishes the schemes:

* unit weights (plain likelihood, with or without the ego term);
* the ego decoder's attention coefficients;
* the L1 norm of a smoothed planner's gradient, at predictions or at truth;
* counterfactual control discrepancy: how far the planner's command moves
  when one agent's recorded future is replaced by each of ``K`` model
  samples, reduced by max or mean over the samples.

The counterfactual weights only call the planner's forward entry points, so
the planner may be non-differentiable.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from .nnkit import AdamState, adam_update, backward
from .nnkit import tensor as nt
from .planner import IdmPlanner
from .simworld import ConfigError, Scene, SceneSet


class WeightingScheme(str, Enum):
    UNIFORM_NLL = "UniformNLL"
    JOINT_EGO_AGENT_NLL = "JointEgoAgentNLL"
    CONTROL_MATCH_L1 = "ControlMatchL1"
    GRAD_PRED_WEIGHT = "GradPredWeight"
    GRAD_TRUE_WEIGHT = "GradTrueWeight"
    COUNTERFACTUAL_EXPECTED = "CounterfactualExpected"
    COUNTERFACTUAL_MAX = "CounterfactualMax"
    ATTENTION_WEIGHTED = "AttentionWeighted"

    @property
    def requires_attention(self) -> bool:
        return self in (WeightingScheme.JOINT_EGO_AGENT_NLL, WeightingScheme.ATTENTION_WEIGHTED)

    @property
    def uses_ego_term(self) -> bool:
        return self.requires_attention

    @property
    def clamps_weights(self) -> bool:
        """Planner-derived weights are clamped to ``[floor, clip]``."""
        return self in (
            WeightingScheme.GRAD_PRED_WEIGHT,
            WeightingScheme.GRAD_TRUE_WEIGHT,
            WeightingScheme.COUNTERFACTUAL_EXPECTED,
            WeightingScheme.COUNTERFACTUAL_MAX,
        )

    @classmethod
    def parse(cls, value) -> "WeightingScheme":
        if isinstance(value, cls):
            return value
        for member in cls:
            if value in (member.value, member.name):
                return member
        raise ValueError(f"unknown weighting scheme '{value}' (expected one of {[m.value for m in cls]})")


class IncompatibleSchemeError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    """Non-finite loss or gradient; carries the batch diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {json.dumps(diagnostics, default=str)}")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainingConfig:
    k_train: int = 10
    k_test: int = 1
    batch_size: int = 32
    epochs: int = 4
    batches_per_epoch: int | None = 50
    lr: float = 3e-3
    weight_clip: float = 10.0
    weight_floor: float = 0.05
    seed: int = 0
    # counterfactual sampling skips agents this far outside the planner's
    # reach window (their weight is then exactly 0); None samples everyone
    candidate_margin: float | None = 20.0

    def validate(self, prefix: str = "training") -> "TrainingConfig":
        checks = [
            ("k_train", self.k_train >= 1, "must be >= 1"),
            ("k_test", self.k_test >= 1, "must be >= 1"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("lr", self.lr > 0, "must be > 0"),
            ("weight_floor", self.weight_floor >= 0, "must be >= 0"),
            ("weight_clip", self.weight_clip >= self.weight_floor, "must be >= weight_floor"),
        ]
        if self.batches_per_epoch is not None:
            checks.append(("batches_per_epoch", self.batches_per_epoch >= 1, "must be >= 1"))
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{prefix}.{name}", msg)
        return self


def check_compatible(scheme: WeightingScheme, model) -> None:
    scheme = WeightingScheme.parse(scheme)
    if scheme.requires_attention and not getattr(model, "has_attention", False):
        raise IncompatibleSchemeError(f"scheme {scheme.value} requires attention model, got '{model.kind}'")
    if not getattr(model, "trainable", False):
        raise IncompatibleSchemeError(f"model kind '{model.kind}' has no trainable parameters")


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    agents_past: np.ndarray  # (B, N, P, 2)
    agents_future: np.ndarray  # (B, N, T, 2)
    ego_past: np.ndarray  # (B, P, 2)
    ego_future: np.ndarray  # (B, T, 2)
    ego_v: np.ndarray  # (B,)
    crossing: np.ndarray | None = None  # (B, N) bool

    @property
    def ego_s(self) -> np.ndarray:
        return self.ego_past[:, -1, 0]

    @classmethod
    def from_scenes(cls, data: "SceneSet | Scene") -> "Batch":
        if isinstance(data, Scene):
            data = SceneSet.from_scenes([data])
        return cls(
            agents_past=np.asarray(data.agents_past, float),
            agents_future=np.asarray(data.agents_future, float),
            ego_past=np.asarray(data.ego_past, float),
            ego_future=np.asarray(data.ego_future, float),
            ego_v=np.asarray(data.ego_v, float),
            crossing=data.crossing_agents,
        )


# ---------------------------------------------------------------------------
# counterfactual weights


def counterfactual_weights_from_samples(
    planner: IdmPlanner, ego_s, ego_v, truth: np.ndarray, samples: np.ndarray, reduce: str = "max"
) -> np.ndarray:
    """Control discrepancy of every single-agent swap, reduced over samples.

    ``truth`` is ``(..., N, T, 2)`` and ``samples`` ``(K, ..., N, T, 2)``.
    For agent ``n`` and sample ``k`` the planner sees the recorded futures
    with agent ``n`` replaced by ``samples[k, ..., n]``. Because the hard
    planner only depends on the closest in-corridor distance, each swap's
    distance is ``min(closest other agent, sample k of agent n)``.
    Returns ``(..., N)``.
    """
    if reduce not in ("max", "mean"):
        raise ValueError("reduce must be 'max' or 'mean'")
    truth = np.asarray(truth, float)
    samples = np.asarray(samples, float)
    N = truth.shape[-3]
    lead = truth.shape[:-3]
    if N == 0:
        return np.zeros(lead + (0,))
    ego_s = np.broadcast_to(np.asarray(ego_s, float), lead)
    ego_v = np.broadcast_to(np.asarray(ego_v, float), lead)
    d_true = planner.agent_distances(ego_s, ego_v, truth)  # (..., N)
    u = np.asarray(planner.accel_for_distance(ego_v, d_true.min(axis=-1)))  # (...)
    # closest distance among the other agents, for every n
    if N == 1:
        others = np.full(d_true.shape, np.inf)
    else:
        order = np.argsort(d_true, axis=-1, kind="stable")
        first = np.take_along_axis(d_true, order[..., :1], axis=-1)
        second = np.take_along_axis(d_true, order[..., 1:2], axis=-1)
        is_first = np.arange(N) == order[..., :1]
        others = np.where(is_first, second, first)
    d_samp = planner.agent_distances(ego_s, ego_v, samples)  # (K, ..., N)
    u_hat = planner.accel_for_distance(ego_v[..., None], np.minimum(others, d_samp))
    diff = np.abs(u[..., None] - u_hat)
    return diff.max(axis=0) if reduce == "max" else diff.mean(axis=0)


def _candidates(planner: IdmPlanner, batch: Batch, margin: float | None) -> np.ndarray:
    """(B, N) mask of agents whose samples could plausibly matter."""
    B, N = batch.agents_past.shape[:2]
    if margin is None:
        return np.ones((B, N), bool)
    c = planner.cfg
    T = batch.agents_future.shape[-2]
    x = batch.agents_past[:, :, -1, 0] - batch.ego_s[:, None]
    reach = batch.ego_v[:, None] * T * c.dt + c.reach_slack
    return (x >= -c.rear_margin - margin) & (x <= reach + margin)


def sample_candidates(model, batch: Batch, K: int, rng, mask: np.ndarray) -> np.ndarray:
    """Model samples for masked agents, recorded futures elsewhere: ``(K, B, N, T, 2)``."""
    out = np.broadcast_to(batch.agents_future, (K,) + batch.agents_future.shape).copy()
    b_idx, n_idx = np.nonzero(mask)
    if len(b_idx):
        # every selected agent becomes its own single-agent scene
        past = batch.agents_past[b_idx, n_idx][:, None]
        ego_past = batch.ego_past[b_idx]
        s = np.asarray(model.sample_batch(past, K, rng, ego_past=ego_past))
        out[:, b_idx, n_idx] = s[:, :, 0]
    return out


def batch_counterfactual_weights(
    model, planner: IdmPlanner, batch: Batch, K: int, rng, reduce: str = "max", candidate_margin=None
) -> np.ndarray:
    mask = _candidates(planner, batch, candidate_margin)
    samples = sample_candidates(model, batch, K, rng, mask)
    w = counterfactual_weights_from_samples(planner, batch.ego_s, batch.ego_v, batch.agents_future, samples, reduce)
    return np.where(mask, w, 0.0)


def counterfactual_weights(scene: Scene, model, planner: IdmPlanner, K: int, rng, reduce: str = "max") -> np.ndarray:
    """Per-agent counterfactual weights ``(N,)`` for one scene."""
    batch = Batch.from_scenes(scene)
    return batch_counterfactual_weights(model, planner, batch, K, rng, reduce)[0]


# ---------------------------------------------------------------------------
# attention and gradient weights


def attention_capo_weights(model, scene_or_batch) -> np.ndarray:
    """Head-averaged attention on each agent (the ego's own slot dropped)."""
    if not getattr(model, "has_attention", False):
        raise IncompatibleSchemeError(f"model kind '{model.kind}' has no attention head")
    batch = scene_or_batch if isinstance(scene_or_batch, Batch) else Batch.from_scenes(scene_or_batch)
    alpha = np.asarray(model.attention_coefficients(batch.agents_past, batch.ego_past))
    w = alpha.mean(axis=-2)[..., 1:]
    return w[0] if isinstance(scene_or_batch, Scene) else w


def gradient_weights(
    model, planner: IdmPlanner, batch: Batch, mode: str, K: int = 1, rng=None
) -> np.ndarray:
    """Per-agent L1 norm of the smoothed planner's gradient, ``(B, N)``.

    ``mode="true"`` evaluates it at the recorded futures; ``mode="pred"``
    averages it over ``K`` model samples.
    """
    if mode == "true":
        return planner.planner_gradient_weight(batch.ego_s, batch.ego_v, batch.agents_future)
    if mode != "pred":
        raise ValueError("mode must be 'pred' or 'true'")
    samples = np.asarray(model.sample_batch(batch.agents_past, K, rng, ego_past=batch.ego_past))
    s = np.broadcast_to(batch.ego_s, (K,) + batch.ego_s.shape)
    v = np.broadcast_to(batch.ego_v, (K,) + batch.ego_v.shape)
    return planner.planner_gradient_weight(s, v, samples).mean(axis=0)


# ---------------------------------------------------------------------------
# losses


def weighted_nll_loss(batch: Batch, weights, model, params=None, ego_weight: float = 0.0):
    """``mean_b [ -sum_n w_bn log f(y_bn | x_b) - ego_weight * log f(y_ego | x_b) ]``.

    ``weights`` is treated as a constant. With ``params`` (name -> Tensor) the
    result is a differentiable scalar Tensor; otherwise a float.
    """
    w = np.asarray(weights, float)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    B = batch.agents_past.shape[0]
    if ego_weight:
        ego_lp, agent_lp, _ = model.forward(
            batch.agents_past, batch.ego_past, batch.agents_future, batch.ego_future, params=params
        )
        total = nt.add(nt.sum_(nt.mul(agent_lp, w)), nt.mul(ego_weight, nt.sum_(ego_lp)))
    else:
        agent_lp = model.agent_log_probs(batch.agents_past, batch.agents_future, ego_past=batch.ego_past, params=params)
        total = nt.sum_(nt.mul(agent_lp, w))
    loss = nt.mul(total, -1.0 / B)
    return loss if params is not None else float(nt.value_of(loss))


def uniform_nll_loss(batch: Batch, model, params=None):
    return weighted_nll_loss(batch, np.ones(batch.agents_past.shape[:2]), model, params)


def control_match_loss(batch: Batch, model, planner: IdmPlanner, K: int, rng, params=None, noise=None):
    """``mean_b (1/K) sum_k |P~(y_b) - P~(yhat_bk)|`` with the smoothed planner.

    Gradients reach the model through reparameterised mixture samples. Pass
    ``noise`` (uniforms ``(T, K*B*N)``, normals ``(T, K*B*N, 2)``) to hold the
    random numbers fixed across calls.
    """
    B, N = batch.agents_past.shape[:2]
    T = batch.agents_future.shape[-2]
    if noise is None:
        R = K * B * N
        noise = (rng.random((T, R)), rng.standard_normal((T, R, 2)))
    samples = model.sample_batch(batch.agents_past, K, rng, ego_past=batch.ego_past, params=params, noise=noise)
    target = nt.value_of(planner.plan_smooth(batch.ego_s, batch.ego_v, batch.agents_future))  # (B,)
    s = np.broadcast_to(batch.ego_s, (K, B))
    v = np.broadcast_to(batch.ego_v, (K, B))
    u_hat = planner.plan_smooth(s, v, samples)  # (K, B)
    loss = nt.mean(nt.abs_(nt.sub(u_hat, target)))
    return loss if params is not None else float(nt.value_of(loss))


def gradient_weight_loss(batch: Batch, model, planner: IdmPlanner, mode: str, K: int = 1, rng=None, params=None):
    w = gradient_weights(model, planner, batch, mode, K, rng)
    return weighted_nll_loss(batch, w, model, params)


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    mean_weight: float
    mean_weight_crossing: float
    mean_weight_other: float
    batch_losses: list = field(default_factory=list)


@dataclass
class TrainResult:
    model: object
    scheme: WeightingScheme
    history: list
    optimizer: AdamState

    @property
    def batch_losses(self) -> list[float]:
        return [x for rec in self.history for x in rec.batch_losses]


def scheme_weights(
    scheme: WeightingScheme, model, planner: IdmPlanner | None, batch: Batch, cfg: TrainingConfig, rng
) -> np.ndarray | None:
    """Stop-gradient agent weights for one batch (``None`` for control matching)."""
    B, N = batch.agents_past.shape[:2]
    if scheme in (WeightingScheme.UNIFORM_NLL, WeightingScheme.JOINT_EGO_AGENT_NLL):
        return np.ones((B, N))
    if scheme is WeightingScheme.ATTENTION_WEIGHTED:
        return attention_capo_weights(model, batch)
    if scheme is WeightingScheme.CONTROL_MATCH_L1:
        return None
    if planner is None:
        raise ValueError(f"scheme {scheme.value} needs a planner")
    if scheme is WeightingScheme.GRAD_TRUE_WEIGHT:
        w = gradient_weights(model, planner, batch, "true")
    elif scheme is WeightingScheme.GRAD_PRED_WEIGHT:
        w = gradient_weights(model, planner, batch, "pred", cfg.k_train, rng)
    else:
        reduce = "max" if scheme is WeightingScheme.COUNTERFACTUAL_MAX else "mean"
        w = batch_counterfactual_weights(model, planner, batch, cfg.k_train, rng, reduce, cfg.candidate_margin)
    return np.clip(w, cfg.weight_floor, cfg.weight_clip)


def scheme_loss(scheme: WeightingScheme, model, batch: Batch, weights, planner, cfg: TrainingConfig, rng, params):
    if scheme is WeightingScheme.CONTROL_MATCH_L1:
        return control_match_loss(batch, model, planner, cfg.k_train, rng, params=params)
    return weighted_nll_loss(batch, weights, model, params, ego_weight=1.0 if scheme.uses_ego_term else 0.0)


def train(
    model,
    dataset: SceneSet,
    scheme,
    cfg: TrainingConfig,
    planner: IdmPlanner | None = None,
    manifest_path=None,
    callback: Callable | None = None,
    weight_override: Callable | None = None,
) -> TrainResult:
    """Minibatch Adam on the chosen objective.

    Weights are recomputed from the current parameters for every batch and
    enter the loss as constants. ``weight_override(batch, weights)`` may
    replace them (used to freeze attention weights for ablations).
    """
    scheme = WeightingScheme.parse(scheme)
    cfg.validate()
    check_compatible(scheme, model)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 7]))
    opt = AdamState(lr=cfg.lr)
    S = len(dataset)
    per_epoch = math.ceil(S / cfg.batch_size)
    if cfg.batches_per_epoch is not None:
        per_epoch = min(per_epoch, cfg.batches_per_epoch) if S >= cfg.batch_size else cfg.batches_per_epoch
    crossing_all = dataset.crossing_agents
    history = []
    writer = _ManifestWriter(manifest_path)
    writer.write(
        {
            "type": "config",
            "scheme": scheme.value,
            "model_kind": model.kind,
            "model_config": model.config(),
            "training": asdict(cfg),
            "seed": int(cfg.seed),
            "n_scenes": S,
            "dataset_meta": {k: v for k, v in dataset.meta.items() if k != "episodes"},
        }
    )
    for epoch in range(cfg.epochs):
        order = rng.permutation(S)
        losses, wsum, wcount, wc_sum, wc_n, wo_sum, wo_n = [], 0.0, 0, 0.0, 0, 0.0, 0
        for j in range(per_epoch):
            idx = np.sort(np.take(order, range(j * cfg.batch_size, (j + 1) * cfg.batch_size), mode="wrap"))
            batch = Batch.from_scenes(dataset.subset(idx))
            batch.crossing = crossing_all[idx]
            weights = scheme_weights(scheme, model, planner, batch, cfg, rng)
            if weight_override is not None and weights is not None:
                weights = weight_override(batch, weights)
            params = model.store.tensors()
            loss = scheme_loss(scheme, model, batch, weights, planner, cfg, rng, params)
            lv = float(nt.value_of(loss))
            diag = {"epoch": epoch, "batch": j, "loss": lv, "scheme": scheme.value}
            if not math.isfinite(lv):
                raise TrainingDivergedError("non-finite training loss", diag)
            try:
                backward(loss)
            except nt.NonFiniteGradientError as exc:
                raise TrainingDivergedError(f"non-finite gradient in op '{exc.op}'", diag) from exc
            grads = model.store.gradients(params)
            adam_update(model.store.arrays, grads, opt)
            losses.append(lv)
            if weights is not None:
                wsum += float(weights.sum())
                wcount += weights.size
                cm = batch.crossing
                wc_sum += float(weights[cm].sum())
                wc_n += int(cm.sum())
                wo_sum += float(weights[~cm].sum())
                wo_n += int((~cm).sum())
            if callback is not None:
                callback(epoch, j, lv, weights)
        rec = EpochRecord(
            epoch=epoch,
            loss=float(np.mean(losses)),
            mean_weight=wsum / wcount if wcount else float("nan"),
            mean_weight_crossing=wc_sum / wc_n if wc_n else float("nan"),
            mean_weight_other=wo_sum / wo_n if wo_n else float("nan"),
            batch_losses=losses,
        )
        history.append(rec)
        writer.write({"type": "epoch", **asdict(rec)})
    writer.close()
    return TrainResult(model, scheme, history, opt)


def train_attention_capo(dataset: SceneSet, model, cfg: TrainingConfig, freeze_alpha: bool = False, **kw) -> TrainResult:
    """Ego likelihood plus attention-weighted agent likelihoods.

    Ego-group parameters only see the ego term, agent-group parameters only
    the weighted agent terms, and the shared agent encoder receives both.
    ``freeze_alpha`` replaces the coefficients with unit weights.
    """
    override = (lambda batch, w: np.ones_like(w)) if freeze_alpha else None
    return train(model, dataset, WeightingScheme.ATTENTION_WEIGHTED, cfg, weight_override=override, **kw)


def train_counterfactual_capo(
    dataset: SceneSet, model, planner: IdmPlanner, cfg: TrainingConfig, reduce: str = "max", **kw
) -> TrainResult:
    scheme = WeightingScheme.COUNTERFACTUAL_MAX if reduce == "max" else WeightingScheme.COUNTERFACTUAL_EXPECTED
    return train(model, dataset, scheme, cfg, planner=planner, **kw)


class _ManifestWriter:
    def __init__(self, path):
        self._fh = open(path, "w") if path is not None else None

    def write(self, rec: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(rec, sort_keys=True, default=_json_default) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Enum):
        return obj.value
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def read_manifest(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
