"""Prediction metrics, closed-loop episode statistics and model comparison."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .planner import IdmPlanner
from .simworld import ConfigError, Outcome, PedestrianParams, WorldConfig, config_hash, run_episode


@dataclass(frozen=True)
class MetricConfig:
    miss_threshold_alpha: float = 2.0
    K_eval: int = 5

    def validate(self, prefix: str = "metrics") -> "MetricConfig":
        if not self.miss_threshold_alpha > 0:
            raise ConfigError(f"{prefix}.miss_threshold_alpha", "must be > 0")
        if self.K_eval < 1:
            raise ConfigError(f"{prefix}.K_eval", "must be >= 1")
        return self


# ---------------------------------------------------------------------------
# open-loop metrics


def _aligned(pred, truth):
    pred = np.asarray(pred, float)
    truth = np.asarray(truth, float)
    if pred.shape[-2:] != truth.shape[-2:]:
        raise ValueError(f"horizon mismatch: prediction {pred.shape[-2:]} vs truth {truth.shape[-2:]}")
    return pred, truth


def _dist(pred, truth):
    pred, truth = _aligned(pred, truth)
    return np.sqrt(((pred - truth) ** 2).sum(-1))


def ade(pred, truth):
    """Mean Euclidean error over the horizon; broadcasts over leading dims."""
    return _dist(pred, truth).mean(-1)


def fde(pred, truth):
    return _dist(pred, truth)[..., -1]


def min_ade(samples, truth):
    """Best of ``K`` samples (axis 0) by ADE."""
    return ade(samples, truth).min(axis=0)


def min_fde(samples, truth):
    return fde(samples, truth).min(axis=0)


def miss_rate(samples, truth, alpha: float = 2.0):
    """Fraction of the ``K`` samples (axis 0) whose final error exceeds ``alpha``."""
    return (fde(samples, truth) > alpha).mean(axis=0)


def nll(model, scene) -> float:
    """``-log f(y | x)`` for a scene, summed over its agents."""
    lp = model.agent_log_probs(scene.agents_past[None], scene.agents_future[None], ego_past=scene.ego_past[None])
    return -float(np.asarray(lp).sum())


def control_error(planner: IdmPlanner, scene, pred) -> float:
    """``|plan(y) - plan(yhat)|`` for one predicted future ``(N, T, 2)``.

    A ``(K, N, T, 2)`` stack is accepted and its first sample used.
    """
    pred = np.asarray(pred, float)
    if pred.ndim == 4:
        pred = pred[0]
    ego = scene.ego
    dt = planner.agent_distances(ego.s, ego.v, np.stack([scene.agents_future, pred]))
    d_true, d_pred = (d.min() if d.size else math.inf for d in dt)
    u = planner.accel_for_distance(ego.v, np.array([d_true, d_pred]))
    return float(abs(u[0] - u[1]))


def jerk_series(trace_or_accel, dt: float | None = None) -> float:
    """Mean absolute finite difference of the commanded acceleration over ``dt``."""
    if hasattr(trace_or_accel, "controls"):
        a = np.asarray(trace_or_accel.controls, float)
        dt = trace_or_accel.dt if dt is None else dt
    else:
        a = np.asarray(trace_or_accel, float)
    a = a[np.isfinite(a)]
    if dt is None:
        raise ValueError("dt is required for a plain acceleration series")
    if len(a) < 2:
        raise ValueError("jerk needs at least two commanded accelerations")
    return float(np.abs(np.diff(a)).mean() / dt)


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, float)
    x = x[np.isfinite(x)]
    if len(x) == 0:
        return math.nan, math.nan
    if len(x) == 1:
        return float(x[0]), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))


@dataclass
class OpenLoopReport:
    n_scenes: int
    ade: float
    ade_se: float
    fde: float
    fde_se: float
    min_ade: float
    min_ade_se: float
    min_fde: float
    min_fde_se: float
    miss_rate: float
    miss_rate_se: float
    nll: float
    nll_se: float


def evaluate_open_loop(model, scenes, metric_cfg: MetricConfig, rng) -> OpenLoopReport:
    """Scene-level averages; ADE/FDE use the first sample, the min variants
    and the miss rate use ``K_eval`` samples."""
    metric_cfg.validate()
    if len(scenes) == 0:
        raise ValueError("no scenes to evaluate")
    rows = {k: [] for k in ("ade", "fde", "min_ade", "min_fde", "miss_rate", "nll")}
    for i in range(len(scenes)):
        sc = scenes[i]
        samples = np.asarray(model.sample(sc.observation(), metric_cfg.K_eval, rng).samples)
        rows["ade"].append(ade(samples[0], sc.agents_future).mean())
        rows["fde"].append(fde(samples[0], sc.agents_future).mean())
        rows["min_ade"].append(min_ade(samples, sc.agents_future).mean())
        rows["min_fde"].append(min_fde(samples, sc.agents_future).mean())
        rows["miss_rate"].append(miss_rate(samples, sc.agents_future, metric_cfg.miss_threshold_alpha).mean())
        try:
            rows["nll"].append(nll(model, sc))
        except NotImplementedError:
            rows["nll"].append(math.nan)
    out = {"n_scenes": len(scenes)}
    for k, v in rows.items():
        out[k], out[f"{k}_se"] = _mean_se(v)
    return OpenLoopReport(**out)


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class EpisodeRecord:
    seed: int
    outcome: str
    steps: int
    mean_speed: float
    jerk: float
    ade: float
    control_error: float
    error: str | None = None


def trace_prediction_errors(trace, planner: IdmPlanner, horizon: int) -> tuple[float, float]:
    """Closed-loop ADE and control error of the recorded first samples.

    At every step with a full realised future, the recorded prediction is
    compared with what the pedestrians actually did next; the control error
    re-plans on both with the ego state of that step.
    """
    if trace.predictions is None:
        raise ValueError("trace has no recorded predictions")
    L = len(trace)
    steps = [i for i in range(L) if i + horizon < L]
    if not steps:
        return math.nan, math.nan
    idx = np.array(steps)
    fut = np.stack([trace.ped_pos[i + 1 : i + 1 + horizon].transpose(1, 0, 2) for i in steps])  # (S, N, T, 2)
    pred = trace.predictions[idx]
    s, v = trace.ego[idx, 0], trace.ego[idx, 1]
    err = ade(pred, fut).mean() if fut.shape[1] else math.nan
    d_true = planner.agent_distances(s, v, fut).min(axis=-1, initial=np.inf)
    d_pred = planner.agent_distances(s, v, pred).min(axis=-1, initial=np.inf)
    ce = np.abs(planner.accel_for_distance(v, d_true) - planner.accel_for_distance(v, d_pred))
    return float(err), float(np.mean(ce))


def _episode(args) -> EpisodeRecord:
    model, planner, cfg, params, seed, k, boost, trace_dir = args
    try:
        tr = run_episode(model, planner, cfg, params, seed, k=k, boost=boost, record_predictions=True)
    except FloatingPointError as exc:
        return EpisodeRecord(seed, "Fault", 0, math.nan, math.nan, math.nan, math.nan, error=str(exc))
    if trace_dir is not None:
        tr.save(Path(trace_dir) / f"episode_{seed}.jsonl")
    a, ce = trace_prediction_errors(tr, planner, int(cfg.horizon_T))
    return EpisodeRecord(
        seed=int(seed),
        outcome=tr.outcome,
        steps=len(tr),
        mean_speed=float(tr.ego[:, 1].mean()),
        jerk=jerk_series(tr) if len(tr) > 2 else 0.0,
        ade=a,
        control_error=ce,
    )


@dataclass
class ClosedLoopReport:
    model: str
    n_episodes: int
    base_seed: int
    boost: float
    success_rate: float
    success_rate_se: float
    collision_count: int
    timeout_count: int
    fault_count: int
    mean_speed: float
    mean_speed_se: float
    mean_jerk: float
    mean_jerk_se: float
    ade: float
    ade_se: float
    control_error: float
    control_error_se: float
    config_hash: str = ""
    episodes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        return _nan_to_none(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ClosedLoopReport":
        d = _none_to_nan(dict(d))
        d["episodes"] = [EpisodeRecord(**e) for e in d.get("episodes", [])]
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ClosedLoopReport":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_episodes(cls, name, records, base_seed, boost, chash="") -> "ClosedLoopReport":
        n = len(records)
        outcomes = [r.outcome for r in records]
        succ = np.array([o == Outcome.SUCCESS for o in outcomes], float)
        sr, sr_se = _mean_se(succ)
        stats = {}
        for key in ("mean_speed", "jerk", "ade", "control_error"):
            stats[key] = _mean_se([getattr(r, key) for r in records])
        return cls(
            model=name,
            n_episodes=n,
            base_seed=int(base_seed),
            boost=float(boost),
            success_rate=sr,
            success_rate_se=sr_se,
            collision_count=outcomes.count(Outcome.COLLISION),
            timeout_count=outcomes.count(Outcome.TIMEOUT),
            fault_count=outcomes.count("Fault"),
            mean_speed=stats["mean_speed"][0],
            mean_speed_se=stats["mean_speed"][1],
            mean_jerk=stats["jerk"][0],
            mean_jerk_se=stats["jerk"][1],
            ade=stats["ade"][0],
            ade_se=stats["ade"][1],
            control_error=stats["control_error"][0],
            control_error_se=stats["control_error"][1],
            config_hash=chash,
            episodes=list(records),
        )


def _nan_to_none(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


_FLOAT_FIELDS = {f.name for f in fields(ClosedLoopReport) if f.type == "float"} | {
    f.name for f in fields(EpisodeRecord) if f.type == "float"
}


def _none_to_nan(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if v is None and k in _FLOAT_FIELDS:
            v = math.nan
        elif k == "episodes":
            v = [_none_to_nan(e) for e in v]
        out[k] = v
    return out


def run_closed_loop(
    model,
    planner: IdmPlanner,
    cfg: WorldConfig,
    n_episodes: int,
    base_seed: int,
    params: PedestrianParams | None = None,
    boost: float | None = None,
    k: int | None = None,
    name: str | None = None,
    jobs: int = 1,
    trace_dir=None,
) -> ClosedLoopReport:
    """Episodes with seeds ``base_seed .. base_seed + n - 1``.

    Faulty episodes are kept as ``Fault`` records rather than dropped. With
    ``jobs > 1`` episodes run in worker processes; results are gathered in
    seed order so the report does not depend on scheduling. ``trace_dir``
    keeps every episode trace as ``episode_<seed>.jsonl``.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    params = params or PedestrianParams()
    boost = cfg.crossing_boost_test if boost is None else boost
    k = int(k if k is not None else getattr(model, "k_test", 1))
    if trace_dir is not None:
        Path(trace_dir).mkdir(parents=True, exist_ok=True)
    tasks = [(model, planner, cfg, params, base_seed + e, k, boost, trace_dir) for e in range(n_episodes)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_episode, tasks))
    else:
        records = [_episode(t) for t in tasks]
    chash = config_hash(cfg, params, {"boost": boost})
    return ClosedLoopReport.from_episodes(name or model.kind, records, base_seed, boost, chash)


# ---------------------------------------------------------------------------
# comparison

TABLE_COLUMNS = ("Predictive Model", "Success Rate", "Collisions", "Speed (m/s)", "Jerk (m/s^3)", "ADE (m)", "Control Error")
# metric key, report attribute, higher is better
RANKED = (
    ("Success Rate", "success_rate", True),
    ("Collisions", "collision_count", False),
    ("Speed (m/s)", "mean_speed", True),
    ("Jerk (m/s^3)", "mean_jerk", False),
    ("ADE (m)", "ade", False),
    ("Control Error", "control_error", False),
)


@dataclass
class Comparison:
    reports: list
    ranks: dict  # column -> list of model names, best first
    collision_diffs: dict  # "a - b" -> int

    def rows(self) -> list[dict]:
        out = []
        for r in self.reports:
            out.append(
                {
                    "Predictive Model": r.model,
                    "Success Rate": r.success_rate,
                    "Success Rate SE": r.success_rate_se,
                    "Collisions": r.collision_count,
                    "Speed (m/s)": r.mean_speed,
                    "Speed (m/s) SE": r.mean_speed_se,
                    "Jerk (m/s^3)": r.mean_jerk,
                    "Jerk (m/s^3) SE": r.mean_jerk_se,
                    "ADE (m)": r.ade,
                    "ADE (m) SE": r.ade_se,
                    "Control Error": r.control_error,
                    "Control Error SE": r.control_error_se,
                }
            )
        return out

    def marker(self, model: str, column: str) -> str:
        order = self.ranks.get(column, [])
        if order and order[0] == model:
            return "*"
        if len(order) > 1 and order[1] == model:
            return "+"
        return ""

    def to_text(self) -> str:
        """Fixed-width table; ``*`` marks the best and ``+`` the second best."""

        def cell(r, col, attr, se_attr=None, pct=False):
            v = getattr(r, attr)
            if isinstance(v, (int, np.integer)) and not pct:
                s = f"{v:d}"
            elif pct:
                s = f"{100 * v:.1f}% ± {100 * getattr(r, se_attr):.1f}"
            else:
                s = "nan" if not math.isfinite(v) else f"{v:.3f}"
                if se_attr:
                    se = getattr(r, se_attr)
                    s += " ± " + ("nan" if not math.isfinite(se) else f"{se:.3f}")
            return s + self.marker(r.model, col)

        table = [list(TABLE_COLUMNS)]
        for r in self.reports:
            table.append(
                [
                    r.model,
                    cell(r, "Success Rate", "success_rate", "success_rate_se", pct=True),
                    cell(r, "Collisions", "collision_count"),
                    cell(r, "Speed (m/s)", "mean_speed", "mean_speed_se"),
                    cell(r, "Jerk (m/s^3)", "mean_jerk", "mean_jerk_se"),
                    cell(r, "ADE (m)", "ade", "ade_se"),
                    cell(r, "Control Error", "control_error", "control_error_se"),
                ]
            )
        widths = [max(len(row[i]) for row in table) for i in range(len(TABLE_COLUMNS))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table]
        lines.insert(1, "  ".join("-" * w for w in widths))
        if self.reports:
            r0 = self.reports[0]
            lines.append(f"{r0.n_episodes} episodes per model, seeds {r0.base_seed}..{r0.base_seed + r0.n_episodes - 1}")
        for pair, diff in self.collision_diffs.items():
            lines.append(f"collisions {pair}: {diff:+d}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.rows()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.reports)

    @classmethod
    def from_reports(cls, reports: list) -> "Comparison":
        ranks = {}
        for col, attr, higher in RANKED:
            vals = [(getattr(r, attr), i) for i, r in enumerate(reports)]
            vals = [(v, i) for v, i in vals if isinstance(v, (int, np.integer)) or math.isfinite(v)]
            vals.sort(key=lambda t: (-t[0] if higher else t[0], t[1]))
            ranks[col] = [reports[i].model for _, i in vals]
        diffs = {}
        for i, a in enumerate(reports):
            for b in reports[i + 1 :]:
                diffs[f"{a.model} - {b.model}"] = int(a.collision_count - b.collision_count)
        return cls(list(reports), ranks, diffs)


def compare_models(
    models: dict,
    cfg: WorldConfig,
    n_episodes: int,
    base_seed: int,
    planner: IdmPlanner | None = None,
    params: PedestrianParams | None = None,
    boost: float | None = None,
    k: int | None = None,
    jobs: int = 1,
    trace_dir=None,
) -> Comparison:
    """Every model on the same seed list, so the worlds differ only through
    how each ego's driving feeds back into the pedestrians."""
    if len(models) < 2:
        raise ValueError("compare_models needs at least two models")
    planner = planner or IdmPlanner.for_world(cfg)
    reports = [
        run_closed_loop(
            m,
            planner,
            cfg,
            n_episodes,
            base_seed,
            params=params,
            boost=boost,
            k=k,
            name=name,
            jobs=jobs,
            trace_dir=None if trace_dir is None else Path(trace_dir) / name,
        )
        for name, m in models.items()
    ]
    return Comparison.from_reports(reports)


def read_reports(text: str) -> list[ClosedLoopReport]:
    return [ClosedLoopReport.from_json(line) for line in text.splitlines() if line.strip()]
