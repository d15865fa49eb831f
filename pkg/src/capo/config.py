"""Run configuration: one YAML file, dotted ``--set`` overrides, validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .eval import MetricConfig
from .objectives import TrainingConfig, WeightingScheme
from .planner import IdmParams, IdmPlanner
from .predictors import MODEL_KINDS
from .predictors.attention import AttentionConfig
from .simworld import ConfigError, PedestrianParams, WorldConfig, config_hash


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "seq2seq"
    hidden: int = 32
    n_components: int = 2
    seed: int = 0
    cv_sigma: float = 0.05
    k_oracle: int = 5
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def validate(self, prefix: str = "model") -> "ModelSpec":
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"{prefix}.kind", f"must be one of {sorted(MODEL_KINDS)}")
        for name in ("hidden", "n_components", "k_oracle"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{prefix}.{name}", "must be >= 1")
        if not self.cv_sigma > 0:
            raise ConfigError(f"{prefix}.cv_sigma", "must be > 0")
        self.attention.validate(f"{prefix}.attention")
        return self

    def build_kwargs(self, world: WorldConfig) -> dict:
        common = {"dt": world.dt, "horizon": world.horizon_T}
        if self.kind == "seq2seq":
            return {**common, "hidden": self.hidden, "n_components": self.n_components, "seed": self.seed}
        if self.kind == "attention":
            a = self.attention
            return {
                **common,
                "hidden": self.hidden,
                "n_components": self.n_components,
                "n_heads": a.n_heads,
                "key_dim": a.key_dim,
                "embed_dim": a.embed_dim,
                "seed": self.seed,
            }
        if self.kind == "cv_gaussian":
            return {**common, "sigma": self.cv_sigma}
        return {"k_test": self.k_oracle}


@dataclass(frozen=True)
class TrainSpec:
    scheme: str = "UniformNLL"
    config: TrainingConfig = field(default_factory=TrainingConfig)

    def validate(self, prefix: str = "training") -> "TrainSpec":
        try:
            WeightingScheme.parse(self.scheme)
        except ValueError as exc:
            raise ConfigError(f"{prefix}.scheme", str(exc)) from None
        self.config.validate(f"{prefix}.config")
        return self


@dataclass(frozen=True)
class CollectSpec:
    n_episodes: int = 40
    seed: int = 1000
    k_oracle: int = 5
    boost: float = 1.0

    def validate(self, prefix: str = "collect") -> "CollectSpec":
        if self.n_episodes < 1:
            raise ConfigError(f"{prefix}.n_episodes", "must be >= 1")
        if self.k_oracle < 1:
            raise ConfigError(f"{prefix}.k_oracle", "must be >= 1")
        if not self.boost >= 1:
            raise ConfigError(f"{prefix}.boost", "must be >= 1")
        return self


@dataclass(frozen=True)
class EvalSpec:
    n_episodes: int = 100
    base_seed: int = 5000
    k_test: int = 1
    open_loop_scenes: int = 200
    open_loop_seed: int = 9000
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def validate(self, prefix: str = "eval") -> "EvalSpec":
        if self.n_episodes < 1:
            raise ConfigError(f"{prefix}.n_episodes", "must be >= 1")
        if self.k_test < 1:
            raise ConfigError(f"{prefix}.k_test", "must be >= 1")
        if self.open_loop_scenes < 0:
            raise ConfigError(f"{prefix}.open_loop_scenes", "must be >= 0")
        self.metrics.validate(f"{prefix}.metrics")
        return self


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    pedestrians: PedestrianParams = field(default_factory=PedestrianParams)
    idm: IdmParams | None = None
    model: ModelSpec = field(default_factory=ModelSpec)
    training: TrainSpec = field(default_factory=TrainSpec)
    collect: CollectSpec = field(default_factory=CollectSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)

    def validate(self) -> "RunConfig":
        self.world.validate("world")
        self.pedestrians.validate("pedestrians")
        if self.idm is not None:
            self.idm.validate("idm")
        self.model.validate("model")
        self.training.validate("training")
        self.collect.validate("collect")
        self.eval.validate("eval")
        return self

    def planner(self) -> IdmPlanner:
        return IdmPlanner.for_world(self.world, self.idm)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def hash(self, *sections: str) -> str:
        """Hash of the named sections (all of them by default)."""
        d = self.to_dict()
        return config_hash({k: d[k] for k in (sections or sorted(d))})

    def world_hash(self) -> str:
        return self.hash("world", "pedestrians")


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data, prefix: str):
    """Recursively construct a (frozen) dataclass from nested dicts."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(prefix or "config", "expected a mapping")
    hints = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in hints:
            raise ConfigError(f"{prefix}.{key}" if prefix else key, "unknown field")
        default = _default(hints[key])
        sub = _NESTED.get((cls, key))
        path = f"{prefix}.{key}" if prefix else key
        if sub is not None and not (value is None and default is None):
            kwargs[key] = _build(sub, value, path)
        else:
            kwargs[key] = _coerce(value, default, path)
    return cls(**kwargs)


_NESTED = {
    (ModelSpec, "attention"): AttentionConfig,
    (TrainSpec, "config"): TrainingConfig,
    (EvalSpec, "metrics"): MetricConfig,
    (RunConfig, "world"): WorldConfig,
    (RunConfig, "pedestrians"): PedestrianParams,
    (RunConfig, "idm"): IdmParams,
    (RunConfig, "model"): ModelSpec,
    (RunConfig, "training"): TrainSpec,
    (RunConfig, "collect"): CollectSpec,
    (RunConfig, "eval"): EvalSpec,
}


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _coerce(value, default, path):
    if default is None or value is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(float(v) for v in value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(path, f"cannot interpret {value!r} as {type(default).__name__}") from None
    return value


def _apply_override(tree: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like section.key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    value = yaml.safe_load(raw)
    node = tree
    for part in parts[:-1]:
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise ConfigError(key, "is not a section")
        node = nxt
    node[parts[-1]] = value


def load_config(path=None, overrides=()) -> RunConfig:
    """Read YAML (or start from defaults), apply ``key=value`` overrides, validate."""
    tree: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(str(path), f"not valid YAML: {exc}") from None
    for assignment in overrides:
        _apply_override(tree, assignment)
    if "idm" in tree and tree["idm"] is not None:
        tree["idm"] = {**_to_plain(IdmParams(v_desired=_speed_limit(tree))), **tree["idm"]}
    return _build(RunConfig, tree, "").validate()


def _speed_limit(tree) -> float:
    return float((tree.get("world") or {}).get("speed_limit", WorldConfig().speed_limit))


def from_dict(tree: dict) -> RunConfig:
    return _build(RunConfig, tree, "").validate()
