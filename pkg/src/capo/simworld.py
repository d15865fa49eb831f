"""Seeded 2D road world with sidewalk pedestrians and a longitudinal ego car.

Geometry: the road runs along +x. It occupies ``|y| <= road_half_width``;
the ego drives along ``y = lane_center_offset`` starting at ``s = 0`` and must
cover ``road_length`` metres. Two sidewalk bands sit outside the road, one per
side. Pedestrians wander along their sidewalk toward sampled goals, pause now
and then, and occasionally cross the road straight across.

Pedestrians never react to the ego, so for a fixed seed their trajectories
are identical no matter which predictor drives the car. Each pedestrian owns a
counter-based Philox stream and draws a fixed block of uniforms every step,
which keeps streams aligned across runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from . import _kernels


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class Mode(IntEnum):
    WALKING = 0
    PAUSED = 1
    CROSSING = 2


class Outcome:
    SUCCESS = "Success"
    COLLISION = "Collision"
    TIMEOUT = "Timeout"


@dataclass(frozen=True)
class WorldConfig:
    road_length: float = 200.0
    road_half_width: float = 4.0
    lane_center_offset: float = -2.0
    lane_half_width: float = 2.0
    sidewalk_offsets: tuple = (-7.25, 7.25)
    sidewalk_width: float = 2.5
    spawn_x_range: tuple = (-20.0, 240.0)
    speed_limit: float = 20.1168
    dt: float = 0.1
    horizon_T: int = 30
    past_steps: int = 10
    episode_timeout: float = 60.0
    n_pedestrians: int = 30
    crossing_boost_test: float = 3.0
    ego_radius: float = 1.0
    ped_radius: float = 0.3

    def validate(self, prefix: str = "world") -> "WorldConfig":
        checks = [
            ("dt", self.dt > 0, "must be > 0"),
            ("horizon_T", int(self.horizon_T) >= 1, "must be >= 1"),
            ("past_steps", int(self.past_steps) >= 2, "must be >= 2"),
            ("road_length", self.road_length > 0, "must be > 0"),
            ("episode_timeout", self.episode_timeout > 0, "must be > 0"),
            ("n_pedestrians", int(self.n_pedestrians) >= 0, "must be >= 0"),
            ("crossing_boost_test", self.crossing_boost_test >= 1, "must be >= 1"),
            ("speed_limit", self.speed_limit > 0, "must be > 0"),
            ("sidewalk_width", self.sidewalk_width > 0, "must be > 0"),
            ("ego_radius", self.ego_radius > 0, "must be > 0"),
            ("ped_radius", self.ped_radius > 0, "must be > 0"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{prefix}.{name}", msg)
        inner = min(abs(o) for o in self.sidewalk_offsets) - 0.5 * self.sidewalk_width
        if inner < self.road_half_width:
            raise ConfigError(f"{prefix}.sidewalk_offsets", "sidewalks overlap the road")
        return self

    @property
    def corridor_half_width(self) -> float:
        return self.lane_half_width + self.ped_radius

    def sidewalk_band(self, side: int) -> tuple[float, float]:
        """(inner, outer) |y| limits of the sidewalk on ``side`` (+1 north, -1 south)."""
        centre = self.sidewalk_offsets[1] if side > 0 else self.sidewalk_offsets[0]
        half = 0.5 * self.sidewalk_width
        return abs(centre) - half, abs(centre) + half


@dataclass(frozen=True)
class PedestrianParams:
    walk_speed_mean: float = 2.0
    walk_speed_std: float = 0.2
    walk_speed_min: float = 0.5
    cross_speed: float = 2.0
    epsilon: float = 0.1
    sigma: float = 0.3
    stop_probability: float = 0.002
    resume_probability: float = 0.05
    short_range_distance: float = 4.0
    goal_tolerance: float = 0.5
    crossing_base_rate: float = 0.0001
    crossing_direction_gain: float = 3.0
    crossing_proximity_gain: float = 2.0
    crossing_min_distance: float = 0.25
    avoidance_radius: float = 1.0
    avoidance_gain: float = 1.0
    use_archetypes: bool = True

    def validate(self, prefix: str = "pedestrians") -> "PedestrianParams":
        checks = [
            ("epsilon", 0 <= self.epsilon < 1, "must lie in [0, 1)"),
            ("sigma", self.sigma >= 0, "must be >= 0"),
            ("stop_probability", 0 <= self.stop_probability <= 1, "must lie in [0, 1]"),
            ("resume_probability", 0 <= self.resume_probability <= 1, "must lie in [0, 1]"),
            ("crossing_base_rate", 0 <= self.crossing_base_rate <= 1, "must lie in [0, 1]"),
            ("walk_speed_mean", self.walk_speed_mean > 0, "must be > 0"),
            ("cross_speed", self.cross_speed > 0, "must be > 0"),
            ("short_range_distance", self.short_range_distance > 0, "must be > 0"),
            ("crossing_min_distance", self.crossing_min_distance > 0, "must be > 0"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{prefix}.{name}", msg)
        return self


# (sigma, epsilon, stop_probability) per pedestrian kind
ARCHETYPES = {
    "cautious": (0.15, 0.25, 0.004),
    "normal": (0.3, 0.1, 0.002),
    "erratic": (0.6, 0.05, 0.001),
}


@dataclass
class PedestrianState:
    position: np.ndarray
    heading: float
    mode: Mode
    long_range_goal: np.ndarray
    lateral_offset_beta: float
    rng_stream_id: int = 0
    side: int = 1
    walk_speed: float = 2.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))


@dataclass(frozen=True)
class EgoState:
    s: float
    v: float
    a: float = 0.0


# ---------------------------------------------------------------------------
# single-pedestrian rules


def update_lateral_offset(beta_t: float, params: PedestrianParams, rng: np.random.Generator) -> float:
    """Mean-reverting lateral offset of the short-range goal."""
    noise = rng.normal(0.0, params.sigma) if params.sigma > 0 else 0.0
    return (1.0 - params.epsilon) * beta_t + noise


def _short_range_goal(pos, goal, beta, reach):
    delta = goal - pos
    dist = np.linalg.norm(delta, axis=-1, keepdims=True)
    safe = np.where(dist > 1e-12, dist, 1.0)
    direction = np.where(dist > 1e-12, delta / safe, np.array([1.0, 0.0]))
    lateral = np.stack([-direction[..., 1], direction[..., 0]], axis=-1)
    along = np.minimum(dist, reach)
    return pos + along * direction + beta[..., None] * lateral


def short_range_goal(ped: PedestrianState, params: PedestrianParams) -> np.ndarray:
    """Point ``short_range_distance`` ahead toward the long-range goal, shifted
    left of the path by the current lateral offset. Within that distance of the
    goal the point is the goal itself (plus offset)."""
    return _short_range_goal(
        np.asarray(ped.position, float),
        np.asarray(ped.long_range_goal, float),
        np.asarray(ped.lateral_offset_beta, float),
        params.short_range_distance,
    )


def crossing_probability(
    position,
    velocity,
    side,
    cfg: WorldConfig,
    params: PedestrianParams,
    boost: float = 1.0,
):
    """Per-step crossing hazard; vectorised over leading dimensions."""
    position = np.asarray(position, float)
    velocity = np.asarray(velocity, float)
    side = np.asarray(side, float)
    speed = np.sqrt(velocity[..., 0] ** 2 + velocity[..., 1] ** 2)
    toward_road = -side * velocity[..., 1]
    cos_theta = np.where(speed > 1e-12, toward_road / np.where(speed > 1e-12, speed, 1.0), 0.0)
    d = np.abs(position[..., 1]) - cfg.road_half_width
    p = (
        params.crossing_base_rate
        * (1.0 + params.crossing_direction_gain * np.maximum(0.0, cos_theta))
        * (1.0 + params.crossing_proximity_gain / np.maximum(d, params.crossing_min_distance))
        * boost
    )
    return np.clip(p, 0.0, 1.0)


def crossing_decision(
    ped: PedestrianState,
    cfg: WorldConfig,
    params: PedestrianParams,
    rng: np.random.Generator,
    boost: float = 1.0,
) -> bool:
    p = crossing_probability(ped.position, ped.velocity, ped.side, cfg, params, boost)
    return bool(rng.random() < p)


def step_ego(ego: EgoState, accel: float, dt: float) -> EgoState:
    """Constant-acceleration update that stops at v = 0 instead of reversing."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    v_next = ego.v + accel * dt
    if v_next >= 0.0:
        return EgoState(ego.s + ego.v * dt + 0.5 * accel * dt * dt, v_next, accel)
    tau = ego.v / -accel
    return EgoState(ego.s + ego.v * tau + 0.5 * accel * tau * tau, 0.0, accel)


# ---------------------------------------------------------------------------
# vectorised pedestrian population

N_UNIFORMS = 6  # beta noise, stop, cross, resume, goal x, goal y


@dataclass
class PedestrianArrays:
    """Struct-of-arrays population; leading shape ``(..., N)``."""

    pos: np.ndarray
    vel: np.ndarray
    mode: np.ndarray
    goal: np.ndarray
    beta: np.ndarray
    side: np.ndarray
    walk_speed: np.ndarray
    epsilon: np.ndarray
    sigma: np.ndarray
    stop_p: np.ndarray

    def copy(self) -> "PedestrianArrays":
        return PedestrianArrays(**{f.name: getattr(self, f.name).copy() for f in dataclasses.fields(self)})

    def tile(self, k: int) -> "PedestrianArrays":
        """Stack ``k`` independent copies along a new leading axis."""
        return PedestrianArrays(
            **{f.name: np.repeat(getattr(self, f.name)[None], k, axis=0) for f in dataclasses.fields(self)}
        )

    def state(self, i: int) -> PedestrianState:
        return PedestrianState(
            position=self.pos[i].copy(),
            heading=float(math.atan2(self.vel[i, 1], self.vel[i, 0])),
            mode=Mode(int(self.mode[i])),
            long_range_goal=self.goal[i].copy(),
            lateral_offset_beta=float(self.beta[i]),
            rng_stream_id=i,
            side=int(self.side[i]),
            walk_speed=float(self.walk_speed[i]),
            velocity=self.vel[i].copy(),
        )

    @classmethod
    def from_states(cls, peds: Sequence[PedestrianState], params: PedestrianParams) -> "PedestrianArrays":
        n = len(peds)
        return cls(
            pos=np.array([p.position for p in peds], float).reshape(n, 2),
            vel=np.array([p.velocity for p in peds], float).reshape(n, 2),
            mode=np.array([int(p.mode) for p in peds], np.int64),
            goal=np.array([p.long_range_goal for p in peds], float).reshape(n, 2),
            beta=np.array([p.lateral_offset_beta for p in peds], float),
            side=np.array([p.side for p in peds], float),
            walk_speed=np.array([p.walk_speed for p in peds], float),
            epsilon=np.full(n, params.epsilon),
            sigma=np.full(n, params.sigma),
            stop_p=np.full(n, params.stop_probability),
        )


def advance_pedestrians(
    peds: PedestrianArrays,
    u: np.ndarray,
    cfg: WorldConfig,
    params: PedestrianParams,
    boost: float = 1.0,
) -> PedestrianArrays:
    """One synchronous step of every pedestrian given pre-drawn uniforms.

    ``u`` has shape ``peds.beta.shape + (N_UNIFORMS,)``; the uniform slots are
    (lateral noise, stop, cross, resume, goal x, goal y). Pure: returns a new
    population and leaves ``peds`` untouched.

    Walking pedestrians steer toward their short-range goal, pushed away from
    close sidewalk neighbours, and stay inside their sidewalk band. They may
    pause, or start crossing with the hazard of :func:`crossing_probability`.
    Crossing pedestrians move straight across at ``cross_speed`` and turn back
    into walkers (with a fresh goal) once they reach the far sidewalk.
    """
    lead = peds.beta.shape
    n = lead[-1] if lead else 0
    u = np.asarray(u, float)
    if u.shape != lead + (N_UNIFORMS,):
        raise ValueError(f"expected uniforms of shape {lead + (N_UNIFORMS,)}, got {u.shape}")
    if n == 0 or peds.beta.size == 0:
        return peds.copy()
    inner, outer = cfg.sidewalk_band(1)
    geo = np.array([cfg.dt, cfg.road_half_width, inner, outer, *cfg.spawn_x_range], float)
    prm = np.array(
        [
            params.crossing_base_rate,
            params.crossing_direction_gain,
            params.crossing_proximity_gain,
            params.crossing_min_distance,
            boost,
            params.resume_probability,
            params.short_range_distance,
            params.goal_tolerance,
            params.cross_speed,
            params.avoidance_radius,
            params.avoidance_gain,
        ],
        float,
    )
    normals = ndtri(np.clip(u[..., 0], 1e-300, 1.0 - 1e-16))

    def flat(a, tail=()):
        return np.ascontiguousarray(a, dtype=np.float64).reshape((-1, n) + tail)

    pos, vel, mode, goal, beta, side = _kernels.advance_population(
        flat(peds.pos, (2,)),
        flat(peds.vel, (2,)),
        np.ascontiguousarray(peds.mode, dtype=np.int64).reshape(-1, n),
        flat(peds.goal, (2,)),
        flat(peds.beta),
        flat(peds.side),
        flat(peds.walk_speed),
        flat(peds.epsilon),
        flat(peds.sigma),
        flat(peds.stop_p),
        flat(u, (N_UNIFORMS,)),
        flat(normals),
        geo,
        prm,
    )
    return PedestrianArrays(
        pos=pos.reshape(lead + (2,)),
        vel=vel.reshape(lead + (2,)),
        mode=mode.reshape(lead),
        goal=goal.reshape(lead + (2,)),
        beta=beta.reshape(lead),
        side=side.reshape(lead),
        walk_speed=peds.walk_speed,
        epsilon=peds.epsilon,
        sigma=peds.sigma,
        stop_p=peds.stop_p,
    )


def spawn_pedestrians(
    cfg: WorldConfig, params: PedestrianParams, rng: np.random.Generator
) -> PedestrianArrays:
    n = int(cfg.n_pedestrians)
    inner, outer = cfg.sidewalk_band(1)
    lo, hi = cfg.spawn_x_range
    side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    pos = np.stack([rng.uniform(lo, hi, n), side * rng.uniform(inner, outer, n)], axis=-1)
    goal = np.stack([rng.uniform(lo, hi, n), side * rng.uniform(inner, outer, n)], axis=-1)
    speed = np.maximum(rng.normal(params.walk_speed_mean, params.walk_speed_std, n), params.walk_speed_min)
    kinds = rng.integers(0, len(ARCHETYPES), n)
    table = np.array(list(ARCHETYPES.values()))
    if params.use_archetypes:
        sigma, eps, stop_p = table[kinds, 0], table[kinds, 1], table[kinds, 2]
    else:
        sigma = np.full(n, params.sigma)
        eps = np.full(n, params.epsilon)
        stop_p = np.full(n, params.stop_probability)
    heading = goal - pos
    heading /= np.maximum(np.linalg.norm(heading, axis=-1, keepdims=True), 1e-12)
    return PedestrianArrays(
        pos=pos,
        vel=heading * speed[:, None],
        mode=np.zeros(n, np.int64),
        goal=goal,
        beta=np.zeros(n),
        side=side,
        walk_speed=speed,
        epsilon=eps,
        sigma=sigma,
        stop_p=stop_p,
    )


def step_pedestrian(
    ped: PedestrianState,
    all_peds: Sequence[PedestrianState],
    params: PedestrianParams,
    cfg: WorldConfig,
    rng: np.random.Generator,
    boost: float = 1.0,
) -> PedestrianState:
    """Advance one pedestrian, avoiding the others in ``all_peds``.

    ``ped`` must not appear in ``all_peds``. Uses the same rules as the
    vectorised population step.
    """
    group = [ped, *all_peds]
    arr = PedestrianArrays.from_states(group, params)
    u = np.zeros((len(group), N_UNIFORMS))
    u[:, :] = 0.5
    u[:, 1:4] = 1.0  # others: no spontaneous transitions
    u[0] = rng.random(N_UNIFORMS)
    # others are frozen: only their positions matter for avoidance
    nxt = advance_pedestrians(arr, u, cfg, params, boost)
    out = nxt.state(0)
    out.rng_stream_id = ped.rng_stream_id
    return out


# ---------------------------------------------------------------------------
# world and episodes


def stream(seed: int, *path: int) -> np.random.Generator:
    """Counter-based generator keyed on ``(seed, *path)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, path)])))


def config_hash(*objs) -> str:
    payload = json.dumps([_plain(o) for o in objs], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _plain(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


@dataclass
class Observation:
    """What a predictor sees at one instant.

    ``world`` is a snapshot only the oracle predictor is allowed to use.
    """

    agents_past: np.ndarray  # (N, P, 2)
    ego_past: np.ndarray  # (P, 2)
    ego: EgoState
    world: "WorldSnapshot | None" = None


@dataclass
class WorldSnapshot:
    peds: PedestrianArrays
    cfg: WorldConfig
    params: PedestrianParams
    boost: float


class World:
    def __init__(
        self,
        cfg: WorldConfig,
        params: PedestrianParams,
        seed: int,
        boost: float = 1.0,
        pedestrians: PedestrianArrays | None = None,
    ):
        self.cfg = cfg
        self.params = params
        self.seed = int(seed)
        self.boost = float(boost)
        self.peds = pedestrians.copy() if pedestrians is not None else spawn_pedestrians(cfg, params, stream(seed, 1))
        n = self.peds.pos.shape[0]
        self.ped_streams = [stream(seed, 0, i) for i in range(n)]
        self.ego = EgoState(0.0, cfg.speed_limit, 0.0)
        self.step_index = 0
        P = int(cfg.past_steps)
        self._ped_hist = [self.peds.pos.copy()]
        for _ in range(P - 1):
            self._advance_peds()
            self._ped_hist.append(self.peds.pos.copy())
        self._ego_hist = [
            np.array([self.ego.s - self.ego.v * cfg.dt * (P - 1 - k), cfg.lane_center_offset]) for k in range(P)
        ]

    @property
    def time(self) -> float:
        return self.step_index * self.cfg.dt

    def _advance_peds(self) -> None:
        n = self.peds.pos.shape[0]
        u = np.empty((n, N_UNIFORMS))
        for i, g in enumerate(self.ped_streams):
            u[i] = g.random(N_UNIFORMS)
        self.peds = advance_pedestrians(self.peds, u, self.cfg, self.params, self.boost)

    def observation(self) -> Observation:
        P = int(self.cfg.past_steps)
        agents = np.stack(self._ped_hist[-P:], axis=1) if self.peds.pos.shape[0] else np.zeros((0, P, 2))
        return Observation(
            agents_past=agents,
            ego_past=np.stack(self._ego_hist[-P:]),
            ego=self.ego,
            world=WorldSnapshot(self.peds.copy(), self.cfg, self.params, self.boost),
        )

    def step(self, accel: float) -> None:
        self.ego = step_ego(self.ego, accel, self.cfg.dt)
        self._advance_peds()
        self.step_index += 1
        self._ped_hist.append(self.peds.pos.copy())
        self._ego_hist.append(np.array([self.ego.s, self.cfg.lane_center_offset]))
        P = int(self.cfg.past_steps)
        if len(self._ped_hist) > P:
            del self._ped_hist[0], self._ego_hist[0]

    def collided(self) -> bool:
        if self.peds.pos.shape[0] == 0:
            return False
        ego_xy = np.array([self.ego.s, self.cfg.lane_center_offset])
        dist = np.linalg.norm(self.peds.pos - ego_xy, axis=-1)
        return bool(np.any(dist < self.cfg.ego_radius + self.cfg.ped_radius))


@dataclass
class EpisodeTrace:
    seed: int
    config_hash: str
    outcome: str
    dt: float
    ego: np.ndarray  # (L, 3): s, v, a
    controls: np.ndarray  # (L,), NaN on the terminal record
    ped_pos: np.ndarray  # (L, N, 2)
    ped_mode: np.ndarray  # (L, N)
    predictions: np.ndarray | None = None  # (L, N, T, 2): first sample used at each step
    ego_past0: np.ndarray | None = None  # observation window preceding t = 0

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.controls)) * self.dt

    def __len__(self) -> int:
        return len(self.controls)

    def to_lines(self) -> list[str]:
        header = {
            "kind": "capo-trace",
            "version": 1,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "outcome": self.outcome,
            "dt": self.dt,
            "n_agents": int(self.ped_pos.shape[1]),
            "n_steps": len(self),
        }
        lines = [json.dumps(header, sort_keys=True)]
        for i in range(len(self)):
            u = float(self.controls[i])
            rec = {
                "t": i * self.dt,
                "s": float(self.ego[i, 0]),
                "v": float(self.ego[i, 1]),
                "a": float(self.ego[i, 2]),
                "u": None if math.isnan(u) else u,
                "agents": [
                    [float(x), float(y), int(m)] for (x, y), m in zip(self.ped_pos[i], self.ped_mode[i])
                ],
            }
            lines.append(json.dumps(rec))
        return lines

    def dumps(self) -> str:
        return "\n".join(self.to_lines()) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "EpisodeTrace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = json.loads(lines[0])
        if header.get("kind") != "capo-trace":
            raise ValueError("not a capo trace")
        recs = [json.loads(ln) for ln in lines[1:]]
        n = header["n_agents"]
        return cls(
            seed=header["seed"],
            config_hash=header["config_hash"],
            outcome=header["outcome"],
            dt=header["dt"],
            ego=np.array([[r["s"], r["v"], r["a"]] for r in recs], float).reshape(-1, 3),
            controls=np.array([np.nan if r["u"] is None else r["u"] for r in recs], float),
            ped_pos=np.array([[a[:2] for a in r["agents"]] for r in recs], float).reshape(len(recs), n, 2),
            ped_mode=np.array([[a[2] for a in r["agents"]] for r in recs], np.int64).reshape(len(recs), n),
        )

    @classmethod
    def load(cls, path) -> "EpisodeTrace":
        return cls.loads(Path(path).read_text())


def run_episode(
    model,
    planner,
    cfg: WorldConfig,
    params: PedestrianParams,
    seed: int,
    k: int | None = None,
    boost: float = 1.0,
    pedestrians: PedestrianArrays | None = None,
    record_predictions: bool = True,
) -> EpisodeTrace:
    """Closed loop: observe, predict, plan, step, until a terminal condition.

    ``model`` needs ``sample(obs, K, rng)`` returning an object with a
    ``samples`` array ``(K, N, T, 2)``; ``planner`` needs
    ``plan_over_samples(ego, samples)`` returning controls with ``accel``.
    """
    world = World(cfg, params, seed, boost, pedestrians)
    model_rng = stream(seed, 2)
    k = int(k if k is not None else getattr(model, "k_test", 1))
    chash = config_hash(cfg, params, {"boost": boost})
    ego_rows, controls, pos_rows, mode_rows, preds = [], [], [], [], []
    ego_past0 = None
    outcome = None
    while outcome is None:
        obs = world.observation()
        if ego_past0 is None:
            ego_past0 = obs.ego_past.copy()
        predicted = model.sample(obs, k, model_rng)
        samples = np.asarray(predicted.samples)
        if not np.all(np.isfinite(samples)):
            raise FloatingPointError(f"non-finite prediction at step {world.step_index} (seed {seed})")
        accel = float(planner.plan_over_samples(world.ego, samples).accel)
        if not math.isfinite(accel):
            raise FloatingPointError(f"non-finite control at step {world.step_index} (seed {seed})")
        ego_rows.append((world.ego.s, world.ego.v, world.ego.a))
        controls.append(accel)
        pos_rows.append(world.peds.pos.copy())
        mode_rows.append(world.peds.mode.copy())
        if record_predictions:
            preds.append(samples[0])
        world.step(accel)
        if not (math.isfinite(world.ego.s) and np.all(np.isfinite(world.peds.pos))):
            raise FloatingPointError(f"non-finite world state at step {world.step_index} (seed {seed})")
        if world.collided():
            outcome = Outcome.COLLISION
        elif world.ego.s >= cfg.road_length:
            outcome = Outcome.SUCCESS
        elif world.time > cfg.episode_timeout:
            outcome = Outcome.TIMEOUT
    ego_rows.append((world.ego.s, world.ego.v, world.ego.a))
    controls.append(np.nan)
    pos_rows.append(world.peds.pos.copy())
    mode_rows.append(world.peds.mode.copy())
    n = world.peds.pos.shape[0]
    T = int(cfg.horizon_T)
    if record_predictions:
        preds.append(np.full((n, T, 2), np.nan))
    return EpisodeTrace(
        seed=int(seed),
        config_hash=chash,
        outcome=outcome,
        dt=cfg.dt,
        ego=np.array(ego_rows, float),
        controls=np.array(controls, float),
        ped_pos=np.array(pos_rows, float).reshape(len(controls), n, 2),
        ped_mode=np.array(mode_rows, np.int64).reshape(len(controls), n),
        predictions=np.array(preds, float).reshape(len(controls), n, T, 2) if record_predictions else None,
        ego_past0=ego_past0,
    )


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Scene:
    agents_past: np.ndarray  # (N, P, 2)
    agents_future: np.ndarray  # (N, T, 2)
    ego_past: np.ndarray  # (P, 2)
    ego_future: np.ndarray  # (T, 2)
    ego_v: float
    ego_a: float
    agent_ids: np.ndarray
    modes_past: np.ndarray | None = None
    modes_future: np.ndarray | None = None

    @property
    def ego(self) -> EgoState:
        return EgoState(float(self.ego_past[-1, 0]), float(self.ego_v), float(self.ego_a))

    def observation(self) -> Observation:
        return Observation(self.agents_past, self.ego_past, self.ego)


SCENE_FIELDS = (
    "agents_past",
    "agents_future",
    "ego_past",
    "ego_future",
    "ego_v",
    "ego_a",
    "agent_ids",
    "modes_past",
    "modes_future",
)


@dataclass
class SceneSet:
    """Scenes stacked along axis 0; all share the same agent count."""

    agents_past: np.ndarray  # (S, N, P, 2)
    agents_future: np.ndarray  # (S, N, T, 2)
    ego_past: np.ndarray  # (S, P, 2)
    ego_future: np.ndarray  # (S, T, 2)
    ego_v: np.ndarray  # (S,)
    ego_a: np.ndarray  # (S,)
    agent_ids: np.ndarray  # (S, N)
    modes_past: np.ndarray  # (S, N, P)
    modes_future: np.ndarray  # (S, N, T)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.agents_past.shape[0]

    def __getitem__(self, i: int) -> Scene:
        return Scene(**{f: getattr(self, f)[i] for f in SCENE_FIELDS})

    def subset(self, idx) -> "SceneSet":
        idx = np.asarray(idx)
        return SceneSet(**{f: getattr(self, f)[idx] for f in SCENE_FIELDS}, meta=dict(self.meta))

    @classmethod
    def from_scenes(cls, scenes: Sequence[Scene], meta: dict | None = None) -> "SceneSet":
        return cls(
            **{f: np.stack([np.asarray(getattr(s, f)) for s in scenes]) for f in SCENE_FIELDS},
            meta=dict(meta or {}),
        )

    @property
    def crossing_agents(self) -> np.ndarray:
        """(S, N) mask: agent is off the sidewalk somewhere in the window."""
        both = np.concatenate([self.modes_past, self.modes_future], axis=-1)
        return (both == Mode.CROSSING).any(axis=-1)

    def save(self, path) -> None:
        arrays = {f: getattr(self, f) for f in SCENE_FIELDS}
        header = {"kind": "capo-dataset", "version": 1, "n_scenes": len(self), **self.meta}
        import io

        buf = io.BytesIO()
        np.savez(buf, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "SceneSet":
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["__header__"]))
            if header.get("kind") != "capo-dataset":
                raise ValueError(f"{path} is not a capo dataset")
            arrays = {f: np.array(data[f]) for f in SCENE_FIELDS}
        meta = {k: v for k, v in header.items() if k not in ("kind", "version", "n_scenes")}
        return cls(**arrays, meta=meta)


def scenes_from_trace(trace: EpisodeTrace, past_steps: int, horizon_T: int, lane_y: float = 0.0) -> list[Scene]:
    """Every (past, future) window at stride 1; window ``i`` has its present at
    record ``i + past_steps - 1``."""
    L = len(trace)
    W = past_steps + horizon_T
    out = []
    n = trace.ped_pos.shape[1]
    ids = np.arange(n)
    ego_xy = np.stack([trace.ego[:, 0], np.full(L, lane_y)], axis=-1)
    for start in range(L - W + 1):
        now = start + past_steps - 1
        sl_p = slice(start, now + 1)
        sl_f = slice(now + 1, now + 1 + horizon_T)
        out.append(
            Scene(
                agents_past=trace.ped_pos[sl_p].transpose(1, 0, 2).copy(),
                agents_future=trace.ped_pos[sl_f].transpose(1, 0, 2).copy(),
                ego_past=ego_xy[sl_p].copy(),
                ego_future=ego_xy[sl_f].copy(),
                ego_v=float(trace.ego[now, 1]),
                ego_a=float(trace.ego[now, 2]),
                agent_ids=ids.copy(),
                modes_past=trace.ped_mode[sl_p].T.copy(),
                modes_future=trace.ped_mode[sl_f].T.copy(),
            )
        )
    return out


def _collect_one(args):
    from .predictors.oracle import OraclePredictor

    planner, cfg, params, seed, k_oracle, boost = args
    trace = run_episode(
        OraclePredictor(k_test=k_oracle), planner, cfg, params, seed, k=k_oracle, boost=boost, record_predictions=False
    )
    return trace.outcome, len(trace), scenes_from_trace(trace, int(cfg.past_steps), int(cfg.horizon_T), cfg.lane_center_offset)


def collect_dataset(
    cfg: WorldConfig,
    params: PedestrianParams,
    n_episodes: int,
    seed: int,
    planner=None,
    k_oracle: int = 5,
    boost: float = 1.0,
    jobs: int = 1,
) -> SceneSet:
    """Expert data: the oracle predictor drives the ego through ``n_episodes``
    episodes and every trace is sliced into overlapping scenes.

    Episodes are independent; ``jobs > 1`` runs them in worker processes and
    the scenes are concatenated in seed order either way.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    from .planner import IdmPlanner

    planner = planner or IdmPlanner.for_world(cfg)
    tasks = [(planner, cfg, params, seed + e, k_oracle, boost) for e in range(n_episodes)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_collect_one, tasks))
    else:
        results = [_collect_one(t) for t in tasks]
    scenes: list[Scene] = []
    per_episode = []
    skipped = 0
    for e, (outcome, steps, sl) in enumerate(results):
        if not sl:
            skipped += 1
        per_episode.append({"seed": seed + e, "outcome": outcome, "steps": steps, "scenes": len(sl)})
        scenes.extend(sl)
    if not scenes:
        raise ValueError("no episode was long enough to produce a scene")
    meta = {
        "seed": int(seed),
        "n_episodes": int(n_episodes),
        "skipped_episodes": skipped,
        "episodes": per_episode,
        "config_hash": config_hash(cfg, params, {"boost": boost}),
    }
    return SceneSet.from_scenes(scenes, meta)
