"""Longitudinal IDM controller that reacts to predicted pedestrian paths.

The hard controller (:meth:`IdmPlanner.plan`) is a pure, non-differentiable
function of its input: find the nearest point ahead where any trajectory
enters the ego lane corridor, then command the IDM acceleration for stopping
``stop_margin`` metres short of it. :meth:`IdmPlanner.plan_smooth` is an
everywhere-differentiable stand-in used only by the gradient-weighting
baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .nnkit import tensor as nt
from .simworld import ConfigError, EgoState, WorldConfig


@dataclass(frozen=True)
class IdmParams:
    v_desired: float = 20.1168
    a_max: float = 3.0
    b_comfort: float = 3.0
    s0: float = 2.0
    t_headway: float = 1.0
    delta_exponent: float = 4.0

    def validate(self, prefix: str = "idm") -> "IdmParams":
        for name in ("v_desired", "a_max", "b_comfort", "s0", "t_headway", "delta_exponent"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{prefix}.{name}", "must be > 0")
        return self


@dataclass(frozen=True)
class PlannerConfig:
    idm: IdmParams = field(default_factory=IdmParams)
    b_hard: float = 8.0
    stop_margin: float = 2.0
    min_gap: float = 0.1
    reach_slack: float = 10.0
    rear_margin: float = 1.0
    lane_center: float = -2.0
    corridor_half_width: float = 2.3
    dt: float = 0.1
    sharpness: float = 4.0
    softmax_tau: float = 0.01
    # softness of the lower acceleration bound in the surrogate, per m/s^2
    accel_sharpness: float = 1.0

    def validate(self, prefix: str = "planner") -> "PlannerConfig":
        for name in ("b_hard", "min_gap", "corridor_half_width", "dt", "sharpness", "softmax_tau", "accel_sharpness"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{prefix}.{name}", "must be > 0")
        for name in ("stop_margin", "reach_slack", "rear_margin"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{prefix}.{name}", "must be >= 0")
        self.idm.validate("idm")
        return self


@dataclass(frozen=True)
class Controls:
    accel: float


@dataclass
class PlannerInput:
    ego: EgoState
    trajectories: np.ndarray  # (N, T, 2) future positions, step t at time (t + 1) * dt


def idm_accel(v, gap, closing_speed, p: IdmParams, b_hard: float = 8.0):
    """IDM acceleration toward a (possibly infinite) gap, clamped to
    ``[-b_hard, a_max]``. Vectorised over ``v``/``gap``/``closing_speed``."""
    v = np.asarray(v, float)
    gap = np.asarray(gap, float)
    s_star = p.s0 + v * p.t_headway + v * np.asarray(closing_speed, float) / (2.0 * math.sqrt(p.a_max * p.b_comfort))
    with np.errstate(divide="ignore"):
        interaction = np.where(np.isinf(gap), 0.0, (s_star / gap) ** 2)
    a = p.a_max * (1.0 - (v / p.v_desired) ** p.delta_exponent - interaction)
    out = np.clip(a, -b_hard, p.a_max)
    return float(out) if out.ndim == 0 else out


class IdmPlanner:
    """Stateless controller; safe to share across episodes."""

    differentiable = False

    def __init__(self, cfg: PlannerConfig | None = None):
        self.cfg = cfg or PlannerConfig()

    @classmethod
    def for_world(cls, world: WorldConfig, idm: IdmParams | None = None, **overrides) -> "IdmPlanner":
        idm = idm or IdmParams(v_desired=world.speed_limit)
        cfg = PlannerConfig(
            idm=idm,
            lane_center=world.lane_center_offset,
            corridor_half_width=world.corridor_half_width,
            dt=world.dt,
            **overrides,
        )
        return cls(cfg)

    # -- hard controller -----------------------------------------------------

    def step_distances(self, ego_s, ego_v, trajectories: np.ndarray) -> np.ndarray:
        """Along-road distance to every (agent, step) point that lies in the
        corridor and is reachable; ``inf`` elsewhere.

        ``trajectories`` is ``(..., N, T, 2)``; ``ego_s``/``ego_v`` broadcast
        against the leading dims.
        """
        c = self.cfg
        traj = np.asarray(trajectories, float)
        T = traj.shape[-2]
        ego_s = np.asarray(ego_s, float)[..., None, None]
        ego_v = np.asarray(ego_v, float)[..., None, None]
        ahead = traj[..., 0] - ego_s
        in_lane = np.abs(traj[..., 1] - c.lane_center) <= c.corridor_half_width
        horizon = np.arange(1, T + 1) * c.dt
        reach = ego_v * horizon + c.reach_slack
        hit = in_lane & (ahead >= -c.rear_margin) & (ahead <= reach)
        return np.where(hit, np.maximum(ahead, 0.0), np.inf)

    def agent_distances(self, ego_s, ego_v, trajectories: np.ndarray) -> np.ndarray:
        """Per-agent closest collision distance, shape ``(..., N)``."""
        d = self.step_distances(ego_s, ego_v, trajectories)
        return d.min(axis=-1) if d.shape[-1] else np.full(d.shape[:-1], np.inf)

    def closest_collision_distance(self, inp: PlannerInput) -> float:
        traj = np.asarray(inp.trajectories, float)
        if traj.size == 0:
            return math.inf
        return float(self.agent_distances(inp.ego.s, inp.ego.v, traj).min())

    def accel_for_distance(self, v, distance):
        """Hard control law given the closest collision distance."""
        c = self.cfg
        distance = np.asarray(distance, float)
        gap = np.where(np.isinf(distance), np.inf, np.maximum(distance - c.stop_margin, c.min_gap))
        return idm_accel(v, gap, v, c.idm, c.b_hard)

    def plan(self, inp: PlannerInput) -> Controls:
        return Controls(float(self.accel_for_distance(inp.ego.v, self.closest_collision_distance(inp))))

    def plan_over_samples(self, ego: EgoState, samples: np.ndarray) -> Controls:
        """React to the worst sample of every agent: ``samples`` is
        ``(K, N, T, 2)`` and the closest distance is the min over all of them."""
        samples = np.asarray(samples, float)
        if samples.ndim != 4 or samples.shape[0] < 1:
            raise ValueError("samples must have shape (K>=1, N, T, 2)")
        if samples.shape[1] == 0:
            return Controls(float(self.accel_for_distance(ego.v, math.inf)))
        d = float(self.agent_distances(ego.s, ego.v, samples).min())
        return Controls(float(self.accel_for_distance(ego.v, d)))

    # -- differentiable surrogate --------------------------------------------

    def plan_smooth(self, ego_s, ego_v, trajectories, sharpness: float | None = None, tau: float | None = None):
        """Smoothed controller; ``trajectories`` may be an nnkit Tensor.

        Corridor, rear and reachability tests become products of sigmoids
        (membership ``m``). The nearest obstacle is found with a soft maximum
        of membership-scaled inverse gaps, ``tau * log(1 + sum expm1(m / (gap *
        tau)))``, which vanishes on a free road and tends to the hard max as
        ``tau -> 0``.
        The braking limit is a softplus floor rather than a clip, so agents that
        force hard braking still carry gradient; its sharpness scales with
        ``sharpness``. Leading dims of ``trajectories`` beyond ``(N, T, 2)`` are a batch.
        """
        c = self.cfg
        k = c.sharpness if sharpness is None else sharpness
        tau = c.softmax_tau if tau is None else tau
        tv = nt.value_of(trajectories)
        T = tv.shape[-2]
        batch = tv.shape[:-3]
        ego_s = np.broadcast_to(np.asarray(ego_s, float), batch)[..., None, None]
        v = np.broadcast_to(np.asarray(ego_v, float), batch)
        vb = v[..., None, None]

        x = trajectories[..., 0]
        y = trajectories[..., 1]
        dy = nt.sub(y, c.lane_center)
        ahead = nt.sub(x, ego_s)
        reach = vb * (np.arange(1, T + 1) * c.dt) + c.reach_slack
        log_m = nt.add(
            nt.add(
                _log_sigmoid(nt.mul(k, nt.sub(c.corridor_half_width, dy))),
                _log_sigmoid(nt.mul(k, nt.add(dy, c.corridor_half_width))),
            ),
            nt.add(
                _log_sigmoid(nt.mul(k, nt.add(ahead, c.rear_margin))),
                _log_sigmoid(nt.mul(k, nt.sub(reach, ahead))),
            ),
        )
        # smooth max(ahead, 0), then smooth max(. - margin, min_gap)
        dist = nt.div(nt.softplus(nt.mul(k, ahead)), k)
        gap = nt.add(c.min_gap, nt.div(nt.softplus(nt.mul(k, nt.sub(dist, c.stop_margin + c.min_gap))), k))
        # membership scales the inverse gap, so points off the corridor or
        # behind the ego contribute nothing however small their gap
        z = nt.maximum(nt.div(nt.exp(log_m), nt.mul(tau, gap)), 1e-300)
        flat = nt.reshape(nt.log_expm1(z), batch + (-1,))
        zeros = np.zeros(batch + (1,))
        closeness = nt.mul(tau, nt.logsumexp(nt.concat([zeros, flat], axis=-1), axis=-1))

        p = c.idm
        s_star = p.s0 + v * p.t_headway + v * v / (2.0 * math.sqrt(p.a_max * p.b_comfort))
        inter = nt.mul(s_star * s_star, nt.mul(closeness, closeness))
        free = p.a_max * (1.0 - (v / p.v_desired) ** p.delta_exponent)
        accel = nt.sub(free, nt.mul(p.a_max, inter))
        # accel <= free <= a_max already; only the lower bound needs softening
        ka = c.accel_sharpness * k / c.sharpness
        return nt.sub(nt.div(nt.softplus(nt.mul(ka, nt.add(accel, c.b_hard))), ka), c.b_hard)

    def smooth_gradient(self, ego_s, ego_v, trajectories: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(accel, d accel / d trajectories) for a batch of trajectory sets."""
        t = nt.Tensor(np.asarray(trajectories, float), requires_grad=True)
        out = self.plan_smooth(ego_s, ego_v, t)
        nt.backward(nt.sum_(out))
        grad = t.grad if t.grad is not None else np.zeros_like(t.value)
        return nt.value_of(out), grad

    def planner_gradient_weight(self, ego_s, ego_v, trajectories: np.ndarray) -> np.ndarray:
        """Per-agent L1 norm of the surrogate's gradient, shape ``(..., N)``."""
        _, grad = self.smooth_gradient(ego_s, ego_v, trajectories)
        return np.abs(grad).sum(axis=(-1, -2))


def _log_sigmoid(x):
    return nt.neg(nt.softplus(nt.neg(x)))
