import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference_impl as ref
from capo.nnkit import tensor as nt
from capo.planner import IdmParams, IdmPlanner, PlannerConfig, PlannerInput, idm_accel
from capo.simworld import ConfigError, EgoState

T = 30


def standing(x, y=-2.0, steps=T):
    return np.tile([x, y], (steps, 1))[None]


def inp(s, v, trajs):
    return PlannerInput(EgoState(s, v), np.asarray(trajs, float).reshape(-1, T, 2))


# ---------------------------------------------------------------------------
# IDM


def test_idm_free_flow_examples():
    p = IdmParams()
    assert idm_accel(p.v_desired, math.inf, 0.0, p) == pytest.approx(0.0, abs=1e-12)
    assert idm_accel(0.0, math.inf, 0.0, p) == p.a_max


def test_idm_plug_in_value():
    p = IdmParams()
    # s* = 2 + 10 + 10 * 10 / (2 * 3) = 28.6667
    s_star = 2.0 + 10.0 + 100.0 / 6.0
    expected = 3.0 * (1.0 - (10.0 / 20.1168) ** 4 - (s_star / 20.0) ** 2)
    assert s_star == pytest.approx(28.666666666666668)
    # independently: 3 * (1 - 0.061064 - 2.054444) = -3.346517, i.e. -3.35 to two places
    assert expected == pytest.approx(-3.346517, abs=1e-6)
    assert round(expected, 2) == -3.35
    assert idm_accel(10.0, 20.0, 10.0, p) == pytest.approx(expected, rel=1e-12)


def test_idm_clamps():
    p = IdmParams()
    assert idm_accel(20.0, 0.1, 20.0, p, b_hard=8.0) == -8.0
    assert idm_accel(0.0, math.inf, 0.0, p) <= p.a_max


# ---------------------------------------------------------------------------
# hard controller


def test_closest_collision_distance_examples():
    pl = IdmPlanner()
    sidewalk = standing(30.0, y=7.0)
    assert pl.closest_collision_distance(inp(0.0, 10.0, sidewalk)) == math.inf
    assert pl.closest_collision_distance(inp(0.0, 10.0, standing(20.0))) == 20.0
    # enters the lane at step 15, 12 m ahead: reachable since 10 * 1.5 + slack >= 12
    traj = np.tile([12.0, 7.0], (T, 1))
    traj[14:, 1] = -2.0
    assert pl.closest_collision_distance(inp(0.0, 10.0, traj[None])) == 12.0
    # with zero slack it is still reachable, 15 m >= 12 m
    tight = IdmPlanner(PlannerConfig(reach_slack=0.0))
    assert tight.closest_collision_distance(inp(0.0, 10.0, traj[None])) == 12.0
    # but not at v = 5 (7.5 m by step 15, 15 m by the horizon's end)
    assert tight.closest_collision_distance(inp(0.0, 5.0, traj[None])) == 12.0
    late = traj.copy()
    late[:, 0] = 20.0
    assert tight.closest_collision_distance(inp(0.0, 5.0, late[None])) == math.inf


def test_plan_examples():
    pl = IdmPlanner()
    free = pl.plan(inp(0.0, 10.0, np.zeros((0, T, 2)))).accel
    assert free == pytest.approx(idm_accel(10.0, math.inf, 10.0, pl.cfg.idm))
    assert pl.plan(inp(0.0, 10.0, standing(0.5))).accel <= -pl.cfg.idm.b_comfort


def test_plan_matches_point_by_point_reference(rng):
    pl = IdmPlanner()
    for _ in range(300):
        n = rng.integers(0, 5)
        trajs = np.stack([rng.uniform([-10, -8], [80, 8], (T, 2)) for _ in range(n)]) if n else np.zeros((0, T, 2))
        s, v = rng.uniform(0, 50), rng.uniform(0, 22)
        got = pl.plan(PlannerInput(EgoState(s, v), trajs)).accel
        assert got == pytest.approx(ref.naive_plan(pl.cfg, s, v, trajs), abs=1e-12)


def test_plan_over_samples_reduction(rng):
    pl = IdmPlanner()
    for _ in range(100):
        trajs = rng.uniform([0, -6], [60, 6], (4, T, 2))
        ego = EgoState(rng.uniform(0, 20), rng.uniform(0, 20))
        assert pl.plan_over_samples(ego, trajs[None]).accel == pl.plan(PlannerInput(ego, trajs)).accel
    ego = EgoState(0.0, 10.0)
    both = np.stack([standing(10.0), standing(5.0, y=8.0)])
    assert pl.plan_over_samples(ego, both).accel == pl.plan(inp(0.0, 10.0, standing(10.0))).accel
    with pytest.raises(ValueError):
        pl.plan_over_samples(ego, np.zeros((0, 1, T, 2)))


@settings(max_examples=100, deadline=None)
@given(v=st.floats(0, 25), d1=st.floats(0, 100), d2=st.floats(0, 100))
def test_accel_is_monotone_in_distance(v, d1, d2):
    pl = IdmPlanner()
    lo, hi = sorted((d1, d2))
    assert pl.accel_for_distance(v, lo) <= pl.accel_for_distance(v, hi) + 1e-12
    assert -pl.cfg.b_hard <= pl.accel_for_distance(v, lo) <= pl.cfg.idm.a_max


def test_rear_agents_have_no_effect(rng):
    pl = IdmPlanner()
    for _ in range(50):
        s = rng.uniform(20, 100)
        front = rng.uniform([s, -5], [s + 60, 5], (3, T, 2))
        rear = rng.uniform([s - 40, -4], [s - pl.cfg.rear_margin - 1e-3, 0], (2, T, 2))
        ego = EgoState(s, rng.uniform(0, 20))
        with_rear = pl.plan(PlannerInput(ego, np.concatenate([front, rear]))).accel
        assert with_rear == pl.plan(PlannerInput(ego, front)).accel


def test_planner_config_validation():
    with pytest.raises(ConfigError) as exc:
        PlannerConfig(b_hard=0.0).validate()
    assert exc.value.field == "planner.b_hard"
    with pytest.raises(ConfigError) as exc:
        PlannerConfig(idm=IdmParams(s0=0.0)).validate()
    assert exc.value.field == "idm.s0"


# ---------------------------------------------------------------------------
# smoothed controller


def test_smooth_far_agent_gives_free_road_value():
    pl = IdmPlanner()
    far = standing(30.0, y=40.0)
    hard = pl.plan(inp(0.0, 12.0, far)).accel
    assert float(pl.plan_smooth(0.0, 12.0, far)) == pytest.approx(hard, abs=1e-3)


def _probe_suite():
    rng = np.random.default_rng(3)
    probes = []
    for _ in range(40):
        v = rng.uniform(5, 20)
        x0 = rng.uniform(5, 60)
        traj = np.tile([x0, 7.0], (T, 1))
        k = rng.integers(5, 25)
        traj[k:, 1] = -2.0 + rng.uniform(-1.5, 1.5)
        probes.append((v, traj[None]))
    return probes


def test_smooth_converges_to_hard_controller():
    pl = IdmPlanner()
    errs = []
    for k, tau in [(1.0, 1.0), (4.0, 0.1), (20.0, 0.01), (100.0, 0.001)]:
        e = [abs(float(pl.plan_smooth(0.0, v, tr, sharpness=k, tau=tau)) - pl.plan(inp(0.0, v, tr)).accel) for v, tr in _probe_suite()]
        errs.append(float(np.mean(e)))
    assert all(b < a for a, b in zip(errs, errs[1:])), errs


def test_smooth_batched_matches_loop(rng):
    pl = IdmPlanner()
    trajs = rng.uniform([0, -6], [50, 6], (3, 4, T, 2))
    s = rng.uniform(0, 5, 3)
    v = rng.uniform(5, 20, 3)
    batched = nt.value_of(pl.plan_smooth(s, v, trajs))
    for b in range(3):
        assert float(pl.plan_smooth(s[b], v[b], trajs[b])) == pytest.approx(batched[b], abs=1e-12)


def _fd_check(f, x, rng, probes=20, eps=1e-5):
    t = nt.Tensor(x, requires_grad=True)
    out = f(t)
    nt.backward(nt.sum_(out))
    g = t.grad
    worst = 0.0
    for _ in range(probes):
        d = rng.standard_normal(x.shape)
        fd = (float(np.sum(nt.value_of(f(x + eps * d)))) - float(np.sum(nt.value_of(f(x - eps * d))))) / (2 * eps)
        an = float(np.sum(g * d))
        # derivatives below 1e-6 are lost in roundoff; compare absolutely there
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def test_smooth_gradient_matches_finite_differences(rng):
    pl = IdmPlanner()
    for v, traj in _probe_suite()[:10]:
        x = traj + rng.normal(0, 0.3, traj.shape)
        assert _fd_check(lambda t: pl.plan_smooth(0.0, v, t), x, rng) < 1e-4


def test_gradient_weight_examples():
    pl = IdmPlanner()
    behind = standing(-30.0)
    crossing = np.tile([25.0, 6.0], (T, 1))
    crossing[:, 1] = 6.0 - 0.2 * np.arange(1, T + 1)
    sidewalk = standing(25.0, y=7.0)
    w = pl.planner_gradient_weight(0.0, 15.0, np.concatenate([behind, crossing[None], sidewalk]))
    assert np.all(w >= 0)
    assert w[0] < 1e-6
    assert w[1] > w[2]
