import math

import numpy as np
import pytest

from capo.nnkit import tensor as nt
from capo.predictors import (
    AttentionPredictor,
    ConstantVelocityGaussian,
    PredictionModel,
    Seq2SeqPredictor,
    attention_head,
    build_model,
    ego_attention,
)
from capo.predictors import gru_gmm as G
from capo.simworld import Mode, PedestrianArrays, PedestrianParams, SceneSet, World, WorldConfig

from gradcheck import directional_check


def _walkers(rng, n_scenes, n_agents=3, P=10, T=30, dt=0.1):
    """Straight-line walkers at random headings and speeds, as a SceneSet."""
    start = rng.uniform(-20, 20, (n_scenes, n_agents, 1, 2))
    speed = rng.uniform(0.8, 2.5, (n_scenes, n_agents, 1, 1))
    ang = rng.uniform(-np.pi, np.pi, (n_scenes, n_agents, 1, 1))
    vel = speed * np.concatenate([np.cos(ang), np.sin(ang)], -1)
    t = np.arange(P + T)[None, None, :, None] * dt
    traj = start + vel * t
    ego = np.zeros((n_scenes, P + T, 2))
    ego[..., 0] = 10.0 * np.arange(P + T) * dt
    ego[..., 1] = -2.0
    z = np.zeros((n_scenes, n_agents, P), np.int64)
    return SceneSet(
        agents_past=traj[:, :, :P],
        agents_future=traj[:, :, P:],
        ego_past=ego[:, :P],
        ego_future=ego[:, P:],
        ego_v=np.full(n_scenes, 10.0),
        ego_a=np.zeros(n_scenes),
        agent_ids=np.tile(np.arange(n_agents), (n_scenes, 1)),
        modes_past=z,
        modes_future=np.zeros((n_scenes, n_agents, T), np.int64),
    )


# --- constant velocity -------------------------------------------------------


def test_cv_extrapolates_last_displacement():
    m = ConstantVelocityGaussian(sigma=1e-9)
    past = np.stack([np.arange(10) * 0.2, np.zeros(10)], -1)[None]
    s = m.sample_batch(past, 1, np.random.default_rng(0))[0, 0]
    expected = np.stack([1.8 + 0.2 * np.arange(1, 31), np.zeros(30)], -1)
    np.testing.assert_allclose(s, expected, atol=1e-6)


def test_cv_single_point_has_zero_velocity():
    m = ConstantVelocityGaussian()
    np.testing.assert_array_equal(m.mean(np.array([[[3.0, 4.0]]]))[0], np.tile([3.0, 4.0], (30, 1)))


def test_cv_log_prob_at_mean_is_analytic():
    m = ConstantVelocityGaussian(sigma=0.2)
    past = np.stack([np.arange(10) * 0.1, np.ones(10)], -1)[None]
    lp = m.agent_log_probs(past, m.mean(past))
    assert float(lp[0]) == pytest.approx(30 * (-2 * math.log(0.2) - math.log(2 * math.pi)), rel=1e-13)


def test_cv_monte_carlo_mean():
    m = ConstantVelocityGaussian(sigma=0.1)
    past = np.stack([np.arange(10) * 0.15, np.zeros(10)], -1)[None]
    K = 10_000
    s = m.sample_batch(past, K, np.random.default_rng(1))
    sd = 0.1 * np.sqrt(np.arange(1, 31))[:, None]
    err = np.abs(s.mean(0)[0] - m.mean(past)[0])
    assert np.all(err < 3 * sd / math.sqrt(K))


def test_cv_rejects_bad_sigma():
    with pytest.raises(ValueError):
        ConstantVelocityGaussian(sigma=0.0)


# --- seq2seq -----------------------------------------------------------------


def test_fresh_seq2seq_stays_near_last_position(rng):
    m = Seq2SeqPredictor(seed=3)
    past = np.zeros((4, 10, 2)) + rng.uniform(-5, 5, (4, 1, 2))
    mean = m.mean_rollout(past)
    assert np.max(np.linalg.norm(mean - past[:, -1:], axis=-1)) < 1.0


def test_log_prob_finite_on_dataset(small_dataset):
    m = Seq2SeqPredictor()
    lp = m.agent_log_probs(small_dataset.agents_past, small_dataset.agents_future)
    assert lp.shape == small_dataset.agents_past.shape[:2]
    assert np.all(np.isfinite(lp))


def test_compiled_sampler_matches_autodiff_path(rng):
    m = Seq2SeqPredictor(hidden=8, seed=2)
    # push parameters away from the tiny initial head so both paths do real work
    for a in m.store.arrays.values():
        a += rng.normal(size=a.shape) * 0.3
    past = rng.normal(size=(2, 3, 10, 2)).cumsum(-2) * 0.1
    K, R, T = 4, 6, 30
    noise = (rng.random((T, K * R)), rng.standard_normal((T, K * R, 2)))
    fast = m.sample_batch(past, K, None, noise=noise)
    slow = m.sample_batch(past, K, None, params=m.store.tensors(), noise=noise)
    assert isinstance(slow, nt.Tensor)
    np.testing.assert_allclose(fast, slow.value, rtol=0, atol=1e-12)


def test_compiled_encoder_matches_autodiff_path(rng):
    p = {k: v + rng.normal(size=v.shape) * 0.2 for k, v in G.L.init_gru(rng, 3, 5).items()}
    feats = rng.normal(size=(7, 9, 3))
    fast = G.encode(p, feats)
    slow = G.encode({k: nt.Tensor(v, requires_grad=True) for k, v in p.items()}, feats)
    np.testing.assert_allclose(fast, slow.value, rtol=0, atol=1e-13)


def test_log_prob_gradient(rng):
    m = Seq2SeqPredictor(hidden=6, seed=1)
    past = rng.normal(size=(2, 2, 10, 2)).cumsum(-2) * 0.1
    fut = past[..., -1:, :] + rng.normal(size=(2, 2, 30, 2)).cumsum(-2) * 0.1

    def f(p):
        return nt.sum_(m.agent_log_probs(past, fut, params=p))

    assert directional_check(f, dict(m.store.arrays), rng, n_dirs=30) < 1e-4


def test_sample_gradient_common_random_numbers(rng):
    m = Seq2SeqPredictor(hidden=6, seed=1)
    for a in m.store.arrays.values():
        a += rng.normal(size=a.shape) * 0.2
    past = rng.normal(size=(1, 2, 10, 2)).cumsum(-2) * 0.1
    K = 3
    noise = (rng.random((30, K * 2)), rng.standard_normal((30, K * 2, 2)))
    c = rng.normal(size=(K, 1, 2, 30, 2))

    def f(p):
        if type(next(iter(p.values()))) is np.ndarray:
            p = {k: nt.Tensor(v) for k, v in p.items()}
        return nt.sum_(nt.mul(m.sample_batch(past, K, None, params=p, noise=noise), c))

    assert directional_check(f, dict(m.store.arrays), rng, n_dirs=30, eps=1e-7) < 1e-3


def test_single_step_density_integrates_to_one():
    m = Seq2SeqPredictor(seed=4)
    past = np.stack([np.arange(10) * 0.15, np.full(10, 7.0)], -1)
    g = np.linspace(-0.4, 0.4, 241)
    X, Y = np.meshgrid(g, g, indexing="ij")
    centre = past[-1] + np.array([0.15, 0.0])
    pts = centre + np.stack([X.ravel(), Y.ravel()], -1)
    lp = m.agent_log_probs(np.broadcast_to(past, (len(pts), 10, 2))[:, None], pts[:, None, None, :])
    h = g[1] - g[0]
    assert abs(np.exp(lp).sum() * h * h - 1.0) < 0.01


def test_own_samples_score_higher_than_mismatched_truth(small_dataset, rng):
    m = Seq2SeqPredictor(seed=0)
    a, b = small_dataset[10], small_dataset[len(small_dataset) - 10]
    own = m.sample(a.observation(), 20, rng).samples
    lp_own = np.mean([m.log_prob_agent(a.observation(), s, 0) for s in own])
    lp_other = m.log_prob_agent(a.observation(), b.agents_future, 0)
    assert lp_own > lp_other


def test_straight_walkers_are_learned():
    from capo.objectives import TrainingConfig, train

    r = np.random.default_rng(0)
    data = _walkers(r, 4000)
    m = Seq2SeqPredictor(hidden=16, seed=0)
    cfg = TrainingConfig(epochs=1, batches_per_epoch=300, batch_size=16, lr=1e-2)
    train(m, data, "UniformNLL", cfg)
    test = _walkers(np.random.default_rng(99), 20)
    mean = m.mean_rollout(test.agents_past)
    ade = np.linalg.norm(mean - test.agents_future, axis=-1).mean()
    assert ade < 0.5


def test_checkpoint_round_trip(tmp_path, rng):
    m = Seq2SeqPredictor(hidden=8, seed=5)
    m.save(tmp_path / "m.npz", {"scheme": "UniformNLL"})
    back, header = PredictionModel.load(tmp_path / "m.npz")
    assert header["scheme"] == "UniformNLL" and back.config() == m.config()
    past = rng.normal(size=(1, 2, 10, 2))
    np.testing.assert_array_equal(back.mean_rollout(past), m.mean_rollout(past))


def test_build_model_rejects_unknown_kind():
    with pytest.raises(ValueError, match="unknown model kind"):
        build_model("flow")


# --- attention ---------------------------------------------------------------


def test_identical_keys_give_uniform_coefficients(rng):
    E, dk, N = 4, 3, 5
    ego = rng.normal(size=E)
    agents = np.tile(ego, (N, 1))
    _, alpha = attention_head(ego, agents, rng.normal(size=(E, dk)), rng.normal(size=(E, dk)), rng.normal(size=(E, dk)))
    np.testing.assert_allclose(alpha, 1 / (N + 1), atol=1e-15)


def test_ego_alone_attends_to_itself(rng):
    E, dk = 4, 3
    ego = rng.normal(size=E)
    Wq, Wk, Wv = (rng.normal(size=(E, dk)) for _ in range(3))
    ctx, alpha = attention_head(ego, np.zeros((0, E)), Wq, Wk, Wv)
    np.testing.assert_array_equal(alpha, [1.0])
    np.testing.assert_allclose(ctx, ego @ Wv, atol=1e-15)


def test_hand_computed_two_dim_head():
    eye = np.eye(2)
    ego = np.array([1.0, 0.0])
    agent = np.array([[0.5, 2.0]])
    # identity projections: q = (1, 0), k0 = (1, 0), k1 = (0.5, 2)
    _, alpha = attention_head(ego, agent, eye, eye, eye)
    s = np.array([1.0, 0.5]) / math.sqrt(2)
    expected = np.exp(s) / np.exp(s).sum()
    np.testing.assert_allclose(alpha, expected, rtol=0, atol=1e-15)


def test_attention_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        attention_head(np.ones(4), np.ones((2, 3)), np.ones((4, 2)), np.ones((4, 2)), np.ones((4, 2)))
    with pytest.raises(ValueError):
        ego_attention(np.ones(4), np.ones((2, 4)), np.ones((1, 3, 2)), np.ones((1, 3, 2)), np.ones((1, 3, 2)))


def test_attention_coefficients_are_distributions(small_dataset):
    m = AttentionPredictor(seed=2)
    alpha = m.attention_coefficients(small_dataset.agents_past, small_dataset.ego_past)
    assert alpha.shape == (len(small_dataset), 2, small_dataset.agents_past.shape[1] + 1)
    assert alpha.min() >= 0
    np.testing.assert_allclose(alpha.sum(-1), 1.0, rtol=0, atol=1e-12)


def test_attention_gradient(rng):
    m = AttentionPredictor(hidden=6, n_heads=2, key_dim=3, embed_dim=4, seed=1)
    past = rng.normal(size=(2, 3, 10, 2)).cumsum(-2) * 0.1
    fut = past[..., -1:, :] + rng.normal(size=(2, 3, 30, 2)).cumsum(-2) * 0.1
    ego_p = np.stack([np.arange(10) * 1.0, np.full(10, -2.0)], -1)[None].repeat(2, 0)
    ego_f = np.stack([10 + np.arange(30) * 1.0, np.full(30, -2.0)], -1)[None].repeat(2, 0)
    c = rng.normal(size=(2, 2, 4))

    def f(p):
        e, a, al = m.forward(past, ego_p, fut, ego_f, params=p)
        return nt.add(nt.add(nt.sum_(e), nt.sum_(a)), nt.sum_(nt.mul(al, c)))

    assert directional_check(f, dict(m.store.arrays), rng, n_dirs=30) < 1e-4


def test_attention_model_is_permutation_equivariant(small_dataset):
    m = AttentionPredictor(seed=3)
    idx = np.arange(5)
    ap, af = small_dataset.agents_past[idx], small_dataset.agents_future[idx]
    ep, ef = small_dataset.ego_past[idx], small_dataset.ego_future[idx]
    perm = np.random.default_rng(0).permutation(ap.shape[1])
    e1, a1, al1 = m.forward(ap, ep, af, ef)
    e2, a2, al2 = m.forward(ap[:, perm], ep, af[:, perm], ef)
    np.testing.assert_allclose(e2, e1, rtol=1e-12)
    np.testing.assert_allclose(a2, a1[:, perm], rtol=1e-12)
    np.testing.assert_allclose(al2[..., 1:], al1[..., 1:][..., perm], atol=1e-15)


def test_removing_an_agent_leaves_others_unchanged(small_dataset):
    m = AttentionPredictor(seed=3)
    ap, af = small_dataset.agents_past[:3], small_dataset.agents_future[:3]
    ep, ef = small_dataset.ego_past[:3], small_dataset.ego_future[:3]
    _, a_all, _ = m.forward(ap, ep, af, ef)
    _, a_less, _ = m.forward(ap[:, 1:], ep, af[:, 1:], ef)
    np.testing.assert_allclose(a_less, a_all[:, 1:], rtol=1e-13)


def test_attention_needs_ego_history(rng):
    m = AttentionPredictor()
    with pytest.raises(ValueError):
        m.agent_log_probs(np.zeros((1, 1, 10, 2)), np.zeros((1, 1, 30, 2)))


# --- oracle ------------------------------------------------------------------


def test_oracle_default_k():
    assert build_model("oracle").k_test == 5


def test_deterministic_pedestrian_oracle_matches_truth():
    cfg = WorldConfig(n_pedestrians=1)
    params = PedestrianParams(sigma=0.0, stop_probability=0.0, crossing_base_rate=0.0, use_archetypes=False)
    peds = PedestrianArrays(
        pos=np.array([[30.0, 7.0]]),
        vel=np.array([[2.0, 0.0]]),
        mode=np.array([int(Mode.WALKING)]),
        goal=np.array([[300.0, 7.0]]),
        beta=np.zeros(1),
        side=np.ones(1),
        walk_speed=np.full(1, 2.0),
        epsilon=np.full(1, 0.1),
        sigma=np.zeros(1),
        stop_p=np.zeros(1),
    )
    world = World(cfg, params, seed=0, pedestrians=peds)
    pred = build_model("oracle").sample(world.observation(), 5, np.random.default_rng(0)).samples
    truth = []
    for _ in range(cfg.horizon_T):
        world.step(0.0)
        truth.append(world.peds.pos[0].copy())
    for k in range(5):
        np.testing.assert_array_equal(pred[k, 0], np.array(truth))


def test_oracle_needs_world_snapshot(small_dataset):
    with pytest.raises(ValueError):
        build_model("oracle").sample(small_dataset[0].observation(), 5, np.random.default_rng(0))
