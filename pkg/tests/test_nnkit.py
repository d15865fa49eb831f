import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax as scipy_softmax

from capo.nnkit import (
    AdamState,
    NonFiniteGradientError,
    ParamStore,
    Tensor,
    adam_update,
    backward,
    gmm_log_prob,
    gmm_nll,
    gmm_sample,
    gru_step,
    init_affine,
    init_gru,
    load_checkpoint,
    save_checkpoint,
)
from capo.nnkit import tensor as nt
from capo.nnkit.layers import affine

from gradcheck import directional_check

TOL = 1e-4


def test_square_grad():
    th = Tensor(3.0, requires_grad=True)
    backward(nt.mul(th, th))
    assert th.grad == pytest.approx(6.0)


def test_independent_param_gets_zero():
    store = ParamStore()
    store.add("a", {"w": np.ones(3)}, "ego")
    store.add("b", {"w": np.ones(2)}, "agent")
    ts = store.tensors()
    backward(nt.sum_(nt.mul(ts["a.w"], 2.0)))
    g = store.gradients(ts)
    np.testing.assert_array_equal(g["a.w"], 2.0)
    np.testing.assert_array_equal(g["b.w"], 0.0)


def test_nonfinite_gradient_names_op():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    with pytest.raises(NonFiniteGradientError, match="sqrt"):
        backward(nt.sum_(nt.sqrt(x)))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(nt.mul(x, 2.0))


def test_shared_subexpression_visited_once():
    # y is used twice; its gradient must be the sum of both paths
    x = Tensor(2.0, requires_grad=True)
    y = nt.mul(x, x)
    backward(nt.add(y, nt.mul(y, 3.0)))
    assert x.grad == pytest.approx(4 * 2 * 2.0)


def test_plain_arrays_pass_through():
    out = nt.softmax(np.array([1.0, 2.0]))
    assert type(out) is np.ndarray


UNARY = {
    "exp": (nt.exp, lambda r, s: r.normal(size=s)),
    "log": (nt.log, lambda r, s: r.uniform(0.5, 3, s)),
    "tanh": (nt.tanh, lambda r, s: r.normal(size=s)),
    "sigmoid": (nt.sigmoid, lambda r, s: r.normal(size=s) * 3),
    "softplus": (nt.softplus, lambda r, s: r.normal(size=s) * 3),
    "log_expm1": (nt.log_expm1, lambda r, s: r.uniform(0.05, 40, s)),
    "sqrt": (nt.sqrt, lambda r, s: r.uniform(0.5, 3, s)),
    "abs": (nt.abs_, lambda r, s: r.choice([-1, 1], s) * r.uniform(0.5, 2, s)),
    "neg": (nt.neg, lambda r, s: r.normal(size=s)),
    "power": (lambda a: nt.power(a, 2.5), lambda r, s: r.uniform(0.5, 2, s)),
    "clip": (lambda a: nt.clip(a, -1.0, 1.0), lambda r, s: r.normal(size=s) * 2),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    fn, draw = UNARY[name]
    x = draw(rng, (4, 3))
    # avoid probing the kinks of clip
    if name == "clip":
        x = np.where(np.abs(np.abs(x) - 1) < 0.05, 0.3, x)
    c = rng.normal(size=x.shape)
    err = directional_check(lambda p: nt.sum_(nt.mul(fn(p["x"]), c)), {"x": x}, rng)
    assert err < TOL


BINARY = {
    "add": nt.add,
    "sub": nt.sub,
    "mul": nt.mul,
    "div": nt.div,
    "maximum": nt.maximum,
    "minimum": nt.minimum,
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients_with_broadcast(name, rng):
    a = rng.normal(size=(4, 3))
    b = rng.uniform(0.5, 2.0, size=(1, 3))
    c = rng.normal(size=(4, 3))
    err = directional_check(lambda p: nt.sum_(nt.mul(BINARY[name](p["a"], p["b"]), c)), {"a": a, "b": b}, rng)
    assert err < TOL


def test_where_gradient(rng):
    mask = rng.random((3, 4)) > 0.5
    c = rng.normal(size=(3, 4))
    f = lambda p: nt.sum_(nt.mul(nt.where(mask, p["a"], p["b"]), c))
    assert directional_check(f, {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,))}, rng) < TOL


@pytest.mark.parametrize("shapes", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((4,), (4, 3)), ((3, 4), (4,)), ((4,), (4,))])
def test_matmul_gradient(shapes, rng):
    a, b = rng.normal(size=shapes[0]), rng.normal(size=shapes[1])
    c = rng.normal(size=np.shape(a @ b))
    f = lambda p: nt.sum_(nt.mul(nt.matmul(p["a"], p["b"]), c))
    assert directional_check(f, {"a": a, "b": b}, rng) < TOL


def test_shape_op_gradients(rng):
    x = rng.normal(size=(2, 3, 4))
    y = rng.normal(size=(2, 3, 4))

    def f(p):
        a = nt.reshape(p["x"], (6, 4))
        b = nt.swapaxes(p["y"], 0, 2)  # (4, 3, 2)
        s = nt.concat([a, nt.reshape(b, (6, 4))], axis=0)
        t = nt.stack([s, nt.mul(s, s)], axis=1)  # (12, 2, 4)
        u = nt.getitem(t, (slice(None), 1, slice(1, 3)))
        v = nt.broadcast_to(nt.expand_dims(nt.mean(p["x"], axis=(0, 1)), 0), (5, 4))
        return nt.add(nt.sum_(nt.tanh(u)), nt.sum_(nt.mul(v, v)))

    assert directional_check(f, {"x": x, "y": y}, rng) < TOL


def test_fancy_index_gradient_accumulates(rng):
    x = rng.normal(size=5)
    idx = np.array([0, 2, 2, 4])
    f = lambda p: nt.sum_(nt.exp(nt.getitem(p["x"], idx)))
    assert directional_check(f, {"x": x}, rng) < TOL


@pytest.mark.parametrize("op", ["logsumexp", "softmax", "log_softmax"])
def test_reduction_gradients(op, rng):
    x = rng.normal(size=(3, 5)) * 2
    c = rng.normal(size=(3, 5))
    fn = getattr(nt, op)
    if op == "logsumexp":
        f = lambda p: nt.sum_(nt.mul(fn(p["x"], axis=-1), c[:, 0]))
    else:
        f = lambda p: nt.sum_(nt.mul(fn(p["x"], axis=-1), c))
    assert directional_check(f, {"x": x}, rng) < TOL


def test_three_layer_network_gradient(rng):
    params = {}
    for i, (a, b) in enumerate([(5, 8), (8, 8), (8, 1)]):
        layer = init_affine(rng, a, b)
        params[f"W{i}"] = layer["W"]
        params[f"b{i}"] = rng.normal(size=b) * 0.1
    x = rng.normal(size=(10, 5))

    def f(p):
        h = nt.tanh(affine(x, p["W0"], p["b0"]))
        h = nt.softplus(affine(h, p["W1"], p["b1"]))
        return nt.mean(nt.mul(affine(h, p["W2"], p["b2"]), 1.0))

    assert directional_check(f, params, rng, n_dirs=100) < TOL


# --- GRU ---------------------------------------------------------------------


def test_gru_zero_params_zero_state():
    p = {"Wx": np.zeros((3, 12)), "Wh": np.zeros((4, 12)), "bx": np.zeros(12), "bh": np.zeros(12)}
    h = gru_step(np.zeros(4), np.ones(3), p)
    np.testing.assert_array_equal(h, 0.0)


def test_gru_dimension_mismatch(rng):
    p = init_gru(rng, 3, 4)
    with pytest.raises(ValueError):
        gru_step(np.zeros(4), np.ones(2), p)
    with pytest.raises(ValueError):
        gru_step(np.zeros(5), np.ones(3), p)


def test_gru_gradient_through_five_steps(rng):
    p = init_gru(rng, 2, 6, scale=1.5)
    p = {k: v + rng.normal(size=v.shape) * 0.1 for k, v in p.items()}
    xs = rng.normal(size=(5, 3, 2))
    h0 = rng.normal(size=(3, 6)) * 0.5
    c = rng.normal(size=(3, 6))

    def f(q):
        h = q["h0"]
        for t in range(5):
            h = gru_step(h, xs[t], q)
        return nt.sum_(nt.mul(h, c))

    assert directional_check(f, {**p, "h0": h0}, rng) < TOL


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 10.0))
def test_gru_output_bounded(seed, scale):
    r = np.random.default_rng(seed)
    p = {k: v * scale for k, v in init_gru(r, 3, 5, scale=2.0).items()}
    p["bx"] = r.normal(size=15) * scale
    h = r.normal(size=(4, 5)) * 3
    x = r.normal(size=(4, 3)) * scale
    out = gru_step(h, x, p)
    bound = np.maximum(np.abs(h).max(axis=-1, keepdims=True), 1.0)
    assert np.all(np.abs(out) <= bound + 1e-12)


# --- softmax -----------------------------------------------------------------


def test_softmax_equal_logits_uniform():
    np.testing.assert_allclose(nt.softmax(np.zeros(7)), 1 / 7, rtol=0, atol=1e-15)


def test_softmax_stable_for_large_logits():
    out = nt.softmax(np.array([0.0, 1000.0]))
    assert np.all(np.isfinite(out))
    assert out[1] == pytest.approx(1.0) and out[0] < 1e-300


def test_softmax_jacobian(rng):
    x = rng.normal(size=6)
    s = nt.softmax(x)
    exact = np.diag(s) - np.outer(s, s)
    eps = 1e-6
    for j in range(6):
        e = np.zeros(6)
        e[j] = eps
        fd = (nt.softmax(x + e) - nt.softmax(x - e)) / (2 * eps)
        assert np.max(np.abs(fd - exact[:, j]) / np.maximum(np.abs(exact[:, j]), 1e-8)) < 1e-5
    # and the autodiff backward agrees with the closed form
    for i in range(6):
        t = Tensor(x, requires_grad=True)
        backward(nt.getitem(nt.softmax(t), i))
        np.testing.assert_allclose(t.grad, exact[i], atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_simplex(logits):
    out = nt.softmax(np.array(logits))
    assert np.all(out >= 0)
    assert abs(out.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(out, scipy_softmax(logits), rtol=1e-12, atol=1e-300)


# --- Gaussian mixtures -------------------------------------------------------


def test_gmm_single_component_at_mean():
    val = gmm_nll(np.zeros(2), np.array([1.0]), np.zeros((1, 2)), np.ones((1, 2)))
    assert float(val) == pytest.approx(math.log(2 * math.pi), abs=1e-14)


def test_gmm_duplicate_components_collapse(rng):
    y = rng.normal(size=2)
    mu, sd = rng.normal(size=(1, 2)), rng.uniform(0.5, 2, (1, 2))
    one = gmm_nll(y, np.array([1.0]), mu, sd)
    two = gmm_nll(y, np.array([0.5, 0.5]), np.repeat(mu, 2, 0), np.repeat(sd, 2, 0))
    assert float(two) == pytest.approx(float(one), abs=1e-13)


def test_gmm_errors():
    with pytest.raises(ValueError, match="positive"):
        gmm_nll(np.zeros(2), np.array([1.0]), np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(ValueError, match="sum to 1"):
        gmm_nll(np.zeros(2), np.array([0.7, 0.7]), np.zeros((2, 2)), np.ones((2, 2)))


def test_gmm_density_integrates_to_one():
    w = np.array([0.3, 0.7])
    mu = np.array([[-1.0, 0.5], [1.5, -0.5]])
    sd = np.array([[0.6, 0.9], [0.8, 0.5]])
    g = np.linspace(-7, 7, 561)
    X, Y = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([X, Y], -1)
    dens = np.exp(-gmm_nll(pts, np.broadcast_to(w, X.shape + (2,)), mu, sd))
    h = g[1] - g[0]
    assert abs(dens.sum() * h * h - 1.0) < 0.01


def test_gmm_permutation_invariant(rng):
    y = rng.normal(size=(5, 2))
    w = rng.dirichlet(np.ones(3), size=5)
    mu = rng.normal(size=(5, 3, 2))
    sd = rng.uniform(0.3, 2, (5, 3, 2))
    perm = np.array([2, 0, 1])
    a = gmm_nll(y, w, mu, sd)
    b = gmm_nll(y, w[:, perm], mu[:, perm], sd[:, perm])
    np.testing.assert_allclose(a, b, rtol=1e-13)


def test_gmm_log_prob_gradient(rng):
    y = rng.normal(size=(4, 2))
    arrays = {"lw": rng.normal(size=(4, 2)), "mu": rng.normal(size=(4, 2, 2)), "ls": rng.normal(size=(4, 2, 2)) * 0.3}

    def f(p):
        lw = nt.log_softmax(p["lw"], axis=-1)
        return nt.sum_(gmm_log_prob(y, lw, p["mu"], nt.exp(p["ls"])))

    assert directional_check(f, arrays, rng) < TOL


def test_gmm_sample_gradient_common_random_numbers(rng):
    shape = (6,)
    u = rng.random(shape)
    z = rng.standard_normal(shape + (2,))
    arrays = {"lw": rng.normal(size=(6, 2)), "mu": rng.normal(size=(6, 2, 2)), "ls": rng.normal(size=(6, 2, 2)) * 0.3}
    c = rng.normal(size=(6, 2))

    def f(p):
        y = gmm_sample(p["lw"], p["mu"], nt.exp(p["ls"]), None, uniforms=u, normals=z)
        return nt.sum_(nt.mul(y, c))

    # the component choice is piecewise constant in the weights, so a small
    # step almost surely leaves it unchanged
    assert directional_check(f, arrays, rng, eps=1e-7) < 1e-3


def test_gmm_sample_moments():
    r = np.random.default_rng(5)
    lw = np.log(np.array([0.25, 0.75]))
    mu = np.array([[0.0, 0.0], [4.0, -2.0]])
    sd = np.array([[1.0, 1.0], [0.5, 0.5]])
    n = 200_000
    y = gmm_sample(np.broadcast_to(lw, (n, 2)), np.broadcast_to(mu, (n, 2, 2)), np.broadcast_to(sd, (n, 2, 2)), r)
    np.testing.assert_allclose(y.mean(0), [3.0, -1.5], atol=0.02)


# --- Adam --------------------------------------------------------------------


def test_adam_zero_grad_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    s = AdamState(lr=0.1)
    for _ in range(5):
        adam_update(p, {"w": np.zeros(2)}, s)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_moments_decay_under_zero_grad():
    p = {"w": np.array([1.0, -2.0])}
    s = AdamState(lr=0.1)
    adam_update(p, {"w": np.array([1.0, 3.0])}, s)
    m, v = s.m["w"].copy(), s.v["w"].copy()
    adam_update(p, {}, s)
    np.testing.assert_allclose(s.m["w"], 0.9 * m)
    np.testing.assert_allclose(s.v["w"], 0.999 * v)


def test_adam_constant_gradient_step_is_lr():
    # with constant g, bias-corrected m/sqrt(v) is exactly sign(g) for every step
    p = {"w": np.zeros(3)}
    g = np.array([5.0, -0.01, 300.0])
    s = AdamState(lr=0.01, eps=0.0)
    for t in range(1, 51):
        prev = p["w"].copy()
        adam_update(p, {"w": g}, s)
        np.testing.assert_allclose(p["w"] - prev, -0.01 * np.sign(g), rtol=1e-10)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


def test_adam_deterministic():
    def run():
        r = np.random.default_rng(3)
        p = {"w": r.normal(size=4)}
        s = AdamState(lr=0.05)
        for _ in range(20):
            t = Tensor(p["w"], requires_grad=True)
            backward(nt.sum_(nt.mul(nt.tanh(t), t)))
            adam_update(p, {"w": t.grad}, s)
        return p["w"]

    np.testing.assert_array_equal(run(), run())


# --- parameter store ---------------------------------------------------------


def test_param_store_groups_and_duplicates():
    s = ParamStore()
    s.add("enc", {"W": np.ones((2, 2))}, "agent")
    with pytest.raises(KeyError):
        s.add("enc", {"W": np.ones(1)}, "agent")
    with pytest.raises(ValueError):
        s.add("x", {"W": np.ones(1)}, "other")
    assert s.names("agent") == ["enc.W"] and s.names("ego") == []


def test_checkpoint_round_trip(tmp_path, rng):
    s = ParamStore()
    s.add("enc", {"W": rng.normal(size=(3, 4)), "b": rng.normal(size=4)}, "agent")
    s.add("ego", {"W": rng.normal(size=(2,))}, "ego")
    path = tmp_path / "ck.npz"
    save_checkpoint(path, s, {"seed": 7, "note": "x"})
    s2, header = load_checkpoint(path)
    assert header["seed"] == 7 and header["version"] == 1
    assert s2.groups == s.groups
    for n in s.arrays:
        np.testing.assert_array_equal(s2.arrays[n], s.arrays[n])
    assert s2.nested()["enc"]["W"].shape == (3, 4)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, __header__=np.array('{"format": "other"}'))
    with pytest.raises(ValueError):
        load_checkpoint(path)
