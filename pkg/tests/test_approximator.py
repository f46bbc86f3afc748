import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aclql.approximator import (
    MLP,
    ApproximatorSpec,
    NonFiniteGradientError,
    ParameterBlock,
    actor_backward,
    actor_log_prob,
    actor_mean_action,
    actor_sample,
    adam_step,
    array_blocks,
    behavior_log_prob,
    finite_diff_check,
    gradient_check,
    load_checkpoint,
    polyak_update,
    restore,
    save_checkpoint,
)


def net(in_dim, out_dim, hidden=(5, 4), head="linear", seed=0, **kw):
    return MLP.init(ApproximatorSpec(in_dim, out_dim, hidden, head, **kw), np.random.default_rng(seed))


def test_parameter_block_moments_follow_shape():
    b = ParameterBlock("W", np.ones((2, 3)))
    assert b.m.shape == b.v.shape == (2, 3) and b.step == 0
    with pytest.raises(ValueError):
        ParameterBlock("W", np.ones(2), m=np.zeros(3))


def test_spec_validation():
    with pytest.raises(ValueError):
        ApproximatorSpec(2, 3, head="two-headed-weights")
    with pytest.raises(ValueError):
        ApproximatorSpec(2, 3, head="gaussian-fixed-sigma")
    with pytest.raises(ValueError):
        ApproximatorSpec(2, 3, head="softmax")
    assert ApproximatorSpec(4, 2, (8,), "tanh-gaussian").layer_sizes == [4, 8, 4]


def test_forward_zero_and_identity():
    n = net(3, 2)
    for b in n.blocks.values():
        b.values[...] = 0.0
    assert np.all(n.forward(np.ones((4, 3))) == 0.0)
    ident = MLP(ApproximatorSpec(3, 3, ()), {"W0": ParameterBlock("W0", np.eye(3)), "b0": ParameterBlock("b0", np.zeros(3))})
    x = np.random.default_rng(1).normal(size=(5, 3))
    assert np.array_equal(ident(x), x)
    with pytest.raises(ValueError):
        ident.forward(np.ones((2, 4)))


def test_forward_matches_unrolled_arithmetic():
    n = net(3, 2, hidden=(6,), seed=3)
    x = np.random.default_rng(2).normal(size=(7, 3))
    W0, b0, W1, b1 = (n.blocks[k].values for k in ("W0", "b0", "W1", "b1"))
    expected = np.empty((7, 2))
    for i in range(7):
        h = [max(0.0, sum(x[i, k] * W0[k, j] for k in range(3)) + b0[j]) for j in range(6)]
        expected[i] = [sum(h[j] * W1[j, o] for j in range(6)) + b1[o] for o in range(2)]
    assert np.max(np.abs(n(x) - expected)) <= 1e-10
    # rows are independent (BLAS may round a single row differently from a batch)
    assert np.allclose(n(x[2:3]), n(x)[2:3], rtol=0, atol=1e-12)


def test_mlp_backward_fd():
    n = net(3, 2, seed=4)
    x = np.random.default_rng(0).normal(size=(6, 3))
    c = np.random.default_rng(1).normal(size=(6, 2))

    def loss():
        return float(np.sum(n(x) * c))

    out, acts = n.forward_cache(x)
    grads, g_in = n.backward(acts, c, need_input=True)
    assert finite_diff_check(loss, n.blocks, grads) <= 1e-6
    xb = array_blocks(x=x)
    assert finite_diff_check(lambda: float(np.sum(n(xb["x"].values) * c)), xb, {"x": g_in}) <= 1e-6


# --- actor -------------------------------------------------------------------------

def test_actor_zero_noise_zero_mean_is_zero_action():
    a = net(3, 2, head="tanh-gaussian")
    a.blocks["W2"].values[...] = 0.0
    a.blocks["b2"].values[...] = 0.0
    s = actor_sample(a, np.ones((4, 3)), np.zeros((4, 2)))
    assert np.all(s.actions == 0.0)


def test_actor_log_prob_integrates_to_one_in_1d():
    a = net(1, 1, head="tanh-gaussian", seed=2)
    state = np.array([[0.3]])
    grid = np.linspace(-1, 1, 400_001)[1:-1]
    lp = actor_log_prob(a, np.repeat(state, len(grid), axis=0), grid[:, None])
    assert abs(np.trapezoid(np.exp(lp), grid) - 1.0) <= 1e-3


def test_actor_log_prob_agrees_with_sample():
    a = net(3, 2, head="tanh-gaussian", seed=6)
    s = np.random.default_rng(0).normal(size=(5, 3))
    smp = actor_sample(a, s, np.random.default_rng(1).normal(size=(5, 2)))
    assert np.allclose(actor_log_prob(a, s, smp.actions), smp.log_prob, atol=1e-8)
    assert np.allclose(actor_mean_action(a, s), np.tanh(smp.mean))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(-50, 50))
def test_actor_actions_stay_inside_open_box(seed, scale):
    a = net(2, 2, head="tanh-gaussian", seed=seed)
    noise = np.random.default_rng(seed).normal(size=(8, 3, 2))
    smp = actor_sample(a, np.full((8, 2), scale), noise)
    assert np.all(np.abs(smp.actions) <= 1.0)
    assert np.all(np.isfinite(smp.log_prob))


@pytest.mark.parametrize("seed", range(3))
def test_actor_backward_fd(seed):
    a = net(3, 2, head="tanh-gaussian", seed=seed)
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(6, 3))
    noise = rng.normal(size=(6, 2, 2))
    ca, cl = rng.normal(size=(6, 2, 2)), rng.normal(size=(6, 2))

    def loss():
        smp = actor_sample(a, s, noise)
        return float(np.sum(ca * smp.actions) + np.sum(cl * smp.log_prob))

    grads = actor_backward(a, actor_sample(a, s, noise), ca, cl)
    assert gradient_check(loss, a.blocks, grads, rng=rng).max_rel_error <= 1e-4


# --- behavior ----------------------------------------------------------------------

def test_behavior_log_prob_identities():
    b = net(2, 1, head="gaussian-fixed-sigma", sigma=0.3)
    s = np.random.default_rng(0).normal(size=(4, 2))
    mean = b(s)
    assert np.allclose(behavior_log_prob(b, s, mean), -0.5 * math.log(2 * math.pi * 0.09), atol=1e-12)
    drop = behavior_log_prob(b, s, mean) - behavior_log_prob(b, s, mean + 0.3)
    assert np.allclose(drop, 0.5, atol=1e-12)
    b3 = net(2, 3, head="gaussian-fixed-sigma", sigma=0.7, seed=1)
    a = np.random.default_rng(1).uniform(-1, 1, size=(4, 3))
    m3 = b3(s)
    direct = np.log(np.prod(np.exp(-((a - m3) ** 2) / (2 * 0.49)) / math.sqrt(2 * math.pi * 0.49), axis=1))
    assert np.max(np.abs(behavior_log_prob(b3, s, a) - direct)) <= 1e-12


# --- optimisation ------------------------------------------------------------------

def test_adam_zero_gradient_keeps_values():
    blk = ParameterBlock("x", np.array([1.0, -2.0]))
    adam_step({"x": blk}, {"x": np.zeros(2)}, lr=0.1)
    assert np.array_equal(blk.values, [1.0, -2.0])
    assert np.all(blk.m == 0) and np.all(blk.v == 0) and blk.step == 1


def test_adam_first_step_by_hand():
    blk = ParameterBlock("x", np.array([0.5]))
    adam_step({"x": blk}, {"x": np.array([2.0])}, lr=0.1)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    assert blk.values[0] == pytest.approx(0.5 - 0.1 * 2.0 / (2.0 + 1e-8), abs=1e-15)


def test_adam_quadratic_descent():
    blk = ParameterBlock("x", np.array([1.0]))
    for _ in range(100):
        adam_step({"x": blk}, {"x": 2.0 * blk.values}, lr=0.1)
    assert abs(blk.values[0]) < 0.05


def test_adam_rejects_non_finite_naming_block():
    blk = ParameterBlock("W3", np.zeros(2))
    with pytest.raises(NonFiniteGradientError, match="W3"):
        adam_step({"W3": blk}, {"W3": np.array([np.nan, 0.0])}, lr=0.1)
    assert blk.step == 0


def test_polyak_examples():
    t, o = array_blocks(w=np.zeros(3)), array_blocks(w=np.ones(3))
    polyak_update(t, o, 0.0)
    assert np.all(t["w"].values == 0)
    polyak_update(t, o, 1.0)
    assert np.all(t["w"].values == 1)
    t = array_blocks(w=np.zeros(1))
    for _ in range(200):
        polyak_update(t, o | {"w": ParameterBlock("w", np.ones(1))}, 5e-3)
    assert abs(t["w"].values[0] - (1 - (1 - 5e-3) ** 200)) <= 1e-6
    assert abs(1 - (1 - 5e-3) ** 200 - 0.6330) <= 1e-4
    with pytest.raises(ValueError):
        polyak_update(array_blocks(w=np.zeros(2)), array_blocks(w=np.zeros(3)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4), st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
       st.floats(0, 1))
def test_polyak_stays_in_convex_hull(a, b, rate):
    t, o = array_blocks(w=np.array(a)), array_blocks(w=np.array(b))
    polyak_update(t, o, rate)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    assert np.all(t["w"].values >= lo) and np.all(t["w"].values <= hi)


# --- finite differences ------------------------------------------------------------

def test_fd_linear_and_quadratic():
    rng = np.random.default_rng(0)
    c = rng.uniform(0.5, 2.0, size=100)
    # at w = 0 the unperturbed terms vanish, so the two sums carry no rounding from them
    blocks = array_blocks(w=np.zeros(100))
    assert finite_diff_check(lambda: float(c @ blocks["w"].values), blocks, {"w": c}) <= 1e-9
    blocks = array_blocks(w=rng.normal(size=100))
    assert finite_diff_check(lambda: float(np.sum(blocks["w"].values ** 2)), blocks,
                             {"w": 2 * blocks["w"].values}) <= 1e-7
    gc = gradient_check(lambda: float(c @ blocks["w"].values), blocks, {"w": c})
    assert gc.checked == 64


def test_fd_detects_wrong_gradient():
    blocks = array_blocks(w=np.linspace(1, 2, 10))
    assert finite_diff_check(lambda: float(np.sum(blocks["w"].values ** 2)), blocks,
                             {"w": 3 * blocks["w"].values}) > 0.1


# --- checkpoints -------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    n = net(3, 2, seed=9)
    p = tmp_path / "c.json"
    save_checkpoint(p, {"critic": n}, "abc", 17)
    ck = load_checkpoint(p)
    assert ck["config_hash"] == "abc" and ck["step"] == 17
    back = restore(n, ck["arrays"], "critic")
    for k, b in n.blocks.items():
        assert np.array_equal(b.values, back.blocks[k].values)
    x = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(n(x), back(x))
