import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posg.errors import DivergenceError, MalformedInputError
from posg.nn import AdamState, DenseNet, adam_step, clip_grad_norm
from posg.policy import CategoricalPolicy, GaussianPolicy, ValueFunction


def random_net(rng, n_layers=None):
    n_layers = n_layers or int(rng.integers(1, 4))
    sizes = [int(rng.integers(1, 6)) for _ in range(n_layers + 1)]
    hidden = str(rng.choice(["tanh", "identity"]))
    return DenseNet.create(sizes, rng, hidden=hidden, output=str(rng.choice(["tanh", "identity"])))


def fd_check(net, x, grad_out, h=1e-6):
    """Max relative error of analytic vs central-difference gradients."""
    (analytic,) = net.backward(net.forward(x)[1], grad_out)
    flat = net.flat
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = np.sum(net(x) * grad_out)
        flat[i] = old - h
        down = np.sum(net(x) * grad_out)
        flat[i] = old
        numeric[i] = (up - down) / (2 * h)
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / scale))


def test_forward_shapes_and_single_input():
    rng = np.random.default_rng(0)
    net = DenseNet.create([3, 4, 2], rng)
    out, cache = net.forward(np.zeros(3))
    assert out.shape == (2,) and len(cache) == 3
    assert net(np.zeros((5, 3))).shape == (5, 2)
    with pytest.raises(MalformedInputError):
        net(np.zeros((5, 4)))


def test_layers_are_views_of_the_flat_vector():
    net = DenseNet.create([2, 3, 1], np.random.default_rng(0))
    net.flat[:] = 0.0
    assert all(np.all(w == 0) for w in net.weights)
    assert len(net.layer_params()) == 4


def test_constructor_validates_chaining():
    with pytest.raises(MalformedInputError):
        DenseNet([np.zeros((2, 3)), np.zeros((4, 1))], [np.zeros(3), np.zeros(1)], ["tanh", "identity"])
    with pytest.raises(MalformedInputError):
        DenseNet([np.zeros((2, 3))], [np.zeros(3)], ["relu"])


def test_gradient_matches_finite_differences_on_random_nets():
    rng = np.random.default_rng(12345)
    worst = 0.0
    for _ in range(100):
        net = random_net(rng)
        x = rng.normal(size=(3, net.input_dim))
        g = rng.normal(size=(3, net.output_dim))
        worst = max(worst, fd_check(net, x, g))
    assert worst <= 1e-4


def test_backward_rejects_wrong_gradient_shape():
    net = DenseNet.create([2, 2], np.random.default_rng(0))
    with pytest.raises(MalformedInputError):
        net.backward(net.forward(np.zeros((3, 2)))[1], np.zeros((3, 5)))


def test_save_load_round_trip(tmp_path):
    net = DenseNet.create([4, 8, 8, 3], np.random.default_rng(1))
    net.save(tmp_path / "n.posgnn")
    back = DenseNet.load(tmp_path / "n.posgnn")
    assert back == net
    assert back.activations == net.activations
    x = np.random.default_rng(2).normal(size=(5, 4))
    assert np.array_equal(back(x), net(x))


def test_load_rejects_garbage():
    net = DenseNet.create([2, 2], np.random.default_rng(0))
    with pytest.raises(MalformedInputError):
        DenseNet.from_bytes(b"not a net")
    with pytest.raises(MalformedInputError):
        DenseNet.from_bytes(net.to_bytes() + b"\x00")


# ------------------------------------------------------------------------ adam

def test_adam_first_step_moves_by_learning_rate():
    p = [np.array([1.0, -2.0, 3.0])]
    g = [np.array([0.5, -4.0, 1e-3])]
    state = AdamState.like(p, learning_rate=0.01)
    adam_step(p, g, state)
    # bias correction makes the first step lr * sign(g) up to eps
    assert p[0] == pytest.approx([1.0 - 0.01, -2.0 + 0.01, 3.0 - 0.01], abs=1e-7)
    assert state.step == 1


def test_adam_rejects_nan_and_shape_mismatch():
    p = [np.zeros(2)]
    state = AdamState.like(p)
    with pytest.raises(DivergenceError):
        adam_step(p, [np.array([np.nan, 0.0])], state)
    with pytest.raises(MalformedInputError):
        adam_step(p, [np.zeros(3)], state)


def test_adam_minimizes_a_quadratic():
    p = [np.array([5.0, -3.0])]
    state = AdamState.like(p, learning_rate=0.1)
    for _ in range(500):
        adam_step(p, [2 * p[0]], state)
    assert np.all(np.abs(p[0]) < 1e-2)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=10), st.floats(0.01, 10))
def test_clip_grad_norm_caps_norm(values, max_norm):
    g = [np.array(values)]
    before = float(np.linalg.norm(values))
    reported = clip_grad_norm(g, max_norm)
    assert reported == pytest.approx(before)
    assert np.linalg.norm(g[0]) <= max_norm + 1e-9


# ---------------------------------------------------------------------- heads

def _fd_policy(policy, obs, actions, d_logp, d_ent, h=1e-5):
    logp, ent, ctx = policy.evaluate(obs, actions)
    analytic = np.concatenate([g.ravel() for g in policy.backward(ctx, d_logp, d_ent)])
    numeric = []
    for p in policy.params:
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp, en, _ = policy.evaluate(obs, actions)
            up = np.sum(d_logp * lp + d_ent * en)
            flat[i] = old - h
            lp, en, _ = policy.evaluate(obs, actions)
            down = np.sum(d_logp * lp + d_ent * en)
            flat[i] = old
            numeric.append((up - down) / (2 * h))
    numeric = np.array(numeric)
    return np.max(np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6))


def test_categorical_policy_gradients():
    rng = np.random.default_rng(0)
    pol = CategoricalPolicy.create(3, 4, np.zeros(3), np.ones(3) * 5, rng, hidden=(6,))
    pol.net.flat[:] *= 5  # move away from the near-uniform init
    obs = rng.uniform(0, 5, size=(7, 3))
    actions = rng.integers(0, 4, size=7)
    assert _fd_policy(pol, obs, actions, rng.normal(size=7), rng.normal(size=7)) <= 1e-4


def test_gaussian_policy_gradients():
    rng = np.random.default_rng(1)
    pol = GaussianPolicy.create(2, 2, -np.ones(2), np.ones(2), rng, hidden=(5,))
    pol.log_std[:] = [-0.3, 0.2]
    obs = rng.uniform(-1, 1, size=(6, 2))
    actions = rng.normal(size=(6, 2))
    assert _fd_policy(pol, obs, actions, rng.normal(size=6), rng.normal(size=6)) <= 1e-4


def test_categorical_sampling_matches_probabilities():
    rng = np.random.default_rng(0)
    pol = CategoricalPolicy.create(1, 3, [0], [1], rng, hidden=(4,))
    obs = np.zeros((20000, 1))
    actions, logp = pol.act(obs, np.random.default_rng(1))
    probs = np.exp(pol.evaluate(obs[:3], np.array([0, 1, 2]))[0])
    freq = np.bincount(actions, minlength=3) / len(actions)
    assert freq == pytest.approx(probs, abs=0.02)
    greedy, _ = pol.act(obs[:2], None, greedy=True)
    assert np.all(greedy == np.argmax(probs))


def test_value_function_regression_reduces_loss():
    rng = np.random.default_rng(0)
    vf = ValueFunction.create(2, [-1, -1], [1, 1], rng, hidden=(16,))
    x = rng.uniform(-1, 1, size=(64, 2))
    y = x[:, 0] - 2 * x[:, 1]
    opt = AdamState.like(vf.params, learning_rate=0.01)
    first, _ = vf.loss_and_grads(x, y)
    for _ in range(300):
        _, g = vf.loss_and_grads(x, y)
        adam_step(vf.params, g, opt)
    assert vf.loss_and_grads(x, y)[0] < 0.05 * first


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_gradient_property_random_nets(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    assert fd_check(net, rng.normal(size=(2, net.input_dim)), rng.normal(size=(2, net.output_dim))) <= 1e-4
