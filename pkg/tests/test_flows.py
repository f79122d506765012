import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowlab.flows import (
    CNF,
    FlowModel,
    FlowParams,
    NonPositiveJacobian,
    cnf_net_forward,
    cnf_partial_xi,
    cnf_square_forward,
    elu_plus_one,
    elu_plus_one_prime,
    embed_normalized,
    init_cnf,
    init_unf,
    load_model,
    save_model,
    unf_derivative,
    unf_net_forward,
)
from flowlab.numcore import Rng


def test_embed_examples():
    assert np.allclose(embed_normalized([0.6]), [0.6, 0.8])
    assert np.array_equal(embed_normalized([0.0, 0.0]), [0.0, 0.0, 1.0])


def test_embed_outside_ball():
    with pytest.raises(ValueError, match="point outside unit ball"):
        embed_normalized([0.8, 0.8])


def test_embed_clamp():
    assert np.array_equal(embed_normalized([0.8, 0.8], clamp=True), [0.8, 0.8, 0.0])


def test_embed_unit_norm_many():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(10**4, 3))
    v *= (rng.uniform(size=(10**4, 1)) ** (1 / 3)) / np.linalg.norm(v, axis=1, keepdims=True)
    assert np.max(np.abs(np.linalg.norm(embed_normalized(v), axis=1) - 1)) <= 1e-12


def test_elu_plus_one_values():
    assert elu_plus_one(0.0) == 1.0
    assert elu_plus_one(1.0) == 2.0
    assert elu_plus_one(-1.0) == pytest.approx(math.exp(-1))


def test_elu_prime_values():
    assert elu_plus_one_prime(0.0) == 1.0
    assert elu_plus_one_prime(2.0) == 1.0
    assert elu_plus_one_prime(-math.log(2)) == pytest.approx(0.5)


@given(st.floats(-30, 30), st.floats(-30, 30))
def test_elu_monotone_lipschitz(u1, u2):
    lo, hi = sorted((u1, u2))
    assert elu_plus_one(lo) <= elu_plus_one(hi)
    if hi - lo > 1e-9:
        assert elu_plus_one(lo) < elu_plus_one(hi)
    assert abs(elu_plus_one(u1) - elu_plus_one(u2)) <= abs(u1 - u2) + 1e-15
    d = elu_plus_one_prime(u1)
    assert 0 < d <= 1


def test_elu_convex_away_from_zero():
    u = np.concatenate([np.linspace(-5, -0.01, 200), np.linspace(0.01, 5, 200)])
    h = 1e-4
    second = (elu_plus_one(u + h) - 2 * elu_plus_one(u) + elu_plus_one(u - h)) / h**2
    assert np.all(second >= -1e-6)


def _unf_params(a, W, b):
    return FlowParams(1, np.asarray(a, float), np.asarray(W, float), np.asarray(b, float))


def test_unf_zero_outer():
    p = _unf_params([0.0, 0.0], [[1, 2], [3, 4]], [0.1, 0.2])
    assert unf_net_forward(p, [0.3]) == 0.0


def test_unf_single_dead_neuron():
    p = _unf_params([1.0], [[0.0, 0.0]], [-1.0])
    assert unf_net_forward(p, [0.4]) == 0.0


def test_unf_two_neurons_hand_sum():
    # x = 0 embeds to (0, 1); weights act on the embedding coordinate only
    p = _unf_params([1.0, 2.0], [[0.0, 0.5], [0.0, -0.3]], [0.0, 0.0])
    assert unf_net_forward(p, [0.0]) == pytest.approx(0.5)


def test_unf_derivative_values():
    p = _unf_params([1.0], [[0.0, 1.0]], [0.0])
    assert unf_derivative(p, [0.0]) == pytest.approx(2.0)
    p = _unf_params([-1.0], [[0.0, 1.0]], [0.0])
    assert unf_derivative(p, [0.0]) == pytest.approx(math.exp(-1))
    p = _unf_params([0.0], [[0.0, 1.0]], [0.0])
    assert unf_derivative(p, [0.0]) == 1.0


def test_unf_matches_numpy_reference():
    model = init_unf(2, 37, 0.3, Rng(4))
    p = model.per_dim[1]
    p.dw[...] = np.random.default_rng(0).normal(0, 0.1, p.dw.shape)
    X = np.random.default_rng(1).uniform(-0.5, 0.5, (50, 2))
    xbar = embed_normalized(X)
    ref = np.maximum(xbar @ p.weight.T + p.bias, 0) @ p.outer
    assert np.allclose(unf_net_forward(p, X), ref, rtol=1e-12, atol=1e-14)


def test_unf_shape_mismatch():
    p = _unf_params([1.0], [[0.0, 1.0]], [0.0])
    with pytest.raises(ValueError, match="shape mismatch"):
        unf_net_forward(p, [0.1, 0.2])


def _cnf_params(a, W, b):
    return FlowParams(1, np.asarray(a, float), np.asarray(W, float), np.asarray(b, float))


def test_cnf_zero_parameters():
    p = _cnf_params([1.0, 2.0], [[0.0], [0.0]], [0.0, 0.0])
    assert cnf_net_forward(1.0, p, [0.3]) == 0.0


def test_cnf_tanh_log3():
    # pre-activation ln 3 through the bias at x = 0; tanh(ln 3) = (9-1)/(9+1)
    p = _cnf_params([2.0], [[1.0]], [math.log(3)])
    assert cnf_net_forward(0.5, p, [0.0]) == pytest.approx(0.5 * 2 * 8 / 10, abs=1e-15)


def test_cnf_partial_floor_case():
    eps = 1e-3
    p = _cnf_params([1.0], [[eps]], [0.0])
    assert cnf_partial_xi(1.0, p, [0.0]) == pytest.approx(eps)


def test_cnf_partial_zero_outer_raises():
    p = _cnf_params([0.0], [[1.0]], [0.0])
    with pytest.raises(NonPositiveJacobian, match="nonpositive Jacobian"):
        cnf_partial_xi(1.0, p, [0.1])


def test_cnf_partial_matches_finite_difference():
    model = init_cnf(3, 16, 0.5, 1.0, Rng(7), tau=0.5)
    rng = np.random.default_rng(3)
    h = 1e-5
    for p in model.per_dim:
        for _ in range(20):
            x = rng.uniform(-0.5, 0.5, p.input_dim)
            xp, xm = x.copy(), x.copy()
            xp[-1] += h
            xm[-1] -= h
            fd = (cnf_net_forward(0.5, p, xp) - cnf_net_forward(0.5, p, xm)) / (2 * h)
            assert cnf_partial_xi(0.5, p, x) == pytest.approx(fd, abs=1e-6)


def test_cnf_monotone_in_last_coordinate():
    model = init_cnf(2, 32, 0.2, 1.0, Rng(8))
    p = model.per_dim[1]
    t = np.linspace(-0.8, 0.8, 400)
    for x1 in (-0.5, 0.0, 0.4):
        vals = cnf_net_forward(model.tau, p, np.column_stack([np.full_like(t, x1), t]))
        assert np.all(np.diff(vals) > 0)


def test_square_forward_examples():
    p = _cnf_params([0.0], [[1.0]], [0.3])
    assert cnf_square_forward(1.0, p, [0.2]) == 0.0
    p = _cnf_params([1.0], [[0.0]], [0.0])
    assert cnf_square_forward(1.0, p, [0.7]) == 0.0
    p = _cnf_params([2.0], [[1.0]], [math.log(3)])
    assert cnf_square_forward(0.25, p, [0.0]) == pytest.approx(0.25 * 4 * 0.8)


def test_init_unf_statistics():
    model = init_unf(1, 20000, 0.2, Rng(1))
    p = model.per_dim[0]
    assert p.outer.std() == pytest.approx(0.2, rel=0.03)
    assert p.w0.std() == pytest.approx(1 / math.sqrt(20000), rel=0.03)
    assert np.all(p.dw == 0) and np.all(p.db == 0)


def test_init_cnf_half_normal_and_floor():
    model = init_cnf(2, 5000, 0.2, 0.5, Rng(2), eps_floor=1e-3)
    for p in model.per_dim:
        assert np.all(p.outer >= 0)
        assert np.all(p.w0[:, -1] >= 1e-3)
        assert p.outer.mean() == pytest.approx(0.2 * math.sqrt(2 / math.pi), rel=0.05)
    assert model.tau == 1 / 5000


def test_model_json_roundtrip_lossless(tmp_path):
    model = init_cnf(2, 9, 0.2, 0.7, Rng(3))
    model.per_dim[1].dw[...] = np.random.default_rng(0).normal(size=model.per_dim[1].dw.shape) / 3
    path = tmp_path / "m.json"
    save_model(model, path)
    back = load_model(path)
    assert back.family == CNF and back.d == 2 and back.tau == model.tau
    for p, q in zip(model.per_dim, back.per_dim):
        for name in ("outer", "w0", "b0", "dw", "db"):
            assert np.array_equal(getattr(p, name), getattr(q, name))


def test_model_shape_validation():
    p = FlowParams(1, np.zeros(2), np.zeros((2, 1)), np.zeros(2))
    with pytest.raises(ValueError):
        FlowModel("UNF", 1, [p])
    with pytest.raises(ValueError):
        FlowParams(1, np.zeros(2), np.zeros((3, 1)), np.zeros(2))
