import math

import numpy as np
import pytest

from flowlab.flows import CNF, GAUSSIAN, UNF, FlowModel, FlowParams, init_cnf, init_unf
from flowlab.numcore import Rng
from flowlab.training import (
    Checkpoint,
    NumericAbort,
    TrainConfig,
    batch_loss_and_grad,
    cnf_loss,
    drift_norms,
    init_model,
    mean_loss,
    per_sample_loss,
    project_cnf,
    read_checkpoints_csv,
    sgd_step,
    train,
    unf_loss,
    write_checkpoints_csv,
)
from helpers import gradient_relative_error, random_instance, zero_unf


def test_unf_zero_net_loss_1d(unf_zero_1d):
    # f(x) = x + 1, derivative 1: loss = f(0.5) + 0 = 1.5
    bd = unf_loss(unf_zero_1d, [0.5])
    assert bd.total == pytest.approx(1.5)
    assert bd.per_dim[0] == pytest.approx((1.5, 0.0))


def test_unf_zero_net_loss_2d(unf_zero_2d):
    bd = unf_loss(unf_zero_2d, [0.0, 0.0])
    assert bd.total == pytest.approx(2.0)


def test_unf_gaussian_base_zero_net():
    # the loss drops the additive normalizing constant: f(0) = 1 gives 1/2
    m = zero_unf(1, base=GAUSSIAN)
    assert unf_loss(m, [0.0]).total == pytest.approx(0.5)


def test_cnf_loss_single_neuron():
    # N = tanh(x) at x = 0: value 0 and slope 1, so both terms vanish
    p = FlowParams(1, np.array([1.0]), np.array([[1.0]]), np.array([0.0]))
    model = FlowModel(CNF, 1, [p], tau=1.0, base=GAUSSIAN)
    assert cnf_loss(model, [0.0]).total == pytest.approx(0.0, abs=1e-15)
    # slope eps at the floor: per-dim term -log eps
    p = FlowParams(1, np.array([1.0]), np.array([[1e-3]]), np.array([0.0]))
    model = FlowModel(CNF, 1, [p], tau=1.0, base=GAUSSIAN)
    assert cnf_loss(model, [0.0]).total == pytest.approx(-math.log(1e-3))


def test_unf_loss_outside_ball():
    with pytest.raises(ValueError, match="point outside unit ball"):
        unf_loss(zero_unf(2), [0.8, 0.8])


def test_loss_family_mismatch():
    with pytest.raises(ValueError):
        unf_loss(init_cnf(1, 3, 0.2, 1.0, Rng(0)), [0.0])


@pytest.mark.parametrize("family", [UNF, CNF])
def test_gradient_matches_finite_difference(family):
    rng = np.random.default_rng(123 if family == UNF else 321)
    for _ in range(8):
        model, X = random_instance(family, rng)
        assert gradient_relative_error(model, X, 4) <= 1e-5


def test_batch_gradient_is_mean_of_singles():
    model = init_unf(2, 8, 0.3, Rng(5))
    X = np.array([[0.1, -0.2], [0.3, 0.0], [-0.25, 0.1]])
    loss, g = batch_loss_and_grad(model, X, 16)
    singles = [batch_loss_and_grad(model, x[None], 16) for x in X]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]))
    for i in range(2):
        assert np.allclose(g[i], np.mean([s[1][i] for s in singles], axis=0))


def test_sum_reduction_scales_by_batch():
    model = init_unf(1, 8, 0.3, Rng(5))
    X = np.array([[0.1], [0.3]])
    lm, gm = batch_loss_and_grad(model, X, 16)
    ls, gs = batch_loss_and_grad(model, X, 16, reduction="sum")
    assert ls == pytest.approx(2 * lm)
    assert np.allclose(gs[0], 2 * gm[0])


def test_per_sample_loss_matches_breakdown():
    model = init_unf(2, 12, 0.3, Rng(9))
    X = np.array([[0.1, -0.2], [0.3, 0.0]])
    vals = per_sample_loss(model, X, 16)
    assert vals[0] == pytest.approx(unf_loss(model, X[0], 16).total)
    assert mean_loss(model, X, 16) == pytest.approx(vals.mean())


def test_sgd_step_moves_offsets():
    model = init_unf(1, 4, 0.3, Rng(1))
    g = [np.ones((4, 3))]
    sgd_step(model, g, 0.1)
    assert np.allclose(model.per_dim[0].dw, -0.1)
    assert np.allclose(model.per_dim[0].db, -0.1)
    with pytest.raises(ValueError):
        sgd_step(model, [np.ones((4, 2))], 0.1)


def test_projection_enforces_floor():
    model = init_cnf(2, 6, 0.3, 1.0, Rng(1), eps_floor=1e-3)
    for p in model.per_dim:
        p.dw[:, -1] = -10.0
    project_cnf(model)
    for p in model.per_dim:
        assert np.allclose(p.weight[:, -1], 1e-3)


def test_drift_norms_oracle():
    model = init_unf(1, 2, 0.3, Rng(1))
    p = model.per_dim[0]
    p.dw[...] = [[3.0, 0.0], [0.0, 0.0]]
    p.db[...] = [4.0, 1.0]
    (n22, n2inf, n21), = drift_norms(model)
    assert n22 == pytest.approx(math.sqrt(26))
    assert n2inf == 5.0
    assert n21 == 6.0


def test_zero_step_training_keeps_init():
    cfg = TrainConfig(family=UNF, eta=0.0, T=5, m=8, checkpoint_every=5)
    model = init_model(cfg, 1)
    X = np.linspace(-0.4, 0.4, 20)[:, None]
    trained, cps = train(model.copy(), X, cfg)
    assert all(np.all(th == 0) for th in trained.offsets())
    assert cps[-1].drift_2_2 == 0.0


def test_training_reduces_loss():
    X = np.random.default_rng(0).normal(0.1, 0.05, (500, 1)).clip(-0.5, 0.5)
    cfg = TrainConfig(family=UNF, eta=0.05, T=600, m=64, checkpoint_every=100)
    model = init_model(cfg, 1)
    before = mean_loss(model, X)
    trained, cps = train(model, X, cfg)
    assert mean_loss(trained, X) < before - 0.1
    assert [c.step for c in cps] == [100, 200, 300, 400, 500, 600]


def test_cnf_training_respects_floor():
    X = np.random.default_rng(0).normal(0, 0.2, (200, 2)).clip(-0.5, 0.5)
    cfg = TrainConfig(family=CNF, eta=0.5, T=200, m=16, checkpoint_every=200)
    trained, _ = train(init_model(cfg, 2), X, cfg)
    for p in trained.per_dim:
        assert np.all(p.weight[:, -1] >= cfg.eps_floor - 1e-15)


def test_numeric_abort_carries_state():
    X = np.random.default_rng(0).uniform(-0.5, 0.5, (50, 1))
    cfg = TrainConfig(family=UNF, eta=1e9, T=50, m=8, checkpoint_every=1)
    with pytest.raises(NumericAbort) as info:
        train(init_model(cfg, 1), X, cfg)
    assert info.value.model is not None
    assert info.value.step >= 1


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(family="MAF")
    with pytest.raises(ValueError):
        TrainConfig(eta=-1)
    cfg = TrainConfig(family=CNF, m=100)
    assert cfg.sigma_wb == pytest.approx(0.1) and cfg.tau == 0.01 and cfg.base == GAUSSIAN


def test_checkpoint_csv_roundtrip(tmp_path):
    cps = [Checkpoint(10, 0.5, [], [(1.0, 0.5, 2.0), (0.1, 0.1, 0.3)]),
           Checkpoint(20, 1 / 3, [], [(2.0, 1.5, 3.0), (0.2, 0.2, 0.6)])]
    path = tmp_path / "c.csv"
    write_checkpoints_csv(cps, path, 2)
    assert path.read_text().splitlines()[0] == (
        "step,loss,drift_2_2_dim1,drift_2_inf_dim1,drift_2_1_dim1,"
        "drift_2_2_dim2,drift_2_inf_dim2,drift_2_1_dim2")
    rows = read_checkpoints_csv(path)
    assert rows[1]["loss"] == 1 / 3 and rows[1]["drift"][1] == (0.2, 0.2, 0.6)
