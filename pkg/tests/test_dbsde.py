import numpy as np
import pytest

from conftest import fd_max_rel_error
from deepbsde_uq import dbsde, nn
from deepbsde_uq.dbsde import DbsdeConfig
from deepbsde_uq.errors import ConfigurationError, TrainingDivergedError
from deepbsde_uq.nn import LrSchedule
from deepbsde_uq.problems import (BlackScholesParams, BsdeProblem, BurgersParams,
                                  black_scholes_problem, burgers_problem)
from deepbsde_uq.sde import BrownianBatch, TimeGrid, sample_brownian


def linear_problem(d=1, c=None, x0=0.0):
    """a = 0, b = I, f = 0; g is the constant ``c`` or the first coordinate."""
    g = (lambda x: np.full(x.shape[0], c)) if c is not None else (lambda x: x[:, 0])
    return BsdeProblem(
        d=d, a=lambda t, x: np.zeros_like(x), b=lambda t, x: np.broadcast_to(np.eye(d), (x.shape[0], d, d)),
        f=lambda t, x, y, z: np.zeros_like(y), g=g, x0=np.full(d, x0),
        f_y=lambda t, x, y, z: np.zeros_like(y), f_z=lambda t, x, y, z: np.zeros_like(z),
    )


def zero_z(model):
    model.z0[...] = 0
    if model.subnets is not None:
        model.subnets.weights[-1][...] = 0
        model.subnets.biases[-1][...] = 0


def test_constant_terminal_value_gives_zero_loss():
    prob = linear_problem(d=2, c=3.5)
    cfg = DbsdeConfig(TimeGrid(1.0, 4), batch_size=8)
    model = dbsde.init_model(prob, cfg, 0)
    model.y0[...] = 3.5
    zero_z(model)
    loss, _ = dbsde.rollout_loss(model, prob, cfg, sample_brownian(cfg.grid, 8, 2, 1))
    assert loss == 0.0


def test_unit_offset_gives_unit_loss():
    prob = linear_problem(d=2, c=0.0)
    cfg = DbsdeConfig(TimeGrid(1.0, 4), batch_size=8)
    model = dbsde.init_model(prob, cfg, 0)
    model.y0[...] = 1.0
    zero_z(model)
    loss, _ = dbsde.rollout_loss(model, prob, cfg, sample_brownian(cfg.grid, 8, 2, 1))
    assert loss == 1.0


def test_single_step_hand_unrolled():
    p = BlackScholesParams()
    prob = black_scholes_problem(p)
    cfg = DbsdeConfig(TimeGrid(0.5, 1), batch_size=2)
    model = dbsde.init_model(prob, cfg, 0)
    assert model.subnets is None
    model.y0[...] = 9.0
    model.z0[...] = 12.0
    batch = BrownianBatch(np.array([[[0.1]], [[-0.3]]]))
    loss, _ = dbsde.rollout_loss(model, prob, cfg, batch)
    # X1 = 100 + 0.05*100*0.5 + 0.2*100*dW;  f = -(0.03*9 + (0.05-0.03)/0.2*12) = -1.47
    x1 = np.array([100 + 2.5 + 2.0, 100 + 2.5 - 6.0])
    y1 = np.array([9 + 1.47 * 0.5 + 1.2, 9 + 1.47 * 0.5 - 3.6])
    expected = np.mean((np.maximum(x1 - 100, 0) - y1) ** 2)
    assert loss == pytest.approx(expected, rel=1e-14)


def _fd_rollout(prob, cfg, seed=0, m=6, h=1e-6):
    model = dbsde.init_model(prob, cfg, seed)
    batch = sample_brownian(cfg.grid, m, prob.d, seed + 1)
    params = model.trainable()

    def loss():
        return dbsde.rollout_loss(model, prob, cfg, batch, "train")[0]

    _, cache = dbsde.rollout_loss(model, prob, cfg, batch, "train")
    grads = dbsde.rollout_grads(model, cfg, cache)
    assert [g.shape for g in grads] == [p.shape for p in params]
    return fd_max_rel_error(loss, params, grads, h=h)


@pytest.mark.parametrize("N", [1, 2, 4])
@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_rollout_gradient_black_scholes(N, act):
    prob = black_scholes_problem(BlackScholesParams(b=0.3, delta=0.01))
    cfg = DbsdeConfig(TimeGrid(0.5, N), batch_size=6, hidden_width=6, activation=act,
                      y0_init_range=(5, 15))
    # the loss is O(100) here, so a larger step keeps roundoff below the tolerance
    assert _fd_rollout(prob, cfg, h=1e-4) < 1e-3


@pytest.mark.parametrize("d", [1, 2, 3])
def test_rollout_gradient_burgers(d):
    prob = burgers_problem(BurgersParams(b=1.5, T=0.25, d=d))
    cfg = DbsdeConfig(TimeGrid(0.25, 4), batch_size=6, hidden_width=8, activation="tanh")
    assert _fd_rollout(prob, cfg, seed=d) < 1e-3


def test_init_respects_ranges_and_net_count():
    prob = burgers_problem(BurgersParams(b=2.0, d=3))
    cfg = DbsdeConfig(TimeGrid(0.25, 7), y0_init_range=(0.2, 0.3))
    for s in range(20):
        model = dbsde.init_model(prob, cfg, s)
        assert 0.2 <= model.y0[0] <= 0.3
        assert np.all(np.abs(model.z0) <= 1)
        assert model.subnets.weights[0].shape == (6, 3, 13)
        assert model.spec.batch_norm and model.spec.hidden_layers == 2


def test_adaptedness_of_z_networks(rng):
    prob = burgers_problem(BurgersParams(b=2.0, d=2))
    cfg = DbsdeConfig(TimeGrid(0.25, 5), batch_size=8)
    model = dbsde.init_model(prob, cfg, 3)
    batch = sample_brownian(cfg.grid, 8, 2, 4)
    _, c1 = dbsde.rollout_loss(model, prob, cfg, batch, "train")
    z1 = nn.forward(model.subnets, model.spec, c1.inputs, "train")
    for n in range(1, 5):
        dw = batch.increments.copy()
        dw[:, n:] += rng.normal(size=dw[:, n:].shape)
        _, c2 = dbsde.rollout_loss(model, prob, cfg, BrownianBatch(dw), "train")
        z2 = nn.forward(model.subnets, model.spec, c2.inputs, "train")
        assert np.array_equal(z1[n - 1], z2[n - 1])


def test_one_step_moves_y0_and_z0():
    prob = black_scholes_problem(BlackScholesParams())
    cfg = DbsdeConfig(TimeGrid(1.0, 3), steps=1, batch_size=16, y0_init_range=(0, 1))
    init = dbsde.init_model(prob, cfg, cfg.base_seed)
    res = dbsde.train(prob, cfg)
    assert res.y0 != init.y0[0]
    assert np.all(res.z0 != init.z0)


def test_training_reduces_loss_and_is_deterministic():
    prob = linear_problem(d=1, x0=0.7)
    cfg = DbsdeConfig(TimeGrid(1.0, 4), steps=300, batch_size=64, y0_init_range=(0, 2), base_seed=5)
    a, b = dbsde.train(prob, cfg), dbsde.train(prob, cfg)
    assert a.losses[-20:].mean() < a.losses[:5].mean()
    assert a.y0 == b.y0 and np.array_equal(a.z0, b.z0) and np.array_equal(a.losses, b.losses)
    assert not a.diverged and a.steps_run == 300 and np.isfinite(a.eval_loss)


def test_martingale_target_recovers_initial_state():
    # g(X_T) = X_T with X a Brownian motion: Y0 = x0 and Z = 1 solve the problem exactly
    x0, T, m = 0.7, 1.0, 64
    prob = linear_problem(d=1, x0=x0)
    lr = LrSchedule((600, 1200), (1e-2, 1e-3))
    cfg = DbsdeConfig(TimeGrid(T, 4), steps=1200, batch_size=m, lr=lr, y0_init_range=(0, 2), base_seed=1)
    res = dbsde.train(prob, cfg)
    assert abs(res.y0 - x0) < 3 * np.sqrt(T / m)
    assert abs(res.z0[0] - 1) < 0.2


def test_divergence_returns_last_finite_iterate():
    prob = linear_problem(d=1)
    bad = BsdeProblem(1, prob.a, prob.b, prob.f, lambda x: np.full(x.shape[0], np.inf), prob.x0,
                      prob.f_y, prob.f_z)
    cfg = DbsdeConfig(TimeGrid(1.0, 2), steps=5, batch_size=4)
    res = dbsde.train(bad, cfg)
    init = dbsde.init_model(bad, cfg, cfg.base_seed)
    assert res.diverged and res.steps_run == 0
    assert res.y0 == init.y0[0] and np.array_equal(res.z0, init.z0)
    with pytest.raises(TrainingDivergedError):
        dbsde.rollout_loss(init, bad, cfg, sample_brownian(cfg.grid, 4, 1, 0))


def test_checkpoints_recorded():
    prob = black_scholes_problem(BlackScholesParams())
    cfg = DbsdeConfig(TimeGrid(1.0, 2), steps=6, batch_size=8, checkpoints=(0, 3, 6), y0_init_range=(5, 10))
    res = dbsde.train(prob, cfg)
    assert sorted(res.checkpoints) == [0, 3, 6]
    assert res.checkpoints[6][0] == res.y0
    assert 5 <= res.checkpoints[0][0] <= 10


def test_ensemble_contract():
    prob = burgers_problem(BurgersParams(b=2.0, d=2))
    cfg = DbsdeConfig(TimeGrid(0.25, 3), steps=5, batch_size=8, base_seed=9)
    one = dbsde.ensemble_solve(prob, cfg, 1)
    assert len(one) == 1
    from dataclasses import replace
    solo = dbsde.train(prob, replace(cfg, base_seed=dbsde.run_seeds(9, 1)[0]))
    assert one[0].y0 == solo.y0
    e1 = dbsde.ensemble_solve(prob, cfg, 4)
    e2 = dbsde.ensemble_solve(prob, cfg, 4, workers=2)
    assert [r.seed for r in e1] == dbsde.run_seeds(9, 4)
    assert len({r.seed for r in e1}) == 4
    for a, b in zip(e1, e2):
        assert a.y0 == b.y0 and np.array_equal(a.z0, b.z0) and np.array_equal(a.losses, b.losses)
    with pytest.raises(ConfigurationError):
        dbsde.ensemble_solve(prob, cfg, 0)


def test_config_validation_and_roundtrip():
    with pytest.raises(ConfigurationError):
        DbsdeConfig(TimeGrid(1.0, 2), steps=0)
    with pytest.raises(ConfigurationError):
        DbsdeConfig(TimeGrid(1.0, 2), batch_size=1)
    cfg = DbsdeConfig(TimeGrid(0.5, 8), batch_size=32, steps=77, lr=LrSchedule((10, 77), (1e-2, 1e-3)),
                      hidden_width=9, y0_init_range=(1, 2), base_seed=4, checkpoints=(5,))
    assert DbsdeConfig.from_dict(cfg.to_dict()) == cfg
    assert DbsdeConfig.from_dict({"T": 1, "N": 4, "lr": 0.05}).lr == LrSchedule.constant(0.05)
    assert cfg.z_net(3).hidden_width == 9
    assert DbsdeConfig(TimeGrid(1.0, 2)).z_net(5).hidden_width == 15
