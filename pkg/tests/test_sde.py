import numpy as np
import pytest
from hypothesis import given, strategies as st

from deepbsde_uq.errors import ConfigurationError, SimulationDivergedError
from deepbsde_uq.problems import BsdeProblem, BurgersParams, burgers_problem
from deepbsde_uq.sde import (BrownianBatch, TimeGrid, derive_seed, euler_maruyama_forward,
                             sample_brownian, splitmix64)


def scalar_problem(a, b, d=1):
    return BsdeProblem(
        d=d, a=a, b=lambda t, x: b(t, x)[:, :, None] * np.eye(d), f=lambda t, x, y, z: 0 * y,
        g=lambda x: x[:, 0], x0=np.ones(d),
    )


def test_time_grid():
    g = TimeGrid(2.0, 8)
    assert g.dt == 0.25
    assert g.times[0] == 0 and g.times[-1] == 2.0
    np.testing.assert_allclose(np.diff(g.times), 0.25, rtol=0, atol=1e-15)
    with pytest.raises(ConfigurationError):
        TimeGrid(0.0, 4)
    with pytest.raises(ConfigurationError):
        TimeGrid(1.0, 0)


def test_brownian_moments():
    dw = sample_brownian(TimeGrid(1.0, 1), 10**6, 1, 11).increments.ravel()
    assert abs(dw.mean()) < 0.01
    assert abs(dw.var() - 1) < 0.01


def test_brownian_scaling_and_shape():
    g = TimeGrid(1.0, 50)
    b = sample_brownian(g, 4000, 3, 2)
    assert b.shape == (4000, 50, 3)
    assert abs(b.increments.var() / g.dt - 1) < 0.02


def test_brownian_seed_determinism():
    g = TimeGrid(1.0, 5)
    assert np.array_equal(sample_brownian(g, 7, 2, 9).increments, sample_brownian(g, 7, 2, 9).increments)
    assert not np.array_equal(sample_brownian(g, 7, 2, 9).increments, sample_brownian(g, 7, 2, 10).increments)


def test_brownian_components_uncorrelated():
    dw = sample_brownian(TimeGrid(1.0, 4), 50_000, 2, 3).increments.reshape(50_000, -1)
    c = np.corrcoef(dw, rowvar=False)
    off = c[~np.eye(c.shape[0], dtype=bool)]
    assert np.max(np.abs(off)) < 4 / np.sqrt(50_000) * 1.5


def test_splitmix_known_values():
    # reference outputs of the published splitmix64 generator seeded with 0
    state, outs = 0, []
    for _ in range(3):
        outs.append(splitmix64(state))
        state = (state + 0x9E3779B97F4A7C15) & ((1 << 64) - 1)
    assert outs == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


@given(st.integers(0, 2**63), st.integers(0, 10**6))
def test_derive_seed_is_deterministic_and_index_sensitive(base, i):
    assert derive_seed(base, i) == derive_seed(base, i)
    assert derive_seed(base, i) != derive_seed(base, i + 1)
    assert 0 <= derive_seed(base, i) < 2**64


def test_zero_coefficients_freeze_the_state():
    prob = scalar_problem(lambda t, x: 0 * x, lambda t, x: 0 * x, d=2)
    g = TimeGrid(1.0, 6)
    x = euler_maruyama_forward(prob, [3.0, -1.0], g, sample_brownian(g, 5, 2, 0))
    assert x.shape == (5, 7, 2)
    assert np.all(x == np.array([3.0, -1.0]))


def test_single_step_arithmetic():
    prob = scalar_problem(lambda t, x: 0.05 * x, lambda t, x: 0.2 * x)
    batch = BrownianBatch(np.array([[[0.1]]]))
    x = euler_maruyama_forward(prob, [100.0], TimeGrid(0.5, 1), batch)
    assert x[0, 1, 0] == pytest.approx(104.5, abs=1e-12)


def test_gbm_mean_matches_exponential_growth():
    a, T, m = 0.05, 1.0, 10**5
    prob = scalar_problem(lambda t, x: a * x, lambda t, x: 0.2 * x)
    g = TimeGrid(T, 20)
    xT = euler_maruyama_forward(prob, [100.0], g, sample_brownian(g, m, 1, 4))[:, -1, 0]
    # the Euler mean is x0 (1 + a dt)^N; the continuous mean differs by ~1e-3 relative
    se = xT.std() / np.sqrt(m)
    assert abs(xT.mean() - 100 * np.exp(a * T)) < 3 * se + 100 * abs((1 + a * g.dt) ** g.N - np.exp(a * T))
    assert abs(xT.mean() - 100 * (1 + a * g.dt) ** g.N) < 3 * se


def test_paths_are_deterministic():
    prob = burgers_problem(BurgersParams(b=2.0, d=3))
    g = TimeGrid(0.25, 8)
    x1 = euler_maruyama_forward(prob, prob.x0, g, sample_brownian(g, 16, 3, 5))
    x2 = euler_maruyama_forward(prob, prob.x0, g, sample_brownian(g, 16, 3, 5))
    assert np.array_equal(x1, x2)


def test_burgers_increments_are_scaled_brownian():
    p = BurgersParams(b=2.5, d=4)
    prob = burgers_problem(p)
    g = TimeGrid(0.25, 10)
    batch = sample_brownian(g, 32, 4, 6)
    x = euler_maruyama_forward(prob, prob.x0, g, batch)
    # from x0 = 0 the first step is bit-exact; later steps round once when the sum is formed
    assert np.array_equal(x[:, 1] - x[:, 0], p.b * batch.increments[:, 0])
    np.testing.assert_allclose(np.diff(x, axis=1), p.b * batch.increments, rtol=0, atol=1e-13)


def test_shape_mismatch_rejected():
    prob = burgers_problem(BurgersParams(b=2.0, d=3))
    g = TimeGrid(0.25, 8)
    with pytest.raises(ConfigurationError):
        euler_maruyama_forward(prob, prob.x0, g, sample_brownian(TimeGrid(0.25, 4), 2, 3, 0))
    with pytest.raises(ConfigurationError):
        euler_maruyama_forward(prob, prob.x0, g, sample_brownian(g, 2, 2, 0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_first_failure():
    prob = scalar_problem(lambda t, x: 1e300 * x, lambda t, x: 0 * x)
    g = TimeGrid(1.0, 4)
    x0 = np.array([1.0])
    batch = BrownianBatch(np.zeros((3, 4, 1)))
    with pytest.raises(SimulationDivergedError) as info:
        euler_maruyama_forward(prob, x0, g, batch)
    assert (info.value.sample, info.value.step) == (0, 2)
