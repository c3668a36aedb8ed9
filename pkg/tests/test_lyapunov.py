import math

import numpy as np
import pytest

from lyapforce import lyapunov as ly
from lyapforce import models as m
from lyapforce import systems as sy
from lyapforce.errors import ConfigError, DataError, DivergenceError, NoPositiveExponentError, UsageError


def rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotation_map(thetas=(2 * math.pi * (math.sqrt(2) - 1), 2 * math.pi * (math.sqrt(3) - 1)), centre=3.0):
    """PLRNN z' = R relu(z) + (I - R) c; in the positive orthant a rotation about c."""
    d = 2 * len(thetas)
    R = np.zeros((d, d))
    for i, th in enumerate(thetas):
        R[2 * i:2 * i + 2, 2 * i:2 * i + 2] = rotation(th)
    c = np.full(d, centre)
    model = m.PlrnnParams(np.zeros(d), R, np.zeros((d, 1)), (np.eye(d) - R) @ c)
    return model, c + 1.0


def tent_map():
    """Symmetric tent map with slope 1.9, written as a one-unit PLRNN."""
    return m.PlrnnParams(np.array([1.9]), np.array([[-3.8]]), np.zeros((1, 1)), np.array([0.9]))


def stable_two_cycle():
    # slopes -1.5 (z > 0) and 0.4 (z < 0): the cycle {0.875 h, -0.3125 h} has multiplier -0.6
    return m.PlrnnParams(np.array([0.4]), np.array([[-1.9]]), np.zeros((1, 1)), np.array([1.0]))


# ---------------------------------------------------------------------------
# predictability time


@pytest.mark.parametrize("lam,dt,expected,places", [(1.5, 0.01, 46.2, 1), (0.09, 0.1, 77.0, 1),
                                                    (0.017, 1.0, 40.77, 2), (math.log(2), 1.0, 1.0, 12)])
def test_predictability_time(lam, dt, expected, places):
    assert round(ly.predictability_time(lam, dt), places) == expected


def test_predictability_time_needs_positive_exponent():
    for lam in (0.0, -0.3):
        with pytest.raises(NoPositiveExponentError):
            ly.predictability_time(lam, 0.01)
    with pytest.raises(ConfigError):
        ly.predictability_time(1.0, 0.0)


# ---------------------------------------------------------------------------
# from data


@pytest.fixture(scope="module")
def short_lorenz():
    return sy.simulate(sy.SystemSpec("lorenz", n_steps=5000))


def test_affine_invariance(short_lorenz):
    a = ly.estimate_lambda_max(short_lorenz)
    moved = sy.Trajectory(3.7 * short_lorenz.data - 12.0, short_lorenz.dt, "moved")
    b = ly.estimate_lambda_max(moved)
    assert abs(a.lambda_max - b.lambda_max) < 1e-6
    assert a.fit_range == b.fit_range


def test_estimate_fields_consistent(short_lorenz):
    est = ly.estimate_lambda_max(short_lorenz)
    lo, hi = est.fit_range
    assert 0 <= lo < hi < len(est.divergence_curve)
    assert 0.0 <= est.r2 <= 1.0
    assert est.low_confidence == (est.r2 < 0.95)
    assert est.lambda_max > 0
    doc = est.to_dict()
    assert doc["lambda_max"] == est.lambda_max and len(doc["divergence_curve"]) == len(est.divergence_curve)


def test_two_cycle_has_no_positive_exponent():
    X = np.tile([[1.0], [-1.0]], (1000, 1))
    est = ly.estimate_lambda_max(sy.Trajectory(X, 0.1, "cycle"))
    assert est.lambda_max <= 0.01 / 0.1


def test_periodic_sine_has_no_positive_exponent():
    t = np.arange(3000) * 0.05
    X = np.column_stack([np.sin(t), np.cos(t)])
    est = ly.estimate_lambda_max(sy.Trajectory(X, 0.05, "circle"), max_horizon=200)
    assert est.lambda_max <= 0.01 / 0.05


def test_estimate_rejects():
    X = sy.Trajectory(np.random.default_rng(0).standard_normal((999, 2)), 1.0, "short")
    with pytest.raises(DataError):
        ly.estimate_lambda_max(X)
    X = sy.Trajectory(np.random.default_rng(0).standard_normal((1200, 2)), 1.0, "noise")
    with pytest.raises(ConfigError):
        ly.estimate_lambda_max(X, theiler=0)
    with pytest.raises(ConfigError):
        ly.estimate_lambda_max(X, k_neighbors=0)


def test_best_linear_region_finds_ramp():
    y = np.concatenate([np.linspace(0, 10, 40), np.full(60, 10.0)])
    a, b, slope, _, r2 = ly.best_linear_region(y)
    # every sub-window of the ramp fits exactly; any of them is acceptable
    assert 0 <= a and b <= 40 and b - a + 1 >= 30
    assert math.isclose(slope, 10 / 39, rel_tol=1e-9) and r2 > 0.999


# ---------------------------------------------------------------------------
# model spectrum


def test_spectrum_of_rotation_is_zero():
    model, z1 = rotation_map()
    spec = ly.model_spectrum(model, z1, warmup=100, T=2000)
    assert np.max(np.abs(spec.exponents)) < 1e-10
    assert spec.T_used == 2000


def test_spectrum_of_diagonal_contraction():
    model = m.PlrnnParams(np.array([0.5, 0.25]), np.zeros((2, 2)), np.zeros((2, 1)), np.zeros(2))
    spec = ly.model_spectrum(model, np.array([1.0, 1.0]), warmup=0, T=500)
    assert np.allclose(spec.exponents, [math.log(0.5), math.log(0.25)], atol=1e-10, rtol=0)


def test_spectrum_of_state_dependent_diagonal_jacobians():
    # diagonal A and W: each Jacobian is diag(A + W * 1[z > 0]); oracle is the mean of logs
    A = np.array([0.6, -0.7, 0.9])
    W = np.diag([-1.4, 1.2, -1.5])
    model = m.PlrnnParams(A, W, np.zeros((3, 1)), np.array([0.5, -0.2, 0.4]))
    z = np.array([0.3, -0.1, 0.2])
    spec = ly.model_spectrum(model, z, warmup=0, T=400)
    logs = np.zeros(3)
    for _ in range(400):
        logs += np.log(np.abs(A + np.diag(W) * (z > 0)))
        z = m.step(model, z)
    assert np.allclose(spec.exponents, np.sort(logs / 400)[::-1], atol=1e-10, rtol=0)


def test_spectrum_of_tent_map():
    spec = ly.model_spectrum(tent_map(), np.array([0.123]), warmup=100, T=5000)
    assert abs(spec.lambda_max - math.log(1.9)) < 1e-10


def test_spectrum_sorted_and_errors():
    model, _ = m.init_params("lstm", 3, 1, 1, seed=0)
    spec = ly.model_spectrum(model, np.zeros(6), warmup=10, T=200)
    assert np.all(np.diff(spec.exponents) <= 0) and np.all(np.isfinite(spec.exponents))
    with pytest.raises(ConfigError):
        ly.model_spectrum(model, np.zeros(6), T=50)
    blow = m.PlrnnParams(np.array([1e200]), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1))
    with pytest.raises(DivergenceError):
        ly.model_spectrum(blow, np.array([1.0]), warmup=10, T=100)


# ---------------------------------------------------------------------------
# norm curve


def test_identity_norm_curve_is_zero():
    model = m.PlrnnParams(np.ones(3), np.zeros((3, 3)), np.zeros((3, 1)), np.zeros(3))
    nc = ly.norm_curve(model, np.ones(3), 50)
    assert np.all(np.abs(nc.log_norm) < 1e-12)
    assert np.all(np.diff(nc.T) > 0)


def test_stable_cycle_norm_curve_decays():
    model = stable_two_cycle()
    z1 = np.array([0.2])
    Z = m.rollout(model, z1, 300)
    assert abs(Z[-1, 0] - Z[-3, 0]) < 1e-8  # converged onto the 2-cycle
    nc = ly.norm_curve(model, z1, 1000)
    assert nc.log_norm[-1] < -13.8
    assert np.all(np.diff(nc.log_norm[len(nc.log_norm) // 2:]) < 0)


def test_chaotic_norm_curve_slope_matches_exponent():
    model = tent_map()
    z1 = np.array([0.123])
    nc = ly.norm_curve(model, z1, 2000)
    lam = ly.model_spectrum(model, z1, warmup=0, T=2000).lambda_max
    assert nc.slope() > 0
    assert abs(nc.slope() - lam) / lam < 0.2
    assert np.isfinite(nc.log_norm[-1]) and nc.log_norm[-1] > 1000  # far beyond double range


def test_rotation_norm_curve_stays_subexponential():
    model, z1 = rotation_map()
    T = 10_000
    nc = ly.norm_curve(model, z1, T, checkpoints=[10, 1000, T])
    assert abs(nc.log_norm[-1]) / (T - 1) < 0.01
    Z = m.rollout(model, z1, T)
    assert np.all(Z > 0)


def test_norm_curve_checkpoint_validation():
    model = tent_map()
    with pytest.raises(ConfigError):
        ly.norm_curve(model, np.array([0.1]), 10, checkpoints=[3, 2])
    with pytest.raises(ConfigError):
        ly.norm_curve(model, np.array([0.1]), 10, checkpoints=[5, 11])


# ---------------------------------------------------------------------------
# spectral norm / corollary


def power_iteration_oracle(W, iters=5000):
    v = np.ones(W.shape[1])
    for _ in range(iters):
        v = W.T @ (W @ v)
        v /= np.linalg.norm(v)
    return float(np.linalg.norm(W @ v))


def _rnn(W):
    n = W.shape[0]
    return m.VanillaRnnParams(W, np.zeros((n, 1)), np.zeros(n))


def test_chaos_condition_examples():
    norm, gamma, ok = ly.chaos_necessary_condition(_rnn(0.5 * np.eye(4)))
    assert math.isclose(norm, 0.5, rel_tol=1e-14) and gamma == 1.0 and not ok
    norm, _, ok = ly.chaos_necessary_condition(_rnn(2 * np.eye(4)))
    assert math.isclose(norm, 2.0, rel_tol=1e-14) and ok


def test_chaos_condition_random_matrix_against_oracles():
    W = np.random.default_rng(3).standard_normal((8, 8)) / 3
    norm, _, _ = ly.chaos_necessary_condition(_rnn(W))
    assert abs(norm - power_iteration_oracle(W)) < 1e-8
    assert abs(norm - np.linalg.svd(W, compute_uv=False)[0]) < 1e-8


def test_chaos_condition_wrong_architecture():
    model, _ = m.init_params("gru", 3, 1, 1)
    with pytest.raises(UsageError):
        ly.chaos_necessary_condition(model)


def test_spectral_norm_null_start_and_zero_matrix():
    A = np.array([[1.0, -1.0], [2.0, -2.0]])  # ones vector is in the null space
    sigma, _ = ly.spectral_norm(A, max_iter=200, tol=1e-14)
    assert math.isclose(sigma, np.linalg.norm(A, 2), rel_tol=1e-12)
    assert ly.spectral_norm(np.zeros((3, 3)))[0] == 0.0


def test_regime_dead_zone():
    assert ly.regime(0.2) == "chaotic"
    assert ly.regime(-0.2) == "contracting"
    assert ly.regime(0.005) == "quasi-periodic-band"
    assert ly.regime(-0.01) == "quasi-periodic-band"
