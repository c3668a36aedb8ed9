import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lyapforce import systems as s
from lyapforce.errors import ConfigError, DataError, DegenerateDataError, IntegrationDivergedError


# ---------------------------------------------------------------------------
# Oracles


def _lorenz_py(x, sigma=16.0, rho=45.92, beta=4.0):
    return [sigma * (x[1] - x[0]), x[0] * (rho - x[2]) - x[1], x[0] * x[1] - beta * x[2]]


def _euler(x0, h, n):
    x = list(x0)
    for _ in range(n):
        f = _lorenz_py(x)
        x = [x[i] + h * f[i] for i in range(3)]
    return np.array(x)


def _nn_fnn_oracle(series, delay, m, r_tol=10.0, chunk=500):
    # exhaustive pairwise distances, excluding the point itself
    n = series.size - m * delay
    emb = np.column_stack([series[j * delay : j * delay + n] for j in range(m)])
    extra = series[m * delay : m * delay + n]
    tiny = 1e-9 * series.std()
    false = 0
    for a in range(0, n, chunk):
        block = emb[a : a + chunk]
        d = np.sqrt(((block[:, None, :] - emb[None, :, :]) ** 2).sum(axis=2))
        d[np.arange(block.shape[0]), np.arange(a, a + block.shape[0])] = np.inf
        nn = d.argmin(axis=1)
        r = d[np.arange(block.shape[0]), nn]
        gap = np.abs(extra[a : a + chunk] - extra[nn])
        false += int(np.sum((gap > r_tol * np.maximum(r, tiny)) & (gap > tiny)))
    return false / n


def _mi_oracle(series, delay, bins=64):
    # dictionary counting over quantile labels
    edges = np.quantile(series, np.linspace(0, 1, bins + 1)[1:-1])
    lab = [int(np.searchsorted(edges, v, side="right")) for v in series]
    a, b = lab[: len(lab) - delay] if delay else lab, lab[delay:]
    n = len(a)
    joint, pa, pb = {}, {}, {}
    for i, j in zip(a, b):
        joint[(i, j)] = joint.get((i, j), 0) + 1
        pa[i] = pa.get(i, 0) + 1
        pb[j] = pb.get(j, 0) + 1
    return sum(c / n * math.log((c / n) / ((pa[i] / n) * (pb[j] / n))) for (i, j), c in joint.items())


# ---------------------------------------------------------------------------
# simulate


def test_lorenz_paper_parameters_bounded():
    traj = s.simulate(s.SystemSpec("lorenz", n_steps=20000, transient=1000))
    assert traj.data.shape == (20000, 3)
    assert np.all(np.abs(traj.data) <= 100)
    assert traj.dt == 0.01


def test_zero_steps_gives_empty_record():
    traj = s.simulate(s.SystemSpec("roessler", n_steps=0))
    assert traj.data.shape == (0, 3)


def _flow_oracle(x0, dt):
    h = 1e-6
    n = int(round(dt / h))
    return 2.0 * _euler(x0, h, n) - _euler(x0, 2 * h, n // 2)


@pytest.mark.xfail(strict=True, reason="RK4 local truncation error on Lorenz at dt=0.01 is ~2.5e-5")
def test_rk4_step_dt_001_within_1e8_of_flow():
    x0 = np.array([1.0, 1.0, 1.0])
    rk4 = s.rk4_step(s.lorenz_rhs, x0, 0.01, s.DEFAULT_PARAMS["lorenz"])
    assert np.max(np.abs(rk4 - _flow_oracle(x0, 0.01))) < 1e-8


def test_rk4_step_local_error_is_fifth_order():
    x0 = np.array([1.0, 1.0, 1.0])
    p = s.DEFAULT_PARAMS["lorenz"]
    err = {dt: np.max(np.abs(s.rk4_step(s.lorenz_rhs, x0, dt, p) - _flow_oracle(x0, dt))) for dt in (0.01, 0.005)}
    assert 2.4e-5 < err[0.01] < 2.7e-5
    assert 25 < err[0.01] / err[0.005] < 40  # ~2^5
    small = s.rk4_step(s.lorenz_rhs, x0, 0.001, p)
    assert np.max(np.abs(small - _flow_oracle(x0, 0.001))) < 1e-8


def test_rk4_global_error_one_time_unit():
    classic = {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}
    coarse = s.simulate(s.SystemSpec("lorenz", params=classic, dt=0.01, n_steps=100, transient=0))
    fine = s.simulate(s.SystemSpec("lorenz", params=classic, dt=0.001, n_steps=1000, transient=0))
    assert np.max(np.abs(coarse.data[-1] - fine.data[-1])) < 1e-4


def test_simulate_deterministic():
    spec = s.SystemSpec("mackey_glass", n_steps=500, transient=100)
    a, b = s.simulate(spec), s.simulate(spec)
    assert np.array_equal(a.data, b.data)


def test_duffing_autonomous_matches_nonautonomous():
    p = s.DEFAULT_PARAMS["duffing"]
    dt, n = 0.01, 1000

    def f(t, y):
        x, v = y
        return np.array([v, -p["delta"] * v - p["beta"] * x - p["alpha"] * x**3 + p["gamma"] * math.cos(p["omega"] * t)])

    y, t = np.array([0.1, 0.0]), 0.0
    for _ in range(n):
        k1 = f(t, y)
        k2 = f(t + dt / 2, y + dt / 2 * k1)
        k3 = f(t + dt / 2, y + dt / 2 * k2)
        k4 = f(t + dt, y + dt * k3)
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt
    traj = s.simulate(s.SystemSpec("duffing", dt=dt, n_steps=n, transient=0))
    assert np.max(np.abs(traj.data[-1, :2] - y)) < 1e-8
    assert 0 <= traj.data[:, 2].min() and traj.data[:, 2].max() < 2 * math.pi


def test_mackey_glass_constant_history_start():
    spec = s.SystemSpec("mackey_glass", n_steps=3, transient=0, initial_state=(1.2,))
    traj = s.simulate(spec)
    # while the delayed value is still the constant history, one RK4 step of x' = c - x
    p = spec.params
    c = p["beta"] * 1.2 / (1 + 1.2 ** p["n"])
    dt = spec.dt
    expected = c + (1.2 - c) * (1 - dt + dt**2 / 2 - dt**3 / 6 + dt**4 / 24)
    assert traj.data[0, 0] == pytest.approx(expected, abs=1e-14)


def test_unknown_parameter_is_config_error():
    with pytest.raises(ConfigError, match="unknown parameter"):
        s.SystemSpec("lorenz", params={"sigma": 10.0, "rho": 28.0, "b": 8 / 3})
    with pytest.raises(ConfigError):
        s.SystemSpec("pendulum")
    with pytest.raises(ConfigError):
        s.SystemSpec("lorenz", dt=0.0)


def test_integration_divergence_names_step():
    spec = s.SystemSpec("lorenz", dt=1.0, n_steps=50, transient=0, initial_state=(1e3, 1e3, 1e3))
    with pytest.raises(IntegrationDivergedError) as info:
        s.simulate(spec)
    assert isinstance(info.value.step, int)


def test_spec_json_round_trip():
    spec = s.SystemSpec("roessler", n_steps=10)
    again = s.SystemSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again == spec
    with pytest.raises(ConfigError, match="unknown field"):
        s.SystemSpec.from_dict({"kind": "lorenz", "steps": 3})


# ---------------------------------------------------------------------------
# standardize / embed


def test_standardize_constant_column_rejected():
    with pytest.raises(DegenerateDataError, match="column 1"):
        s.standardize(s.Trajectory(np.column_stack([np.arange(5.0), np.ones(5)])))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_standardize_properties(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(rng.uniform(-50, 50, 3), rng.uniform(0.1, 20, 3), size=(200, 3))
    z, mu, sd = s.standardize(s.Trajectory(x))
    assert np.all(np.abs(z.data.mean(axis=0)) < 1e-12)
    assert np.all(np.abs(z.data.std(axis=0) - 1) < 1e-12)
    back = s.destandardize(z, mu, sd)
    assert np.max(np.abs(back.data - x)) < 1e-12 * max(1.0, np.abs(x).max())
    again, _, _ = s.standardize(z)
    assert np.max(np.abs(again.data - z.data)) < 1e-12


def test_delay_embed_examples():
    emb = s.delay_embed([1, 2, 3, 4, 5], s.EmbeddingSpec(2, 1))
    assert emb.data.tolist() == [[1, 2], [2, 3], [3, 4], [4, 5]]
    x = np.random.default_rng(0).normal(size=50)
    assert np.array_equal(s.delay_embed(x, s.EmbeddingSpec(1, 7)).data[:, 0], x)
    assert s.delay_embed(np.zeros(10000), s.EmbeddingSpec(5, 500)).data.shape == (8000, 5)
    with pytest.raises(ConfigError):
        s.delay_embed(np.zeros(10), s.EmbeddingSpec(3, 5))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(60, 120))
def test_delay_embed_entries(m, d, n):
    x = np.random.default_rng(n).normal(size=n)
    emb = s.delay_embed(x, s.EmbeddingSpec(m, d)).data
    assert emb.shape == (n - (m - 1) * d, m)
    for t in (0, emb.shape[0] // 2, emb.shape[0] - 1):
        for j in range(m):
            assert emb[t, j] == x[t + j * d]


# ---------------------------------------------------------------------------
# select_delay / select_embedding_dim


def _sine(n, period=100, noise=0.0, seed=0):
    t = np.arange(n)
    x = np.sin(2 * np.pi * t / period)
    if noise:
        x = x + noise * np.random.default_rng(seed).normal(size=n)
    return x


def test_mutual_information_curve_matches_counting_oracle():
    x = _sine(3000, noise=0.05)
    mi = s.mutual_information_curve(x, 30)
    for d in (0, 1, 7, 25, 30):
        assert mi[d] == pytest.approx(_mi_oracle(x, d), abs=1e-10)
    assert np.argmax(mi) == 0


def test_select_delay_noisy_sine_near_quarter_period():
    assert 20 <= s.select_delay(_sine(10000, noise=0.05), 60) <= 30


def test_select_delay_pure_sine_matches_oracle_minimum():
    x = _sine(10000)
    mi = np.array([_mi_oracle(x, d) for d in range(61)])
    labels = s._equiprobable_bins(x, 64)
    mean, sd = s._mi_null_stats(labels, 64, x.size - 1)
    expected = s.first_mi_minimum(mi, mean + 3 * sd, 3 * sd)
    assert s.select_delay(x, 60) == expected


def test_select_delay_white_noise_warns_and_returns_max():
    x = np.random.default_rng(1).normal(size=5000)
    with pytest.warns(s.EmbeddingWarning):
        assert s.select_delay(x, 60) == 60


def test_select_delay_errors():
    with pytest.raises(ConfigError):
        s.select_delay(np.arange(100.0), 0)
    with pytest.raises(DataError):
        s.select_delay(np.arange(100.0), 30)
    with pytest.raises(DegenerateDataError):
        s.select_delay(np.ones(1000), 10)


@pytest.fixture(scope="module")
def lorenz_x():
    return s.simulate(s.SystemSpec("lorenz", n_steps=5000)).data[:, 0]


def test_fnn_fraction_matches_exhaustive_oracle(lorenz_x):
    delay = s.select_delay(lorenz_x, 100)
    for m in (1, 2, 3, 4):
        assert s.false_nearest_fraction(lorenz_x, delay, m) == pytest.approx(
            _nn_fnn_oracle(lorenz_x, delay, m), abs=1e-12
        )


def test_lorenz_embedding_dimension(lorenz_x):
    delay = s.select_delay(lorenz_x, 100)
    assert s.select_embedding_dim(lorenz_x, delay) in (3, 4)


def test_planar_circle_needs_two_dimensions():
    x = _sine(4000)
    assert _nn_fnn_oracle(x, 25, 2) == 0.0
    assert s.false_nearest_fraction(x, 25, 2) == 0.0
    assert s.select_embedding_dim(x, 25) == 2


def test_select_embedding_dim_errors():
    with pytest.raises(ConfigError):
        s.select_embedding_dim(np.arange(100.0), 1, fnn_threshold=1.5)
    with pytest.raises(DegenerateDataError):
        s.select_embedding_dim(np.ones(1000), 1)


def test_select_embedding_dim_warns_when_threshold_unreached():
    x = np.random.default_rng(0).normal(size=2000)
    with pytest.warns(s.EmbeddingWarning):
        assert s.select_embedding_dim(x, 1, max_m=2) == 2


# ---------------------------------------------------------------------------
# CSV


def test_trajectory_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    traj = s.Trajectory(rng.normal(size=(20, 3)) * 1e3, dt=0.017, name="demo")
    path = tmp_path / "t.csv"
    s.write_trajectory_csv(traj, path)
    assert path.read_text().splitlines()[0] == "dim_0,dim_1,dim_2"
    back = s.read_trajectory_csv(path)
    assert np.array_equal(back.data, traj.data)
    assert back.dt == 0.017 and back.name == "demo"


def test_empty_trajectory_csv_round_trip(tmp_path):
    path = tmp_path / "e.csv"
    s.write_trajectory_csv(s.Trajectory(np.empty((0, 2))), path)
    assert s.read_trajectory_csv(path).data.shape == (0, 2)


def test_trajectory_rejects_non_finite():
    with pytest.raises(DataError):
        s.Trajectory(np.array([[1.0], [np.nan]]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert s.Trajectory(np.arange(3.0)).data.shape == (3, 1)
