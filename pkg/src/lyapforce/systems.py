"""Benchmark chaotic systems and preprocessing of raw series.

Trajectories are integrated with fixed-step RK4. Delay embedding parameters
can be chosen from data with the first minimum of the mutual information
(delay) and the false-nearest-neighbour fraction (dimension).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError, DegenerateDataError, IntegrationDivergedError


class EmbeddingWarning(UserWarning):
    """Raised when an embedding parameter search hits its upper bound."""


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-major T x N state matrix with its sampling step."""

    data: np.ndarray
    dt: float = 1.0
    name: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2 or data.shape[1] < 1:
            raise DataError(f"trajectory data must be T x N, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("trajectory contains non-finite values")
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "data", data)

    @property
    def n_steps(self) -> int:
        return self.data.shape[0]

    @property
    def n_dims(self) -> int:
        return self.data.shape[1]

    def __len__(self):
        return self.data.shape[0]


# ---------------------------------------------------------------------------
# System definitions

PARAM_NAMES = {
    "lorenz": ("sigma", "rho", "beta"),
    "roessler": ("a", "b", "c"),
    "duffing": ("alpha", "beta", "delta", "gamma", "omega"),
    "mackey_glass": ("beta", "gamma", "n", "rho_delay"),
}

DEFAULT_PARAMS = {
    "lorenz": {"sigma": 16.0, "rho": 45.92, "beta": 4.0},
    "roessler": {"a": 0.15, "b": 0.2, "c": 10.0},
    "duffing": {"alpha": 1.0, "beta": -1.0, "delta": 0.1, "gamma": 0.35, "omega": 1.4},
    "mackey_glass": {"beta": 2.0, "gamma": 1.0, "n": 9.65, "rho_delay": 2.0},
}

DEFAULT_DT = {"lorenz": 0.01, "roessler": 0.1, "duffing": 0.17, "mackey_glass": 0.04}

DEFAULT_INITIAL_STATE = {
    "lorenz": (1.0, 1.0, 1.0),
    "roessler": (1.0, 1.0, 0.0),
    "duffing": (0.1, 0.0, 0.0),
    "mackey_glass": (1.2,),
}

_KIND_ALIASES = {
    "lorenz": "lorenz",
    "roessler": "roessler",
    "rossler": "roessler",
    "rössler": "roessler",
    "duffing": "duffing",
    "mackey_glass": "mackey_glass",
    "mackeyglass": "mackey_glass",
    "mackey-glass": "mackey_glass",
}


def _canonical_kind(kind: str) -> str:
    key = str(kind).strip().lower()
    if key not in _KIND_ALIASES:
        raise ConfigError(f"unknown system kind {kind!r}; expected one of {sorted(PARAM_NAMES)}")
    return _KIND_ALIASES[key]


@dataclass(frozen=True)
class SystemSpec:
    kind: str
    params: dict = field(default_factory=dict)
    dt: float | None = None
    n_steps: int = 10000
    transient: int = 1000
    initial_state: tuple | None = None

    def __post_init__(self):
        kind = _canonical_kind(self.kind)
        object.__setattr__(self, "kind", kind)
        params = dict(DEFAULT_PARAMS[kind]) if not self.params else dict(self.params)
        expected = set(PARAM_NAMES[kind])
        unknown = set(params) - expected
        if unknown:
            raise ConfigError(f"unknown parameter(s) {sorted(unknown)} for {kind}; expected {sorted(expected)}")
        missing = expected - set(params)
        if missing:
            raise ConfigError(f"missing parameter(s) {sorted(missing)} for {kind}")
        try:
            params = {k: float(v) for k, v in params.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"non-numeric parameter value in {params}") from exc
        object.__setattr__(self, "params", params)
        dt = DEFAULT_DT[kind] if self.dt is None else self.dt
        if not isinstance(dt, (int, float)) or not dt > 0:
            raise ConfigError(f"dt must be a positive number, got {dt!r}")
        object.__setattr__(self, "dt", float(dt))
        for name in ("n_steps", "transient"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {value!r}")
        x0 = DEFAULT_INITIAL_STATE[kind] if self.initial_state is None else self.initial_state
        x0 = tuple(float(v) for v in np.atleast_1d(x0))
        if len(x0) != len(DEFAULT_INITIAL_STATE[kind]):
            raise ConfigError(
                f"initial_state for {kind} needs {len(DEFAULT_INITIAL_STATE[kind])} entries, got {len(x0)}"
            )
        object.__setattr__(self, "initial_state", x0)
        if kind == "mackey_glass" and params["rho_delay"] < self.dt:
            raise ConfigError("rho_delay must be at least one integration step")

    @classmethod
    def from_dict(cls, doc: dict) -> "SystemSpec":
        if not isinstance(doc, dict):
            raise ConfigError("system spec must be a JSON object")
        allowed = {"kind", "params", "dt", "n_steps", "transient", "initial_state"}
        extra = set(doc) - allowed
        if extra:
            raise ConfigError(f"unknown field(s) in system spec: {sorted(extra)}")
        if "kind" not in doc:
            raise ConfigError("system spec is missing field 'kind'")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": dict(self.params),
            "dt": self.dt,
            "n_steps": self.n_steps,
            "transient": self.transient,
            "initial_state": list(self.initial_state),
        }


def lorenz_rhs(x, p):
    return np.array(
        [
            p["sigma"] * (x[1] - x[0]),
            x[0] * (p["rho"] - x[2]) - x[1],
            x[0] * x[1] - p["beta"] * x[2],
        ]
    )


def roessler_rhs(x, p):
    return np.array([-x[1] - x[2], x[0] + p["a"] * x[1], p["b"] + x[2] * (x[0] - p["c"])])


def duffing_rhs(x, p):
    """Autonomous form: state (x, dx/dt, theta) with theta' = omega."""
    pos, vel, theta = x
    acc = -p["delta"] * vel - p["beta"] * pos - p["alpha"] * pos**3 + p["gamma"] * math.cos(theta)
    return np.array([vel, acc, p["omega"]])


_RHS = {"lorenz": lorenz_rhs, "roessler": roessler_rhs, "duffing": duffing_rhs}


def rk4_step(f, x, dt, p):
    k1 = f(x, p)
    k2 = f(x + 0.5 * dt * k1, p)
    k3 = f(x + 0.5 * dt * k2, p)
    k4 = f(x + dt * k3, p)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _integrate_ode(spec: SystemSpec) -> np.ndarray:
    f = _RHS[spec.kind]
    x = np.array(spec.initial_state, dtype=float)
    out = np.empty((spec.n_steps, x.size))
    total = spec.transient + spec.n_steps
    for k in range(total):
        with np.errstate(over="ignore", invalid="ignore"):
            x = rk4_step(f, x, spec.dt, spec.params)
        if spec.kind == "duffing":
            x[2] = math.fmod(x[2], 2.0 * math.pi)
        if not np.all(np.isfinite(x)):
            raise IntegrationDivergedError(f"{spec.kind} integration diverged at step {k}", step=k)
        if k >= spec.transient:
            out[k - spec.transient] = x
    return out


def _integrate_mackey_glass(spec: SystemSpec) -> np.ndarray:
    p = spec.params
    beta, gamma, n, rho = p["beta"], p["gamma"], p["n"], p["rho_delay"]
    dt = spec.dt
    lag = rho / dt
    x0 = spec.initial_state[0]
    total = spec.transient + spec.n_steps
    # hist[j] holds x at time (j - offset) * dt; constant history for t <= 0
    offset = int(math.ceil(lag)) + 1
    hist = np.empty(total + offset + 1)
    hist[: offset + 1] = x0

    def delayed(j_now, frac):
        # x(t_now + frac*dt - rho) by linear interpolation on the grid
        pos = j_now + frac - lag
        lo = int(math.floor(pos))
        w = pos - lo
        if w == 0.0:
            return hist[lo]
        return (1.0 - w) * hist[lo] + w * hist[lo + 1]

    def f(x, xd):
        return beta * xd / (1.0 + xd**n) - gamma * x

    x = x0
    out = np.empty((spec.n_steps, 1))
    for k in range(total):
        j = k + offset
        d0, dh, d1 = delayed(j, 0.0), delayed(j, 0.5), delayed(j, 1.0)
        k1 = f(x, d0)
        k2 = f(x + 0.5 * dt * k1, dh)
        k3 = f(x + 0.5 * dt * k2, dh)
        k4 = f(x + dt * k3, d1)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not math.isfinite(x):
            raise IntegrationDivergedError(f"mackey_glass integration diverged at step {k}", step=k)
        hist[j + 1] = x
        if k >= spec.transient:
            out[k - spec.transient, 0] = x
    return out


def simulate(spec: SystemSpec) -> Trajectory:
    """Integrate a benchmark system; records ``n_steps`` rows after the transient."""
    if spec.kind == "mackey_glass":
        data = _integrate_mackey_glass(spec)
    else:
        data = _integrate_ode(spec)
    return Trajectory(data, dt=spec.dt, name=spec.kind)


# ---------------------------------------------------------------------------
# Standardization and embedding


def standardize(traj: Trajectory) -> tuple[Trajectory, np.ndarray, np.ndarray]:
    """Zero-mean, unit (population) variance columns plus the affine parameters."""
    x = traj.data
    if x.shape[0] == 0:
        raise DataError("cannot standardize an empty trajectory")
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    for j, s in enumerate(stds):
        if not s > 0:
            raise DegenerateDataError(f"column {j} has zero variance")
    return Trajectory((x - means) / stds, dt=traj.dt, name=traj.name), means, stds


def destandardize(traj: Trajectory, means, stds) -> Trajectory:
    return Trajectory(traj.data * np.asarray(stds) + np.asarray(means), dt=traj.dt, name=traj.name)


@dataclass(frozen=True)
class EmbeddingSpec:
    m: int
    delay: int

    def __post_init__(self):
        if isinstance(self.m, bool) or not isinstance(self.m, int) or self.m < 1:
            raise ConfigError(f"embedding dimension m must be an integer >= 1, got {self.m!r}")
        if isinstance(self.delay, bool) or not isinstance(self.delay, int) or self.delay < 1:
            raise ConfigError(f"delay must be an integer >= 1, got {self.delay!r}")


def _as_series(series) -> np.ndarray:
    s = np.asarray(series, dtype=float)
    if s.ndim == 2 and s.shape[1] == 1:
        s = s[:, 0]
    if s.ndim != 1:
        raise DataError(f"expected a scalar series, got shape {s.shape}")
    return s


def delay_embed(series, spec: EmbeddingSpec, dt: float = 1.0, name: str = "embedded") -> Trajectory:
    """Row t is (s_t, s_{t+d}, ..., s_{t+(m-1)d})."""
    s = _as_series(series)
    span = (spec.m - 1) * spec.delay
    rows = s.size - span
    if rows < 1:
        raise ConfigError(f"series of length {s.size} too short for m={spec.m}, delay={spec.delay}")
    cols = [s[j * spec.delay : j * spec.delay + rows] for j in range(spec.m)]
    return Trajectory(np.column_stack(cols), dt=dt, name=name)


def _equiprobable_bins(s: np.ndarray, bins: int) -> np.ndarray:
    # quantile edges keep tied values in one bin
    edges = np.quantile(s, np.linspace(0.0, 1.0, bins + 1)[1:-1])
    return np.searchsorted(edges, s, side="right").astype(np.int64)


def _mutual_information(a: np.ndarray, b: np.ndarray, bins: int) -> float:
    joint = np.bincount(a * bins + b, minlength=bins * bins).reshape(bins, bins).astype(float)
    joint /= joint.sum()
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])))


def mutual_information_curve(series, max_delay: int, bins: int = 64) -> np.ndarray:
    """Histogram mutual information between s_t and s_{t+d} for d = 0..max_delay."""
    s = _as_series(series)
    labels = _equiprobable_bins(s, bins)
    mi = np.empty(max_delay + 1)
    mi[0] = _mutual_information(labels, labels, bins)
    for d in range(1, max_delay + 1):
        mi[d] = _mutual_information(labels[:-d], labels[d:], bins)
    return mi


def _mi_null_stats(labels: np.ndarray, bins: int, n_pairs: int, n_surrogates: int = 20, seed: int = 0):
    # MI of independent shuffles at the same sample size: estimator bias and spread
    rng = np.random.default_rng(seed)
    vals = np.array(
        [
            _mutual_information(rng.permutation(labels)[:n_pairs], rng.permutation(labels)[:n_pairs], bins)
            for _ in range(n_surrogates)
        ]
    )
    return float(vals.mean()), float(vals.std())


def first_mi_minimum(mi: np.ndarray, floor: float, prominence: float) -> int | None:
    """Index of the first prominent local minimum of an MI curve, or None.

    A candidate lag must lie above ``floor`` and the curve must climb at least
    ``prominence`` above it before dropping lower.
    """
    for d in range(1, len(mi) - 1):
        if not (mi[d] < mi[d - 1] and mi[d] > floor):
            continue
        for e in range(d + 1, len(mi)):
            if mi[e] < mi[d]:
                break
            if mi[e] >= mi[d] + prominence:
                return d
    return None


def select_delay(series, max_delay: int, bins: int = 64) -> int:
    """First minimum of the mutual information between s_t and s_{t+delay}.

    Shallow dips within the estimator's sampling noise (judged against
    shuffled surrogates) are skipped. If no minimum is found below
    ``max_delay`` an :class:`EmbeddingWarning` is issued and ``max_delay``
    returned.
    """
    if isinstance(max_delay, bool) or not isinstance(max_delay, int) or max_delay < 1:
        raise ConfigError(f"max_delay must be an integer >= 1, got {max_delay!r}")
    s = _as_series(series)
    if s.size < 4 * max_delay:
        raise DataError(f"series length {s.size} < 4 * max_delay = {4 * max_delay}")
    if np.ptp(s) == 0:
        raise DegenerateDataError("constant series has no delay structure")
    mi = mutual_information_curve(s, max_delay, bins)
    labels = _equiprobable_bins(s, bins)
    null_mean, null_std = _mi_null_stats(labels, bins, s.size - 1)
    d = first_mi_minimum(mi, floor=null_mean + 3.0 * null_std, prominence=3.0 * null_std)
    if d is not None:
        return d
    warnings.warn(f"no mutual-information minimum below max_delay={max_delay}", EmbeddingWarning, stacklevel=2)
    return max_delay


def false_nearest_fraction(series, delay: int, m: int, r_tol: float = 10.0) -> float:
    """Fraction of nearest neighbours in m dimensions that separate in m + 1."""
    s = _as_series(series)
    n = s.size - m * delay
    if n < 2:
        raise DataError(f"series too short for FNN at m={m}, delay={delay}")
    emb = np.column_stack([s[j * delay : j * delay + n] for j in range(m)])
    extra = s[m * delay : m * delay + n]
    tree = cKDTree(emb)
    dist, idx = tree.query(emb, k=2)
    # the first hit is the point itself unless an exact duplicate came first
    self_first = idx[:, 0] == np.arange(n)
    nn = np.where(self_first, idx[:, 1], idx[:, 0])
    r = np.where(self_first, dist[:, 1], dist[:, 0])
    gap = np.abs(extra - extra[nn])
    # rounding-level duplicates count as exact recurrences, not false neighbours
    tiny = 1e-9 * s.std()
    false = (gap > r_tol * np.maximum(r, tiny)) & (gap > tiny)
    return float(np.mean(false))


def select_embedding_dim(
    series, delay: int, max_m: int = 10, fnn_threshold: float = 0.01, r_tol: float = 10.0
) -> int:
    """Smallest m with false-nearest-neighbour fraction below ``fnn_threshold``."""
    if not 0.0 < fnn_threshold < 1.0:
        raise ConfigError(f"fnn_threshold must lie in (0, 1), got {fnn_threshold}")
    if isinstance(max_m, bool) or not isinstance(max_m, int) or max_m < 1:
        raise ConfigError(f"max_m must be an integer >= 1, got {max_m!r}")
    if isinstance(delay, bool) or not isinstance(delay, int) or delay < 1:
        raise ConfigError(f"delay must be an integer >= 1, got {delay!r}")
    s = _as_series(series)
    if np.ptp(s) == 0:
        raise DegenerateDataError("constant series: neighbours are indistinguishable")
    if s.size - max_m * delay < 10:
        raise DataError(f"series too short for max_m={max_m} at delay={delay}")
    for m in range(1, max_m + 1):
        if false_nearest_fraction(s, delay, m, r_tol) < fnn_threshold:
            return m
    warnings.warn(f"FNN fraction never fell below {fnn_threshold} up to m={max_m}", EmbeddingWarning, stacklevel=2)
    return max_m


# ---------------------------------------------------------------------------
# File formats


def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".json")


def write_trajectory_csv(traj: Trajectory, path, sidecar: bool = True) -> None:
    path = Path(path)
    header = ",".join(f"dim_{j}" for j in range(traj.n_dims))
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for row in traj.data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    if sidecar:
        sidecar_path(path).write_text(json.dumps({"dt": traj.dt, "name": traj.name}) + "\n")


def read_trajectory_csv(path, dt: float | None = None, name: str | None = None) -> Trajectory:
    """Read a trajectory CSV; dt/name come from the sidecar unless given."""
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip()
        if not header:
            raise DataError(f"{path}: missing header row")
        n_cols = len(header.split(","))
        rows = [line for line in fh if line.strip()]
    if rows:
        try:
            data = np.array([[float(v) for v in line.split(",")] for line in rows])
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric value ({exc})") from exc
        if data.shape[1] != n_cols:
            raise DataError(f"{path}: rows have {data.shape[1]} columns, header has {n_cols}")
    else:
        data = np.empty((0, n_cols))
    meta = {}
    side = sidecar_path(path)
    if side.exists() and side != path:
        try:
            meta = json.loads(side.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{side}: malformed sidecar JSON ({exc})") from exc
    return Trajectory(
        data,
        dt=float(dt if dt is not None else meta.get("dt", 1.0)),
        name=name if name is not None else meta.get("name", path.stem),
    )
