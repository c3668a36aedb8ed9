"""Lyapunov exponents from data and from trained models.

Data: nearest-neighbour log-divergence (Rosenstein) with an automatic
linear scaling region. Models: Benettin QR iteration of the Jacobian
products, and the log spectral norm of the raw product series, which is
what controls exploding and vanishing loss gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError, DivergenceError, NoPositiveExponentError, UsageError
from .models import VanillaRnnParams, kernel
from .systems import Trajectory

MIN_ROWS = 1000
DEFAULT_THEILER = 50
R2_CONFIDENT = 0.95


@dataclass(frozen=True, eq=False)
class LyapunovEstimate:
    lambda_max: float
    divergence_curve: np.ndarray  # rows (delta_n, log distance statistic)
    fit_range: tuple
    r2: float
    low_confidence: bool
    dt: float = 1.0
    intercept: float = 0.0

    @property
    def slope_per_step(self) -> float:
        return self.lambda_max * self.dt

    def to_dict(self) -> dict:
        return {
            "lambda_max": self.lambda_max,
            "fit_range": list(self.fit_range),
            "r2": self.r2,
            "low_confidence": self.low_confidence,
            "dt": self.dt,
            "divergence_curve": self.divergence_curve.tolist(),
        }


@dataclass(frozen=True, eq=False)
class SpectrumEstimate:
    exponents: np.ndarray
    T_used: int

    @property
    def lambda_max(self) -> float:
        return float(self.exponents[0])


@dataclass(frozen=True, eq=False)
class NormCurve:
    T: np.ndarray
    log_norm: np.ndarray

    def slope(self, fraction: float = 0.5) -> float:
        """Least-squares slope of log_norm against T over the final ``fraction`` of samples."""
        n = len(self.T)
        start = min(n - 2, int(math.floor(n * (1.0 - fraction))))
        if start < 0:
            raise DataError("need at least two checkpoints for a slope")
        return float(np.polyfit(self.T[start:], self.log_norm[start:], 1)[0])


# ---------------------------------------------------------------------------
# From data


def divergence_curve(
    X: np.ndarray, theiler: int, k_neighbors: int, max_horizon: int, statistic: str = "median"
) -> np.ndarray:
    """Typical log distance between initially nearest neighbours after delta_n steps.

    ``statistic`` is "median" (default) or "mean" over neighbour pairs. The
    median is insensitive to the minority of pairs that reach attractor scale
    early (e.g. split across a saddle), which bias the mean curve flat.
    """
    if statistic not in ("median", "mean"):
        raise ConfigError(f"statistic must be 'median' or 'mean', got {statistic!r}")
    reduce = np.median if statistic == "median" else np.mean
    T = X.shape[0]
    n = T - max_horizon
    if n < 2 * theiler + k_neighbors + 2:
        raise DataError(f"{T} rows too few for theiler={theiler}, max_horizon={max_horizon}")
    base = X[:n]
    tree = cKDTree(base)
    k = min(n, 2 * theiler + 1 + k_neighbors)
    _, idx = tree.query(base, k=k)
    idx = np.atleast_2d(idx)
    ok = np.abs(idx - np.arange(n)[:, None]) > theiler
    # first k_neighbors admissible hits for each reference point
    rank = np.cumsum(ok, axis=1)
    chosen = ok & (rank <= k_neighbors)
    ref, col = np.nonzero(chosen)
    nbr = idx[ref, col]
    steps = np.arange(max_horizon + 1)
    curve = np.empty(max_horizon + 1)
    for d in steps:
        dist = np.linalg.norm(X[ref + d] - X[nbr + d], axis=1)
        dist = dist[dist > 0]
        curve[d] = reduce(np.log(dist)) if dist.size else -np.inf
    return np.column_stack([steps.astype(float), curve])


def best_linear_region(y: np.ndarray, min_frac: float = 0.3):
    """Window of >= min_frac of the curve maximizing r^2 among positive-slope fits.

    Returns (start, end_inclusive, slope, intercept, r2); slope is NaN if no
    window has positive slope.
    """
    n = y.size
    w_min = max(3, int(math.ceil(min_frac * n)))
    if n < w_min:
        raise DataError("curve too short for a scaling-region fit")
    x = np.arange(n, dtype=float)
    cx = np.concatenate([[0.0], np.cumsum(x)])
    cy = np.concatenate([[0.0], np.cumsum(y)])
    cxx = np.concatenate([[0.0], np.cumsum(x * x)])
    cyy = np.concatenate([[0.0], np.cumsum(y * y)])
    cxy = np.concatenate([[0.0], np.cumsum(x * y)])
    best = (0, n - 1, math.nan, math.nan, -math.inf)
    for a in range(0, n - w_min + 1):
        b = np.arange(a + w_min, n + 1)  # exclusive ends
        m = b - a
        sx = cx[b] - cx[a]
        sy = cy[b] - cy[a]
        sxx = (cxx[b] - cxx[a]) - sx * sx / m
        syy = (cyy[b] - cyy[a]) - sy * sy / m
        sxy = (cxy[b] - cxy[a]) - sx * sy / m
        slope = sxy / sxx
        with np.errstate(divide="ignore", invalid="ignore"):
            r2 = np.where(syy > 0, sxy * sxy / (sxx * syy), 0.0)
        r2 = np.where(slope > 0, r2, -np.inf)
        j = int(np.argmax(r2))
        if r2[j] > best[4]:
            intercept = (sy[j] - slope[j] * sx[j]) / m[j]
            best = (a, int(b[j]) - 1, float(slope[j]), float(intercept), float(r2[j]))
    if not best[4] > -math.inf:
        return 0, n - 1, math.nan, math.nan, 0.0
    return best


def estimate_lambda_max(
    traj: Trajectory,
    theiler: int = DEFAULT_THEILER,
    k_neighbors: int = 1,
    max_horizon: int | None = None,
    min_window_frac: float = 0.3,
    statistic: str = "median",
) -> LyapunovEstimate:
    """Maximal Lyapunov exponent (per unit time) from nearest-neighbour divergence.

    ``max_horizon`` defaults to the first step at which the divergence curve
    comes within 10% (of its total rise) of the attractor-scale plateau, plus
    25% margin, so the fitted curve contains the growth phase and only the
    start of saturation.
    """
    X = traj.data
    if X.shape[0] < MIN_ROWS:
        raise DataError(f"need at least {MIN_ROWS} rows, got {X.shape[0]}")
    if isinstance(theiler, bool) or not isinstance(theiler, (int, np.integer)) or theiler < 1:
        raise ConfigError(f"theiler must be an integer >= 1, got {theiler!r}")
    if isinstance(k_neighbors, bool) or not isinstance(k_neighbors, (int, np.integer)) or k_neighbors < 1:
        raise ConfigError(f"k_neighbors must be an integer >= 1, got {k_neighbors!r}")
    if max_horizon is None:
        probe = divergence_curve(X, theiler, k_neighbors, min(X.shape[0] // 5, 2000), statistic)
        y = probe[:, 1]
        if not np.all(np.isfinite(y)):
            return LyapunovEstimate(0.0, probe, (0, len(y) - 1), 0.0, True, traj.dt)
        plateau = np.median(y[len(y) // 2 :])
        rise = plateau - y[0]
        reached = np.nonzero(y >= plateau - 0.1 * rise)[0]
        max_horizon = int(min(len(y) - 1, max(20, math.ceil(1.25 * reached[0])))) if reached.size else len(y) - 1
        curve = probe[: max_horizon + 1]
    else:
        if max_horizon < 3:
            raise ConfigError(f"max_horizon must be >= 3, got {max_horizon}")
        curve = divergence_curve(X, theiler, k_neighbors, max_horizon, statistic)
    y = curve[:, 1]
    if not np.all(np.isfinite(y)):
        # identical neighbours at every lag: nothing separates
        return LyapunovEstimate(0.0, curve, (0, len(y) - 1), 0.0, True, traj.dt)
    a, b, slope, intercept, r2 = best_linear_region(y, min_window_frac)
    if math.isnan(slope):
        # no growth anywhere: report the overall trend (<= 0)
        slope = float(np.polyfit(curve[:, 0], y, 1)[0])
        intercept = float(y[0])
        a, b, r2 = 0, len(y) - 1, 0.0
    r2 = float(min(1.0, max(0.0, r2)))
    return LyapunovEstimate(
        lambda_max=slope / traj.dt,
        divergence_curve=curve,
        fit_range=(int(a), int(b)),
        r2=r2,
        low_confidence=r2 < R2_CONFIDENT,
        dt=traj.dt,
        intercept=intercept,
    )


def predictability_time(lambda_max: float, dt: float) -> float:
    """ln 2 / (lambda_max dt): error-doubling horizon in sampling steps."""
    if not dt > 0:
        raise ConfigError(f"dt must be > 0, got {dt}")
    if not lambda_max > 0:
        raise NoPositiveExponentError(
            f"lambda_max = {lambda_max} is not positive; the sparse forcing interval is undefined"
        )
    return math.log(2.0) / (lambda_max * dt)


# ---------------------------------------------------------------------------
# From models


def spectral_norm(A: np.ndarray, max_iter: int = 30, tol: float = 1e-10, v0=None) -> tuple[float, np.ndarray]:
    """Largest singular value by power iteration on A^T A; returns (sigma, right vector)."""
    n = A.shape[1]
    v = np.ones(n) / math.sqrt(n) if v0 is None else np.asarray(v0, dtype=float)
    if not np.any(v):
        v = np.ones(n) / math.sqrt(n)
    v = v / np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = A @ v
        w = A.T @ u
        nw = np.linalg.norm(w)
        if nw == 0:
            # started in the null space; retry from a generic direction once
            if sigma == 0 and v0 is None:
                v = np.cos(np.arange(1, n + 1))
                v = v / np.linalg.norm(v)
                continue
            return 0.0, v
        new_sigma = math.sqrt(nw)  # ||A^T A v|| -> sigma^2 as v converges
        v = w / nw
        if abs(new_sigma - sigma) <= tol * new_sigma:
            sigma = new_sigma
            break
        sigma = new_sigma
    return float(np.linalg.norm(A @ v)), v


def _orbit_stepper(model, inputs):
    k = kernel(model)
    packed = k.pack(model)
    zero = np.zeros((1, model.input_size))

    def advance(z, t):
        s = zero if inputs is None else inputs[t][None]
        return k.forward(packed, z[None], s)[0][0]

    def jac(z, t):
        s = zero[0] if inputs is None else inputs[t]
        return k.jacobian(model, z, s)

    return advance, jac


def _check_finite(z, t):
    if not np.all(np.isfinite(z)):
        raise DivergenceError(f"model orbit diverged at step {t}", step=t)


def model_spectrum(model, z1, warmup: int = 1000, T: int = 10000, n_exponents: int | None = None) -> SpectrumEstimate:
    """Lyapunov exponents (per step) by QR re-orthogonalization every step."""
    if T < 100:
        raise ConfigError(f"T must be >= 100, got {T}")
    if warmup < 0:
        raise ConfigError(f"warmup must be >= 0, got {warmup}")
    z = np.asarray(z1, dtype=float).copy()
    if z.shape != (model.state_size,):
        raise ConfigError(f"initial state must have shape ({model.state_size},)")
    advance, jac = _orbit_stepper(model, None)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(warmup):
            z = advance(z, t)
            _check_finite(z, t)
        d = model.state_size
        p = d if n_exponents is None else int(n_exponents)
        Q = np.eye(d)[:, :p]
        sums = np.zeros(p)
        tiny = np.finfo(float).tiny
        for t in range(T):
            J = jac(z, t)
            Q, R = np.linalg.qr(J @ Q)
            sums += np.log(np.maximum(np.abs(np.diag(R)), tiny))
            z = advance(z, t)
            _check_finite(z, warmup + t)
    return SpectrumEstimate(np.sort(sums / T)[::-1], T)


def norm_curve(model, z1, T_max: int, checkpoints=None) -> NormCurve:
    """log ||J_T ... J_2|| (spectral norm) along the orbit from z1 at each checkpoint T.

    The running product is renormalized every step and its log scale
    accumulated, so neither overflow nor underflow occurs.
    """
    if checkpoints is None:
        checkpoints = np.unique(np.linspace(1, T_max, min(T_max, 100)).astype(int))
    cps = np.asarray(checkpoints, dtype=int)
    if cps.size == 0 or np.any(np.diff(cps) <= 0):
        raise ConfigError("checkpoints must be strictly increasing")
    if cps[0] < 1 or cps[-1] > T_max:
        raise ConfigError(f"checkpoints must lie in [1, {T_max}]")
    z = np.asarray(z1, dtype=float).copy()
    advance, jac = _orbit_stepper(model, None)
    d = model.state_size
    P = np.eye(d) / math.sqrt(d)
    log_scale = 0.5 * math.log(d)
    out = np.empty(cps.size)
    v = None
    ci = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for T in range(1, T_max + 1):
            if T >= 2:
                P = jac(z, T) @ P
                z = advance(z, T)
                _check_finite(z, T)
                fro = np.linalg.norm(P)
                if fro == 0:
                    log_scale = -math.inf
                    P = np.zeros_like(P)
                else:
                    log_scale += math.log(fro)
                    P /= fro
            if T == cps[ci]:
                if math.isinf(log_scale):
                    out[ci] = -math.inf
                else:
                    sigma, v = spectral_norm(P, v0=v)
                    out[ci] = log_scale + (math.log(sigma) if sigma > 0 else -math.inf)
                ci += 1
                if ci == cps.size:
                    break
    return NormCurve(cps.astype(float), out)


def chaos_necessary_condition(model) -> tuple[float, float, bool]:
    """(||W||_2, gamma, ||W||_2 gamma > 1) for a tanh RNN; chaos needs the last to hold."""
    if not isinstance(model, VanillaRnnParams):
        raise UsageError(f"chaos_necessary_condition needs a vanilla tanh RNN, got {type(model).__name__}")
    gamma = 1.0  # Lipschitz constant of tanh
    norm_w, _ = spectral_norm(model.W, max_iter=100000, tol=1e-15)
    return norm_w, gamma, bool(norm_w * gamma > 1.0)


def regime(lambda_max: float, dead_zone: float = 0.01) -> str:
    if lambda_max > dead_zone:
        return "chaotic"
    if lambda_max < -dead_zone:
        return "contracting"
    return "quasi-periodic-band"
