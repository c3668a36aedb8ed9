"""Reconstruction quality: state-space overlap D_stsp and spectral distance D_H."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import ConfigError, DataError, ShapeError
from .systems import Trajectory

DEFAULT_SMOOTH_SIGMA = 20.0
GRID_MARGIN = 0.05


def default_bins(n_dims: int) -> int:
    return 30 if n_dims <= 5 else 10


@dataclass(frozen=True, eq=False)
class BinnedDistribution:
    """Occupation frequencies on a regular grid; ``probs`` is flattened in C order."""

    edges: tuple
    probs: np.ndarray

    @property
    def K(self) -> int:
        return self.probs.size


@dataclass(frozen=True, eq=False)
class Spectrum:
    freqs: np.ndarray
    power: np.ndarray


def _data(traj) -> np.ndarray:
    x = traj.data if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise DataError("empty trajectory")
    return x


def state_space_grid(true_data, bins_per_dim: int) -> tuple:
    """Per-dimension edges over the data range widened by 5% on each side."""
    lo = true_data.min(axis=0)
    hi = true_data.max(axis=0)
    span = hi - lo
    # a constant coordinate still gets a grid of nonzero width
    span = np.where(span > 0, span, 1.0)
    return tuple(
        np.linspace(l - GRID_MARGIN * s, h + GRID_MARGIN * s, bins_per_dim + 1) for l, h, s in zip(lo, hi, span)
    )


def _bin_index(data, edges) -> np.ndarray:
    bins = len(edges[0]) - 1
    flat = np.zeros(data.shape[0], dtype=np.int64)
    for j, e in enumerate(edges):
        # outside samples land in the nearest boundary bin
        idx = np.clip(np.searchsorted(e, data[:, j], side="right") - 1, 0, bins - 1)
        flat = flat * bins + idx
    return flat


def bin_distribution(traj, edges) -> BinnedDistribution:
    x = _data(traj)
    if x.shape[1] != len(edges):
        raise ShapeError(f"trajectory has {x.shape[1]} dimensions, grid has {len(edges)}")
    K = (len(edges[0]) - 1) ** len(edges)
    counts = np.bincount(_bin_index(x, edges), minlength=K).astype(float)
    return BinnedDistribution(edges, counts / counts.sum())


def kl_binned(p_true: np.ndarray, p_gen: np.ndarray, eps: float = 0.0) -> float:
    """Sum of p ln(p/q) over bins where p > 0.

    Empty q bins under the support of p receive mass ``eps`` before
    renormalization; with eps = 0 such bins give an infinite divergence.
    """
    p = np.asarray(p_true, dtype=float)
    q = np.asarray(p_gen, dtype=float)
    if p.shape != q.shape:
        raise ShapeError("distributions must share a grid")
    support = p > 0
    if eps > 0:
        q = q.copy()
        q[support & (q == 0)] = eps
        q = q / q.sum()
    with np.errstate(divide="ignore"):
        return float(np.sum(p[support] * np.log(p[support] / q[support])))


def d_stsp(true_traj, gen_traj, bins_per_dim: int | None = None) -> float:
    """Binned KL divergence of the generated from the true state-space occupation."""
    x = _data(true_traj)
    y = _data(gen_traj)
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if bins_per_dim is None:
        bins_per_dim = default_bins(x.shape[1])
    if isinstance(bins_per_dim, bool) or not isinstance(bins_per_dim, (int, np.integer)) or bins_per_dim < 1:
        raise ConfigError(f"bins_per_dim must be an integer >= 1, got {bins_per_dim!r}")
    edges = state_space_grid(x, int(bins_per_dim))
    p = bin_distribution(x, edges).probs
    q = bin_distribution(y, edges).probs
    return kl_binned(p, q, eps=1.0 / (10.0 * y.shape[0]))


def power_spectrum(series, smooth_sigma: float = DEFAULT_SMOOTH_SIGMA) -> Spectrum:
    """Standardized FFT power, Gaussian-smoothed over ``smooth_sigma`` bins, unit sum."""
    s = np.asarray(series, dtype=float)
    if s.ndim == 2 and s.shape[1] == 1:
        s = s[:, 0]
    if s.ndim != 1:
        raise ShapeError(f"expected a scalar series, got shape {s.shape}")
    if s.size < 64:
        raise DataError(f"series of length {s.size} too short for a power spectrum (need >= 64)")
    if not smooth_sigma >= 0:
        raise ConfigError(f"smooth_sigma must be >= 0, got {smooth_sigma}")
    sd = s.std()
    s = (s - s.mean()) / sd if sd > 0 else s - s.mean()
    power = np.abs(np.fft.rfft(s)) ** 2
    # below 1/8 bin the truncated Gaussian kernel is a single tap, i.e. the identity
    if int(4.0 * smooth_sigma + 0.5) > 0:
        power = gaussian_filter1d(power, smooth_sigma, mode="reflect")
    total = power.sum()
    if total > 0:
        power = power / total
    else:
        power = np.full(power.size, 1.0 / power.size)
    return Spectrum(np.fft.rfftfreq(s.size), power)


def hellinger_spectra(s: Spectrum, p: Spectrum) -> float:
    if s.power.shape != p.power.shape or not np.array_equal(s.freqs, p.freqs):
        raise ShapeError("spectra are on different frequency grids")
    bc = float(np.sum(np.sqrt(s.power * p.power)))
    return float(np.sqrt(max(0.0, 1.0 - bc)))


def d_h(true_traj, gen_traj, smooth_sigma: float = DEFAULT_SMOOTH_SIGMA) -> float:
    """Dimension-wise spectral Hellinger distance averaged over dimensions.

    Both series are cut to the shorter length so the spectra share a grid.
    """
    x = _data(true_traj)
    y = _data(gen_traj)
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    n = min(x.shape[0], y.shape[0])
    dists = [
        hellinger_spectra(power_spectrum(x[:n, j], smooth_sigma), power_spectrum(y[:n, j], smooth_sigma))
        for j in range(x.shape[1])
    ]
    return float(np.mean(dists))


@dataclass(frozen=True)
class EvalReport:
    d_stsp: float | None
    d_h: float | None
    bins_per_dim: int
    smooth_sigma: float
    gen_length: int
    bounded: bool

    def to_dict(self) -> dict:
        return {
            "d_stsp": self.d_stsp,
            "d_h": self.d_h,
            "bins_per_dim": self.bins_per_dim,
            "smooth_sigma": self.smooth_sigma,
            "gen_length": self.gen_length,
            "bounded": self.bounded,
        }
