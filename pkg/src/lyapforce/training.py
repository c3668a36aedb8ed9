"""Sparsely forced BPTT with hand-derived gradients, Adam and clipping baselines.

Time indices are 0-based here: the forcing set {n tau + 1} of the 1-based
formulation becomes t = 0, tau, 2 tau, ... The loss at t uses the state
before any forcing; forcing replaces the state that enters step t + 1, and
no gradient crosses that replacement (except through the LSTM cell state,
which has no observation preimage and is carried over).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DivergenceError, ShapeError, TrainingDivergedError
from .models import (
    PARAM_TYPES,
    Readout,
    ReadoutInverse,
    init_params,
    kernel,
)
from .systems import Trajectory

FORCING_MODES = ("sparse_tf", "zero_reset", "forward_iterate", "none")

_MODE_ALIASES = {
    "sparse_tf": "sparse_tf",
    "sparsetf": "sparse_tf",
    "sparse-tf": "sparse_tf",
    "zero_reset": "zero_reset",
    "zeroreset": "zero_reset",
    "zero-reset": "zero_reset",
    "forward_iterate": "forward_iterate",
    "forwarditerate": "forward_iterate",
    "forward-iterate": "forward_iterate",
    "none": "none",
}


def _parse_tau(tau):
    if isinstance(tau, str):
        if tau.strip().lower() in ("inf", "infinity", "none"):
            return math.inf
        try:
            tau = float(tau)
        except ValueError:
            raise ConfigError(f"tau must be an integer >= 1 or 'inf', got {tau!r}") from None
    if isinstance(tau, bool) or not isinstance(tau, (int, float, np.integer, np.floating)):
        raise ConfigError(f"tau must be an integer >= 1 or infinite, got {tau!r}")
    if math.isinf(tau) and tau > 0:
        return math.inf
    if not (tau >= 1 and float(tau).is_integer()):
        raise ConfigError(f"tau must be an integer >= 1 or infinite, got {tau!r}")
    return int(tau)


@dataclass(frozen=True)
class ForcingSchedule:
    """Forcing interval, replacement mode and readout-inversion ridge.

    ``jitter_std`` > 0 draws each interval from a uniform distribution with
    mean tau and that standard deviation (lower bound 1).
    """

    tau: int | float = 30
    mode: str = "sparse_tf"
    reg: float = 0.0
    jitter_std: float = 0.0

    def __post_init__(self):
        mode = _MODE_ALIASES.get(str(self.mode).strip().lower())
        if mode is None:
            raise ConfigError(f"unknown forcing mode {self.mode!r}; expected one of {FORCING_MODES}")
        object.__setattr__(self, "mode", mode)
        tau = _parse_tau(self.tau)
        object.__setattr__(self, "tau", tau)
        if mode == "zero_reset" and math.isinf(tau):
            raise ConfigError("zero_reset needs a finite tau")
        if not self.reg >= 0:
            raise ConfigError(f"reg must be >= 0, got {self.reg}")
        if not self.jitter_std >= 0:
            raise ConfigError(f"jitter_std must be >= 0, got {self.jitter_std}")

    def mask(self, T: int, rng: np.random.Generator | None = None) -> np.ndarray:
        """Boolean vector over 0..T-1, True where forcing applies."""
        out = np.zeros(T, dtype=bool)
        if self.mode == "none" or T == 0:
            return out
        if math.isinf(self.tau):
            out[0] = True
            return out
        if self.jitter_std == 0:
            out[:: self.tau] = True
            return out
        if rng is None:
            raise ConfigError("a jittered schedule needs a random generator")
        half = math.sqrt(3.0) * self.jitter_std
        t = 0
        while t < T:
            out[t] = True
            t += max(1, int(round(rng.uniform(self.tau - half, self.tau + half))))
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "ForcingSchedule":
        extra = set(doc) - {"tau", "mode", "reg", "jitter_std"}
        if extra:
            raise ConfigError(f"unknown field(s) in forcing schedule: {sorted(extra)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "tau": "inf" if math.isinf(self.tau) else self.tau,
            "mode": self.mode,
            "reg": self.reg,
            "jitter_std": self.jitter_std,
        }


@dataclass(frozen=True)
class ClipConfig:
    """``euclidean`` rescales the global L2 norm to c when it exceeds c (always, if ``always``);
    ``infinity`` clamps each element to [-c, c]."""

    mode: str = "euclidean"
    c: float = 1.0
    always: bool = False

    def __post_init__(self):
        mode = str(self.mode).strip().lower().replace("_norm", "").replace("norm", "")
        mode = {"l2": "euclidean", "max": "infinity", "inf": "infinity"}.get(mode, mode)
        if mode not in ("euclidean", "infinity"):
            raise ConfigError(f"unknown clip mode {self.mode!r}; expected 'euclidean' or 'infinity'")
        object.__setattr__(self, "mode", mode)
        if not self.c > 0:
            raise ConfigError(f"clip threshold must be > 0, got {self.c}")


@dataclass(frozen=True)
class GradientSet:
    model: dict
    readout: dict

    def arrays(self):
        return list(self.model.values()) + list(self.readout.values())

    def global_norm(self) -> float:
        return float(math.sqrt(sum(float(np.sum(g * g)) for g in self.arrays())))

    def map(self, fn) -> "GradientSet":
        return GradientSet({k: fn(v) for k, v in self.model.items()}, {k: fn(v) for k, v in self.readout.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.arrays())


# ---------------------------------------------------------------------------
# Forward pass and BPTT


@dataclass
class _Tape:
    Z: np.ndarray  # (T, B, M') pre-forcing states
    residuals: np.ndarray  # (T, B, N)
    caches: list
    mask: np.ndarray
    z_tilde: dict  # t -> (B, M) inverted controls
    losses: np.ndarray  # (T,) summed over batch


def _as_batch(obs, name="observations"):
    X = np.asarray(obs.data if isinstance(obs, Trajectory) else obs, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ShapeError(f"{name} must be T x N or B x T x N, got shape {X.shape}")
    return X


def _inputs_batch(model, inputs, shape):
    Bsz, T = shape[:2]
    if inputs is None:
        return np.zeros((T, Bsz, model.input_size))
    S = _as_batch(inputs, "inputs")
    if S.shape[0] == 1 and Bsz > 1:
        S = np.repeat(S, Bsz, axis=0)
    if S.shape != (Bsz, T, model.input_size):
        raise ShapeError(f"inputs must have shape {(Bsz, T, model.input_size)}, got {S.shape}")
    return S.transpose(1, 0, 2)


def _run_forward(model, readout, X, schedule, inputs=None, mask=None, inv=None):
    k = kernel(model)
    packed = k.pack(model)
    Bsz, T, N = X.shape
    if N != readout.n_obs:
        raise ShapeError(f"observations have {N} columns, readout produces {readout.n_obs}")
    if readout.n_latent != model.hidden_size:
        raise ShapeError("readout latent size does not match the model")
    M = model.hidden_size
    if mask is None:
        mask = schedule.mask(T)
    S = _inputs_batch(model, inputs, X.shape)
    Xt = X.transpose(1, 0, 2)
    sparse = schedule.mode == "sparse_tf"
    if sparse and inv is None:
        inv = ReadoutInverse(Readout(readout.B, schedule.reg))
    Z = np.empty((T, Bsz, model.state_size))
    z = np.zeros((Bsz, model.state_size))
    z_tilde = {}
    if sparse:
        z_tilde[0] = inv(Xt[0])
        z[:, :M] = z_tilde[0]
    caches = []
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            Z[t] = z
            if t == T - 1:
                break
            u = z
            if mask[t]:
                if sparse:
                    if t not in z_tilde:
                        z_tilde[t] = inv(Xt[t])
                    u = z.copy()
                    u[:, :M] = z_tilde[t]
                elif schedule.mode == "zero_reset":
                    u = np.zeros_like(z)
            z, cache = k.forward(packed, u, S[t + 1])
            caches.append(cache)
        residuals = Z[:, :, :M] @ readout.B.T - Xt
        losses = np.einsum("tbn,tbn->t", residuals, residuals)
    if not np.all(np.isfinite(losses)):
        bad = int(np.argmax(~np.isfinite(losses)))
        raise DivergenceError(f"non-finite loss at step {bad}", step=bad)
    return _Tape(Z, residuals, caches, mask, z_tilde, losses), inv, S


def forced_forward(model, readout: Readout, obs_seq, schedule: ForcingSchedule, inputs=None, rng=None):
    """Forced rollout; returns pre-forcing states (T x M') and per-step losses (T,).

    A B x T x N stack of windows gives B x T x M' states and batch-summed losses.
    """
    single = isinstance(obs_seq, Trajectory) or np.ndim(obs_seq) == 2
    X = _as_batch(obs_seq)
    mask = schedule.mask(X.shape[1], rng)
    tape, _, _ = _run_forward(model, readout, X, schedule, inputs, mask)
    Z = tape.Z.transpose(1, 0, 2)
    return (Z[0] if single else Z), tape.losses


def _backward(model, readout, X, schedule, tape, inv, S):
    k = kernel(model)
    packed = k.pack(model)
    M = model.hidden_size
    T = X.shape[1]
    Xt = X.transpose(1, 0, 2)
    grads = {key: np.zeros_like(v) for key, v in packed.items()}
    dB = np.zeros_like(readout.B)
    sparse = schedule.mode == "sparse_tf"
    dz_next = None  # gradient w.r.t. z_{t+1}
    for t in range(T - 1, -1, -1):
        dz = np.zeros_like(tape.Z[t])
        r2 = 2.0 * tape.residuals[t]
        dB += r2.T @ tape.Z[t][:, :M]
        dz[:, :M] += r2 @ readout.B
        if dz_next is not None:
            du = k.backward(packed, tape.caches[t], dz_next, grads)
            if tape.mask[t]:
                if sparse:
                    dB += inv.vjp(Xt[t], tape.z_tilde[t], du[:, :M])
                    # the cell state of an LSTM passes through the forcing untouched
                    dz[:, M:] += du[:, M:]
                # zero_reset and forward_iterate: chain cut, nothing reaches z_t
            else:
                dz += du
        dz_next = dz
    if sparse:
        dB += inv.vjp(Xt[0], tape.z_tilde[0], dz_next[:, :M])
    return GradientSet(k.unpack_grads(grads), {"B": dB})


def bptt_gradients(model, readout: Readout, obs_seq, schedule: ForcingSchedule, inputs=None, mask=None, rng=None):
    """Exact gradients of the summed squared loss under the forcing schedule.

    ``obs_seq`` is T x N (or a B x T x N batch, in which case losses and
    gradients are summed over windows in index order). Returns
    (GradientSet, total_loss).
    """
    X = _as_batch(obs_seq)
    if mask is None:
        mask = schedule.mask(X.shape[1], rng)
    tape, inv, S = _run_forward(model, readout, X, schedule, inputs, mask)
    g = _backward(model, readout, X, schedule, tape, inv, S)
    if not g.is_finite():
        raise DivergenceError("non-finite gradient", step=None)
    return g, float(tape.losses.sum())


def total_loss(model, readout, obs_seq, schedule, inputs=None, mask=None, rng=None) -> float:
    X = _as_batch(obs_seq)
    if mask is None:
        mask = schedule.mask(X.shape[1], rng)
    tape, _, _ = _run_forward(model, readout, X, schedule, inputs, mask)
    return float(tape.losses.sum())


def _solve_gauss(A, b):
    # partial-pivot elimination; works in any float dtype including longdouble
    A = A.copy()
    b = b.copy()
    n = A.shape[0]
    for col in range(n):
        piv = col + int(np.argmax(np.abs(A[col:, col])))
        if A[piv, col] == 0:
            raise ConfigError("singular readout normal matrix in reference loss")
        A[[col, piv]] = A[[piv, col]]
        b[[col, piv]] = b[[piv, col]]
        for row in range(col + 1, n):
            f = A[row, col] / A[col, col]
            A[row, col:] -= f * A[col, col:]
            b[row] -= f * b[col]
    x = np.zeros_like(b)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - A[row, row + 1 :] @ x[row + 1 :]) / A[row, row]
    return x


def reference_loss(model, readout, obs_seq, schedule, mask, inputs=None, dtype=np.longdouble) -> float:
    """Summed squared loss from a plain per-step loop, evaluated in ``dtype``.

    Independent of the batched tape used by :func:`bptt_gradients`; serves as
    the finite-difference oracle.
    """
    cast = {k: np.asarray(v, dtype=dtype) for k, v in model.tensors().items()}
    mdl = model.replace(**cast)
    B = np.asarray(readout.B, dtype=dtype)
    X = np.asarray(obs_seq.data if isinstance(obs_seq, Trajectory) else obs_seq, dtype=dtype)
    T, N = X.shape
    M = model.hidden_size
    S = np.zeros((T, model.input_size), dtype=dtype) if inputs is None else np.asarray(inputs, dtype=dtype)
    k = kernel(model)
    packed = k.pack(mdl)

    def invert(x):
        if N <= M:
            return B.T @ _solve_gauss(B @ B.T + schedule.reg * np.eye(N, dtype=dtype), x)
        return _solve_gauss(B.T @ B + schedule.reg * np.eye(M, dtype=dtype), B.T @ x)

    z = np.zeros(model.state_size, dtype=dtype)
    if schedule.mode == "sparse_tf":
        z[:M] = invert(X[0])
    loss = dtype(0)
    for t in range(T):
        r = B @ z[:M] - X[t]
        loss += r @ r
        if t == T - 1:
            break
        if mask[t] and schedule.mode == "sparse_tf":
            z = z.copy()
            z[:M] = invert(X[t])
        elif mask[t] and schedule.mode == "zero_reset":
            z = np.zeros_like(z)
        z = k.forward(packed, z[None], S[t + 1][None])[0][0]
    return loss


def finite_diff_check(
    model, readout, obs_seq, schedule, eps: float = 1e-5, inputs=None, extended: bool = True
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The difference quotients are taken on :func:`reference_loss` in extended
    precision (``extended=False`` uses doubles, where round-off in the loss
    limits the resolvable gradient components to about 1e-16 |L| / eps).
    Forward-iterate schedules are rejected: their truncated gradient is by
    design not the derivative of the loss.
    """
    if not eps > 0:
        raise ConfigError(f"eps must be > 0, got {eps}")
    if schedule.mode == "forward_iterate":
        raise ConfigError("forward_iterate truncates gradients without changing the loss; no finite-difference oracle")
    X = _as_batch(obs_seq)
    if X.shape[0] != 1:
        raise ShapeError("finite_diff_check takes a single T x N sequence")
    mask = schedule.mask(X.shape[1], np.random.default_rng(0))
    g, _ = bptt_gradients(model, readout, X, schedule, inputs, mask)
    worst = 0.0
    dtype = np.longdouble if extended else np.float64

    def loss_with(m, r):
        return reference_loss(m, r, X[0], schedule, mask, inputs, dtype)

    targets = [("model", name, arr) for name, arr in model.tensors().items()]
    targets.append(("readout", "B", readout.B))
    for owner, name, arr in targets:
        analytic = (g.model if owner == "model" else g.readout)[name]
        for idx in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += eps
            minus[idx] -= eps
            if owner == "model":
                lp = loss_with(model.replace(**{name: plus}), readout)
                lm = loss_with(model.replace(**{name: minus}), readout)
            else:
                lp = loss_with(model, readout.replace(B=plus))
                lm = loss_with(model, readout.replace(B=minus))
            num = float((lp - lm) / (np.longdouble(plus[idx]) - np.longdouble(minus[idx])))
            a = analytic[idx]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst


# ---------------------------------------------------------------------------
# Optimizer and clipping


def clip_gradients(g: GradientSet, mode="euclidean", c: float = 1.0, always: bool = False) -> GradientSet:
    cfg = ClipConfig(mode, c, always)
    if cfg.mode == "infinity":
        return g.map(lambda a: np.clip(a, -cfg.c, cfg.c))
    norm = g.global_norm()
    if norm == 0 or (norm <= cfg.c and not cfg.always):
        return g
    scale = cfg.c / norm
    return g.map(lambda a: a * scale)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, model, readout, **kw) -> "AdamState":
        shapes = {f"model.{k}": v.shape for k, v in model.tensors().items()}
        shapes["readout.B"] = readout.B.shape
        return cls({k: np.zeros(s) for k, s in shapes.items()}, {k: np.zeros(s) for k, s in shapes.items()}, **kw)


def adam_update(model, readout: Readout, g: GradientSet, state: AdamState, lr: float):
    """One bias-corrected Adam step; returns (model, readout, state)."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v = {}, {}
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step

    def upd(key, p, grad):
        if p.shape != grad.shape:
            raise ShapeError(f"gradient for {key} has shape {grad.shape}, parameter {p.shape}")
        m = b1 * state.m[key] + (1.0 - b1) * grad
        v = b2 * state.v[key] + (1.0 - b2) * grad * grad
        new_m[key], new_v[key] = m, v
        return p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)

    model_t = {k: upd(f"model.{k}", p, g.model[k]) for k, p in model.tensors().items()}
    B = upd("readout.B", readout.B, g.readout["B"])
    new_state = dataclasses.replace(state, m=new_m, v=new_v, step=step)
    return model.replace(**model_t), readout.replace(B=B), new_state


# ---------------------------------------------------------------------------
# Training loop


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "lstm"
    M: int = 32
    seq_len: int | None = None
    n_epochs: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    schedule: ForcingSchedule = field(default_factory=ForcingSchedule)
    clip: ClipConfig | None = None
    early_stop: bool = True
    patience: int = 100
    min_rel_improvement: float = 1e-5

    def __post_init__(self):
        if self.arch not in PARAM_TYPES:
            raise ConfigError(f"unknown architecture {self.arch!r}; expected one of {sorted(PARAM_TYPES)}")
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", ForcingSchedule.from_dict(self.schedule))
        if isinstance(self.clip, dict):
            object.__setattr__(self, "clip", ClipConfig(**self.clip))
        for name in ("M", "n_epochs", "batch_size", "patience"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")
        if self.seq_len is not None and (
            isinstance(self.seq_len, bool) or not isinstance(self.seq_len, int) or self.seq_len < 2
        ):
            raise ConfigError(f"seq_len must be an integer >= 2, got {self.seq_len!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")

    @property
    def resolved_seq_len(self) -> int:
        if self.seq_len is not None:
            return self.seq_len
        tau = self.schedule.tau
        return 200 if math.isinf(tau) else max(4 * int(tau), 200)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        if not isinstance(doc, dict):
            raise ConfigError("train config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(doc) - names
        if extra:
            raise ConfigError(f"unknown field(s) in train config: {sorted(extra)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["schedule"] = self.schedule.to_dict()
        doc["clip"] = None if self.clip is None else dataclasses.asdict(self.clip)
        return doc


def _plateaued(history, patience, min_rel):
    if len(history) <= patience:
        return False
    best_before = min(history[:-patience])
    best_recent = min(history[-patience:])
    return best_before - best_recent < min_rel * abs(best_before)


def train(config: TrainConfig, data: Trajectory, inputs=None, model=None, readout=None, callback=None):
    """Fit a model to ``data``; returns (model, readout, history of per-epoch MSE).

    Each epoch draws ``batch_size`` windows, averages their BPTT gradients,
    optionally clips and applies one Adam step. Raises TrainingDivergedError
    carrying the last finite parameters if the loss or gradients blow up.
    """
    X = data.data if isinstance(data, Trajectory) else np.asarray(data, dtype=float)
    L = config.resolved_seq_len
    if X.shape[0] < L:
        raise DataError(f"data has {X.shape[0]} rows, fewer than seq_len={L}")
    S_all = None
    if inputs is not None:
        S_all = inputs.data if isinstance(inputs, Trajectory) else np.asarray(inputs, dtype=float)
        if S_all.ndim == 1:
            S_all = S_all[:, None]
        if S_all.shape[0] != X.shape[0]:
            raise ShapeError("inputs must have as many rows as the data")
    rng = np.random.default_rng(config.seed)
    if model is None or readout is None:
        n_in = 1 if S_all is None else S_all.shape[1]
        model, readout = init_params(config.arch, config.M, n_in, X.shape[1], seed=config.seed)
    readout = readout.replace(reg=config.schedule.reg)
    state = AdamState.zeros_like(model, readout)
    history = []
    scale = 1.0 / (config.batch_size * L * X.shape[1])
    offsets = np.arange(L)
    for epoch in range(config.n_epochs):
        starts = np.sort(rng.integers(0, X.shape[0] - L + 1, size=config.batch_size))
        idx = starts[:, None] + offsets
        batch = X[idx]
        S = None if S_all is None else S_all[idx]
        mask = config.schedule.mask(L, rng)
        try:
            g, loss = bptt_gradients(model, readout, batch, config.schedule, S, mask)
        except DivergenceError as exc:
            raise TrainingDivergedError(
                f"training diverged in epoch {epoch}: {exc}", step=epoch, model=model, readout=readout, history=history
            ) from exc
        g = g.map(lambda a: a * scale)
        if config.clip is not None:
            g = clip_gradients(g, config.clip.mode, config.clip.c, config.clip.always)
        new_model, new_readout, new_state = adam_update(model, readout, g, state, config.lr)
        if not all(np.all(np.isfinite(v)) for v in new_model.tensors().values()):
            raise TrainingDivergedError(
                f"parameters became non-finite in epoch {epoch}", step=epoch, model=model, readout=readout, history=history
            )
        model, readout, state = new_model, new_readout, new_state
        history.append(loss * scale)
        if callback is not None:
            callback(epoch, history[-1], model, readout)
        if config.early_stop and _plateaued(history, config.patience, config.min_rel_improvement):
            break
    return model, readout, np.array(history)


def refit_readout(model, z_states, observations, n_latent: int | None = None, reg: float = 0.0) -> Readout:
    """Least-squares readout from (a subset of) latent states onto observations.

    Used to evaluate partially observed training in the full observation
    space; the first ``n_latent`` latent coordinates are regressed and the rest
    get zero weight.
    """
    Z = np.asarray(z_states, dtype=float)[:, : model.hidden_size]
    Y = np.asarray(observations, dtype=float)
    if Z.shape[0] != Y.shape[0]:
        raise ShapeError("states and observations must have the same number of rows")
    k = model.hidden_size if n_latent is None else int(n_latent)
    if not 1 <= k <= model.hidden_size:
        raise ConfigError(f"n_latent must lie in [1, {model.hidden_size}], got {n_latent}")
    Zk = Z[:, :k]
    G = Zk.T @ Zk + reg * np.eye(k)
    Bk = np.linalg.solve(G, Zk.T @ Y).T
    B = np.zeros((Y.shape[1], model.hidden_size))
    B[:, :k] = Bk
    return Readout(B, reg)
