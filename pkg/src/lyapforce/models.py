"""Recurrent architectures as explicit maps z_t = F(z_{t-1}, s_t).

Every architecture provides a batched forward step that caches what its
vector-Jacobian product needs, the VJP itself (used by BPTT), and the
closed-form state Jacobian. States are plain arrays; for the LSTM the state
is the concatenation (h, c) of length 2M and the readout sees only h.

All shapes follow the row-vector convention: a batch of states is B x M',
inputs are B x N_in, and ``z @ W.T`` applies a weight matrix.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError, SingularMatrixError
from .systems import Trajectory

SCHEMA_VERSION = 1


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_finite(name, arrays):
    for key, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise ConfigError(f"{name}.{key} contains non-finite values")


class _Params:
    """Mixin: named tensor access for the frozen parameter dataclasses."""

    arch: ClassVar[str]

    def tensors(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def replace(self, **tensors):
        return dataclasses.replace(self, **tensors)

    def copy(self):
        return self.replace(**{k: v.copy() for k, v in self.tensors().items()})


@dataclass(frozen=True, eq=False)
class VanillaRnnParams(_Params):
    """z' = tanh(W z + B_in s + h)."""

    W: np.ndarray
    B_in: np.ndarray
    h: np.ndarray
    arch: ClassVar[str] = "rnn"

    def __post_init__(self):
        M = self.W.shape[0]
        if self.W.shape != (M, M) or self.B_in.ndim != 2 or self.B_in.shape[0] != M or self.h.shape != (M,):
            raise ShapeError("inconsistent vanilla RNN parameter shapes")
        _check_finite("rnn", self.tensors())

    hidden_size = property(lambda self: self.W.shape[0])
    state_size = property(lambda self: self.W.shape[0])
    input_size = property(lambda self: self.B_in.shape[1])


@dataclass(frozen=True, eq=False)
class PlrnnParams(_Params):
    """z' = A * z + W relu(z) + C s + h, with A the diagonal stored as a vector."""

    A: np.ndarray
    W: np.ndarray
    C: np.ndarray
    h: np.ndarray
    arch: ClassVar[str] = "plrnn"

    def __post_init__(self):
        M = self.A.shape[0]
        if self.A.shape != (M,) or self.W.shape != (M, M) or self.C.ndim != 2 or self.C.shape[0] != M:
            raise ShapeError("inconsistent PLRNN parameter shapes")
        if self.h.shape != (M,):
            raise ShapeError("inconsistent PLRNN bias shape")
        _check_finite("plrnn", self.tensors())

    hidden_size = property(lambda self: self.A.shape[0])
    state_size = property(lambda self: self.A.shape[0])
    input_size = property(lambda self: self.C.shape[1])


_LSTM_GATES = ("i", "f", "g", "o")


@dataclass(frozen=True, eq=False)
class LstmParams(_Params):
    W_ii: np.ndarray
    W_hi: np.ndarray
    W_if: np.ndarray
    W_hf: np.ndarray
    W_ig: np.ndarray
    W_hg: np.ndarray
    W_io: np.ndarray
    W_ho: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_g: np.ndarray
    b_o: np.ndarray
    arch: ClassVar[str] = "lstm"

    def __post_init__(self):
        M, N = self.W_ii.shape
        for g in _LSTM_GATES:
            if getattr(self, f"W_i{g}").shape != (M, N) or getattr(self, f"W_h{g}").shape != (M, M):
                raise ShapeError(f"inconsistent LSTM weight shapes for gate {g}")
            if getattr(self, f"b_{g}").shape != (M,):
                raise ShapeError(f"inconsistent LSTM bias shape for gate {g}")
        _check_finite("lstm", self.tensors())

    hidden_size = property(lambda self: self.W_hi.shape[0])
    state_size = property(lambda self: 2 * self.W_hi.shape[0])
    input_size = property(lambda self: self.W_ii.shape[1])


@dataclass(frozen=True, eq=False)
class GruParams(_Params):
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray
    arch: ClassVar[str] = "gru"

    def __post_init__(self):
        M, N = self.W_z.shape
        for k in "zrh":
            if getattr(self, f"W_{k}").shape != (M, N) or getattr(self, f"U_{k}").shape != (M, M):
                raise ShapeError(f"inconsistent GRU weight shapes for {k}")
            if getattr(self, f"b_{k}").shape != (M,):
                raise ShapeError(f"inconsistent GRU bias shape for {k}")
        _check_finite("gru", self.tensors())

    hidden_size = property(lambda self: self.U_z.shape[0])
    state_size = property(lambda self: self.U_z.shape[0])
    input_size = property(lambda self: self.W_z.shape[1])


PARAM_TYPES = {cls.arch: cls for cls in (VanillaRnnParams, PlrnnParams, LstmParams, GruParams)}


@dataclass(frozen=True, eq=False)
class Readout:
    """Linear map x_hat = B z from the observed part of the state."""

    B: np.ndarray
    reg: float = 0.0

    def __post_init__(self):
        B = np.asarray(self.B)
        if B.dtype != np.longdouble:
            B = B.astype(float)
        if B.ndim != 2:
            raise ShapeError(f"readout matrix must be 2-D, got shape {B.shape}")
        if not self.reg >= 0:
            raise ConfigError(f"readout regularizer must be >= 0, got {self.reg}")
        object.__setattr__(self, "B", B)

    def tensors(self):
        return {"B": self.B}

    def replace(self, **tensors):
        return dataclasses.replace(self, **tensors)

    n_obs = property(lambda self: self.B.shape[0])
    n_latent = property(lambda self: self.B.shape[1])


# ---------------------------------------------------------------------------
# Architecture kernels
#
# pack() converts named parameters into the layout the kernels use; forward()
# and backward() work on batches (leading axis) and backward() accumulates
# gradients in place into a dict shaped like pack()'s output.


class _RnnKernel:
    @staticmethod
    def pack(p):
        return {"W": p.W, "B_in": p.B_in, "h": p.h}

    @staticmethod
    def forward(k, z, s):
        z_new = np.tanh(z @ k["W"].T + s @ k["B_in"].T + k["h"])
        return z_new, (z, s, z_new)

    @staticmethod
    def backward(k, cache, dz_new, grads):
        z, s, z_new = cache
        dpre = dz_new * (1.0 - z_new * z_new)
        grads["W"] += dpre.T @ z
        grads["B_in"] += dpre.T @ s
        grads["h"] += dpre.sum(axis=0)
        return dpre @ k["W"]

    @staticmethod
    def unpack_grads(g):
        return dict(g)

    @staticmethod
    def jacobian(p, z, s):
        z_new = np.tanh(p.W @ z + p.B_in @ s + p.h)
        return (1.0 - z_new**2)[:, None] * p.W


class _PlrnnKernel:
    @staticmethod
    def pack(p):
        return {"A": p.A, "W": p.W, "C": p.C, "h": p.h}

    @staticmethod
    def forward(k, z, s):
        act = np.maximum(z, 0.0)
        z_new = k["A"] * z + act @ k["W"].T + s @ k["C"].T + k["h"]
        return z_new, (z, s, act)

    @staticmethod
    def backward(k, cache, dz_new, grads):
        z, s, act = cache
        grads["A"] += (dz_new * z).sum(axis=0)
        grads["W"] += dz_new.T @ act
        grads["C"] += dz_new.T @ s
        grads["h"] += dz_new.sum(axis=0)
        # relu'(0) := 0, matching the indicator d_m = 1 only for z_m > 0
        return dz_new * k["A"] + (dz_new @ k["W"]) * (z > 0.0)

    @staticmethod
    def unpack_grads(g):
        return dict(g)

    @staticmethod
    def jacobian(p, z, s):
        return np.diag(p.A) + p.W * (z > 0.0)[None, :]


class _LstmKernel:
    @staticmethod
    def pack(p):
        return {
            "Wx": np.vstack([getattr(p, f"W_i{g}") for g in _LSTM_GATES]),
            "Wh": np.vstack([getattr(p, f"W_h{g}") for g in _LSTM_GATES]),
            "b": np.concatenate([getattr(p, f"b_{g}") for g in _LSTM_GATES]),
        }

    @staticmethod
    def forward(k, z, s):
        M = k["Wh"].shape[1]
        h, c = z[..., :M], z[..., M:]
        pre = s @ k["Wx"].T + h @ k["Wh"].T + k["b"]
        i = _sigmoid(pre[..., :M])
        f = _sigmoid(pre[..., M : 2 * M])
        g = np.tanh(pre[..., 2 * M : 3 * M])
        o = _sigmoid(pre[..., 3 * M :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        return np.concatenate([h_new, c_new], axis=-1), (h, c, s, i, f, g, o, tc)

    @staticmethod
    def backward(k, cache, dz_new, grads):
        h, c, s, i, f, g, o, tc = cache
        M = h.shape[-1]
        dh_new, dc_new = dz_new[:, :M], dz_new[:, M:]
        dc = dc_new + dh_new * o * (1.0 - tc * tc)
        dpre = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * c * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                dh_new * tc * o * (1.0 - o),
            ],
            axis=1,
        )
        grads["Wx"] += dpre.T @ s
        grads["Wh"] += dpre.T @ h
        grads["b"] += dpre.sum(axis=0)
        return np.concatenate([dpre @ k["Wh"], dc * f], axis=1)

    @staticmethod
    def unpack_grads(g):
        M = g["Wh"].shape[1]
        out = {}
        for n, gate in enumerate(_LSTM_GATES):
            rows = slice(n * M, (n + 1) * M)
            out[f"W_i{gate}"] = g["Wx"][rows]
            out[f"W_h{gate}"] = g["Wh"][rows]
            out[f"b_{gate}"] = g["b"][rows]
        return out

    @staticmethod
    def jacobian(p, z, s):
        M = p.hidden_size
        h, c = z[:M], z[M:]
        i = _sigmoid(p.W_ii @ s + p.W_hi @ h + p.b_i)
        f = _sigmoid(p.W_if @ s + p.W_hf @ h + p.b_f)
        g = np.tanh(p.W_ig @ s + p.W_hg @ h + p.b_g)
        o = _sigmoid(p.W_io @ s + p.W_ho @ h + p.b_o)
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        dc_dh = (
            (c * f * (1 - f))[:, None] * p.W_hf
            + (g * i * (1 - i))[:, None] * p.W_hi
            + (i * (1 - g * g))[:, None] * p.W_hg
        )
        dc_dc = np.diag(f)
        dtc = o * (1 - tc * tc)
        dh_dh = (tc * o * (1 - o))[:, None] * p.W_ho + dtc[:, None] * dc_dh
        dh_dc = np.diag(dtc * f)
        return np.block([[dh_dh, dh_dc], [dc_dh, dc_dc]])


class _GruKernel:
    @staticmethod
    def pack(p):
        return {k: getattr(p, k) for k in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")}

    @staticmethod
    def forward(k, h, s):
        u = _sigmoid(s @ k["W_z"].T + h @ k["U_z"].T + k["b_z"])
        r = _sigmoid(s @ k["W_r"].T + h @ k["U_r"].T + k["b_r"])
        rh = r * h
        n = np.tanh(s @ k["W_h"].T + rh @ k["U_h"].T + k["b_h"])
        h_new = (1.0 - u) * n + u * h
        return h_new, (h, s, u, r, rh, n)

    @staticmethod
    def backward(k, cache, dh_new, grads):
        h, s, u, r, rh, n = cache
        dpre_n = dh_new * (1.0 - u) * (1.0 - n * n)
        dpre_u = dh_new * (h - n) * u * (1.0 - u)
        drh = dpre_n @ k["U_h"]
        dpre_r = drh * h * r * (1.0 - r)
        grads["W_h"] += dpre_n.T @ s
        grads["U_h"] += dpre_n.T @ rh
        grads["b_h"] += dpre_n.sum(axis=0)
        grads["W_z"] += dpre_u.T @ s
        grads["U_z"] += dpre_u.T @ h
        grads["b_z"] += dpre_u.sum(axis=0)
        grads["W_r"] += dpre_r.T @ s
        grads["U_r"] += dpre_r.T @ h
        grads["b_r"] += dpre_r.sum(axis=0)
        return dh_new * u + drh * r + dpre_u @ k["U_z"] + dpre_r @ k["U_r"]

    @staticmethod
    def unpack_grads(g):
        return dict(g)

    @staticmethod
    def jacobian(p, h, s):
        u = _sigmoid(p.W_z @ s + p.U_z @ h + p.b_z)
        r = _sigmoid(p.W_r @ s + p.U_r @ h + p.b_r)
        n = np.tanh(p.W_h @ s + p.U_h @ (r * h) + p.b_h)
        dn = (1.0 - u) * (1.0 - n * n)
        d_rh = np.diag(r) + (h * r * (1.0 - r))[:, None] * p.U_r
        return np.diag(u) + ((h - n) * u * (1.0 - u))[:, None] * p.U_z + dn[:, None] * (p.U_h @ d_rh)


KERNELS = {"rnn": _RnnKernel, "plrnn": _PlrnnKernel, "lstm": _LstmKernel, "gru": _GruKernel}


def kernel(model):
    try:
        return KERNELS[model.arch]
    except (AttributeError, KeyError):
        raise ConfigError(f"unsupported model type {type(model).__name__}") from None


def _input_vector(model, input):
    if input is None:
        return np.zeros(model.input_size)
    s = np.asarray(input, dtype=float)
    if s.shape != (model.input_size,):
        raise ShapeError(f"input must have shape ({model.input_size},), got {s.shape}")
    return s


def _state_vector(model, state):
    z = np.asarray(state, dtype=float)
    if z.shape != (model.state_size,):
        raise ShapeError(f"state must have shape ({model.state_size},), got {z.shape}")
    return z


def step(model, state, input=None) -> np.ndarray:
    """One application of the architecture's update; absent input means zeros."""
    z = _state_vector(model, state)
    s = _input_vector(model, input)
    k = kernel(model)
    return k.forward(k.pack(model), z, s)[0]


def jacobian(model, state, input=None) -> np.ndarray:
    """Exact dz_t/dz_{t-1} at ``state`` (2M x 2M block form for the LSTM)."""
    z = _state_vector(model, state)
    s = _input_vector(model, input)
    return kernel(model).jacobian(model, z, s)


def observed_part(model, z):
    """The slice of the state the readout sees (h for the LSTM)."""
    return z[..., : model.hidden_size]


def readout_apply(r: Readout, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != r.n_latent:
        raise ShapeError(f"readout expects latent size {r.n_latent}, got {z.shape[-1]}")
    return z @ r.B.T


# ---------------------------------------------------------------------------
# Readout inversion

_COND_LIMIT = 1e12


class ReadoutInverse:
    """Precomputed map x -> z_tilde and its vector-Jacobian product w.r.t. B.

    Works with the smaller Gram matrix: for N <= M, z = B^T (B B^T + reg I)^-1 x
    (the minimum-norm preimage when reg = 0); for N > M,
    z = (B^T B + reg I)^-1 B^T x. Both equal (B^T B + reg I)^-1 B^T x whenever
    that matrix is invertible.
    """

    def __init__(self, r: Readout):
        B = r.B
        N, M = B.shape
        self.B = B
        self.wide = N <= M
        gram = B @ B.T if self.wide else B.T @ B
        gram = gram + r.reg * np.eye(gram.shape[0])
        if not np.all(np.isfinite(gram)) or np.linalg.cond(gram) > _COND_LIMIT:
            raise SingularMatrixError(
                "readout normal matrix is singular or ill-conditioned; use a ridge term reg > 0"
            )
        self.gram_inv = np.linalg.inv(gram)
        self.gram_inv = 0.5 * (self.gram_inv + self.gram_inv.T)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.B.shape[0]:
            raise ShapeError(f"observation must have {self.B.shape[0]} entries, got {x.shape[-1]}")
        if self.wide:
            return (x @ self.gram_inv) @ self.B
        return (x @ self.B) @ self.gram_inv

    def vjp(self, x, z_tilde, g):
        """dL/dB given upstream dL/dz_tilde = g; x, z_tilde, g are K x N, K x M, K x M."""
        B = self.B
        if self.wide:
            y = x @ self.gram_inv
            v = (g @ B.T) @ self.gram_inv
            return y.T @ g - v.T @ z_tilde - y.T @ (v @ B)
        u = g @ self.gram_inv
        return x.T @ u - (z_tilde @ B.T).T @ u - (u @ B.T).T @ z_tilde


def invert_readout(r: Readout, x) -> np.ndarray:
    """Control value z_tilde = (B^T B + reg I)^-1 B^T x (minimum-norm preimage if N < M)."""
    return ReadoutInverse(r)(x)


# ---------------------------------------------------------------------------
# Rollouts


def initial_state(model, readout: Readout | None = None, x=None) -> np.ndarray:
    """Latent state from an observation by readout inversion (cell state zero), else zeros."""
    z = np.zeros(model.state_size)
    if readout is not None and x is not None:
        z[: model.hidden_size] = invert_readout(readout, x)
    return z


def rollout(model, z1, T: int, inputs=None) -> np.ndarray:
    """Latent orbit z_1..z_T (T x M') from z1."""
    if T < 1:
        raise ConfigError(f"rollout length must be >= 1, got {T}")
    z = _state_vector(model, z1)
    k = kernel(model)
    packed = k.pack(model)
    if inputs is None:
        S = np.zeros((T, model.input_size))
    else:
        S = np.asarray(inputs, dtype=float)
        if S.shape != (T, model.input_size):
            raise ShapeError(f"inputs must have shape ({T}, {model.input_size}), got {S.shape}")
    out = np.empty((T, z.size))
    out[0] = z
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, T):
            z = k.forward(packed, z, S[t])[0]
            if not np.all(np.isfinite(z)):
                raise DivergenceError(f"model orbit diverged at step {t}", step=t)
            out[t] = z
    return out


def generate(model, readout: Readout, z1, T: int, inputs=None, dt: float = 1.0) -> Trajectory:
    """Free-running rollout mapped through the readout (T observation rows)."""
    Z = rollout(model, z1, T, inputs)
    return Trajectory(readout_apply(readout, observed_part(model, Z)), dt=dt, name=f"{model.arch}-generated")


# ---------------------------------------------------------------------------
# Initialization and checkpoints

DEFAULT_HIDDEN = {"rnn": 32, "plrnn": 32, "lstm": 32, "gru": 32}


def init_params(arch: str, M: int, N_in: int, N_out: int, seed: int = 0):
    """Seeded initialization: U(-1/sqrt(M), 1/sqrt(M)) weights, zero biases."""
    if arch not in PARAM_TYPES:
        raise ConfigError(f"unknown architecture {arch!r}; expected one of {sorted(PARAM_TYPES)}")
    for name, v in (("M", M), ("N_in", N_in), ("N_out", N_out)):
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
            raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(M)

    def U(*shape):
        return rng.uniform(-bound, bound, size=shape)

    if arch == "rnn":
        model = VanillaRnnParams(W=U(M, M), B_in=U(M, N_in), h=np.zeros(M))
    elif arch == "plrnn":
        model = PlrnnParams(A=rng.uniform(0.3, 0.9, size=M), W=U(M, M), C=U(M, N_in), h=np.zeros(M))
    elif arch == "lstm":
        t = {}
        for g in _LSTM_GATES:
            t[f"W_i{g}"] = U(M, N_in)
            t[f"W_h{g}"] = U(M, M)
        t.update({f"b_{g}": np.zeros(M) for g in _LSTM_GATES})
        model = LstmParams(**t)
    else:
        t = {}
        for key in "zrh":
            t[f"W_{key}"] = U(M, N_in)
            t[f"U_{key}"] = U(M, M)
        t.update({f"b_{key}": np.zeros(M) for key in "zrh"})
        model = GruParams(**t)
    return model, Readout(U(N_out, M))


def checkpoint_dict(model, readout: Readout, extra: dict | None = None) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "arch": model.arch,
        "sizes": {"M": int(model.hidden_size), "N_in": int(model.input_size), "N_out": int(readout.n_obs)},
        "params": {k: np.asarray(v).tolist() for k, v in model.tensors().items()},
        "readout": {"B": readout.B.tolist(), "reg": float(readout.reg)},
    }
    if extra:
        doc.update(extra)
    return doc


def save_checkpoint(path, model, readout: Readout, extra: dict | None = None) -> None:
    # json writes repr(float): shortest round-trip digits, exact for doubles
    Path(path).write_text(json.dumps(checkpoint_dict(model, readout, extra)) + "\n")


def checkpoint_from_dict(doc: dict):
    try:
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported checkpoint schema_version {doc.get('schema_version')!r}")
        cls = PARAM_TYPES[doc["arch"]]
        params = {k: np.asarray(v, dtype=float) for k, v in doc["params"].items()}
        model = cls(**params)
        readout = Readout(np.asarray(doc["readout"]["B"], dtype=float), float(doc["readout"].get("reg", 0.0)))
    except KeyError as exc:
        raise ConfigError(f"checkpoint is missing field {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"malformed checkpoint: {exc}") from None
    if readout.n_latent != model.hidden_size:
        raise ShapeError("readout latent size does not match the model")
    return model, readout


def load_checkpoint(path):
    """Returns (model, readout, full JSON document)."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed checkpoint JSON ({exc})") from None
    model, readout = checkpoint_from_dict(doc)
    return model, readout, doc
