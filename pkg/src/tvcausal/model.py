"""Coarse-to-fine causal-matrix model.

A shared convolutional encoder turns each sliding window of the data into a
state vector, a two-stage parallel decoder turns the state into a causal
matrix (one "anchor" per window), and every time step gets its matrix by
linear interpolation between the two nearest anchors.  Three heads map
matrices and lagged data to reconstructions: linear, per-variable MLP, and
an increment ("ODE") form.

Shapes: ``d`` variables, ``L = tau + 1`` lag blocks, ``m`` hidden units per
variable.  Causal matrices are ``(d*m, d*L)`` with effects as rows; row
``i*m + j`` is hidden unit ``j`` of effect ``i``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .ndcore import ContractError, Rng, ShapeError, Tensor

HEAD_HIDDEN = 10


class Head(str, Enum):
    LINEAR = "linear"
    NONLINEAR = "nonlinear"
    ODE = "ode"


@dataclass
class ModelConfig:
    d: int
    tau: int = 1
    m: int = 1
    K: int = 10
    S: int = 5
    head: Head = Head.LINEAR
    channels: int = 16
    activation: str = "relu"
    head_hidden: int = HEAD_HIDDEN
    decoder_hidden: int = 0  # 0: affine decoder maps; >0: one hidden layer per map

    def __post_init__(self):
        self.head = Head(self.head)
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if self.K < 1 or self.S < 1 or self.m < 1:
            raise ValueError(f"need K, S, m >= 1 (got K={self.K}, S={self.S}, m={self.m})")
        if self.head is Head.LINEAR and self.m != 1:
            raise ValueError("the linear head requires m = 1")
        if self.head is Head.ODE and self.tau < 1:
            raise ValueError("the ODE head needs tau >= 1 (it reads X_{t-1})")
        if self.decoder_hidden < 0:
            raise ValueError("decoder_hidden must be >= 0")
        if self.activation not in nd.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def L(self) -> int:
        return self.tau + 1

    @property
    def kernel_width(self) -> int:
        return min(3, self.K)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["head"] = self.head.value
        return out


# ---------------------------------------------------------------- parameters

def init_params(cfg: ModelConfig, rng: Rng) -> dict[str, Tensor]:
    d, m, L, c, kw = cfg.d, cfg.m, cfg.L, cfg.channels, cfg.kernel_width
    dm, dL = d * m, d * L

    def normal(shape, fan_in, gain=1.0):
        return rng.normal(gain / math.sqrt(fan_in), shape)

    p = {
        "conv_w": normal((kw, d, c), kw * d),
        "conv_b": np.zeros(c),
        "enc_w": normal((c, dm), c),
        "enc_b": np.zeros(dm),
    }
    H = cfg.decoder_hidden
    if H:
        p.update({
            "dec1_h": normal((m, d, H), d),
            # spread hidden biases so each map starts piecewise linear, not a ray
            "dec1_hb": rng.uniform(-1.0, 1.0, (m, H)),
            "dec1_w": normal((m, H, dL), H),
            "dec1_b": np.zeros((m, dL)),
            "dec2_h": normal((dL, m, H), m),
            "dec2_hb": rng.uniform(-1.0, 1.0, (dL, H)),
            "dec2_w": normal((dL, H, dm), H, gain=0.1),
            "dec2_b": np.zeros((dL, dm)),
        })
    else:
        p.update({
            "dec1_w": normal((m, d, dL), d),
            "dec1_b": np.zeros((m, dL)),
            "dec2_w": normal((dL, m, dm), m, gain=0.1),
            "dec2_b": np.zeros((dL, dm)),
        })
    if cfg.head is not Head.LINEAR:
        H = cfg.head_hidden
        p.update({
            "mlp_w1": normal((d, m, H), m),
            "mlp_b1": np.zeros((d, H)),
            "mlp_w2": normal((d, H), H),
            "mlp_b2": np.zeros(d),
        })
    return {k: nd.param(v, name=k) for k, v in p.items()}


def decoder_param_count(d: int, m: int, L: int) -> tuple[int, int]:
    """(weights, biases) of the two decoder stages."""
    return m * d * d * L + d * L * m * d * m, m * d * L + d * L * d * m


# ---------------------------------------------------------------- encoder/decoder

def encode_windows(x_win, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Batched encoder: (A, N, K, d) windows -> (A, d*m) states.

    Temporal convolution (width min(3, K), ``channels`` filters, ReLU), mean
    over series, mean over time, then an affine map.  Averaging over series
    makes the state invariant to their order.
    """
    x = nd.const(x_win)
    if x.ndim != 4 or x.shape[2] != cfg.K or x.shape[3] != cfg.d:
        raise ShapeError(f"encoder expects (A, N, {cfg.K}, {cfg.d}) windows, got {x.shape}")
    h = nd.relu(nd.conv1d(x, params["conv_w"], params["conv_b"]))
    h = nd.mean(nd.mean(h, axis=1), axis=1)
    return h @ params["enc_w"] + params["enc_b"]


def encode_window(x_win, params, cfg: ModelConfig) -> Tensor:
    """Single window (N, K, d) -> state of length d*m."""
    x = nd.const(x_win)
    return nd.reshape(encode_windows(nd.reshape(x, (1,) + x.shape), params, cfg), (cfg.d * cfg.m,))


def decode_parallel(z, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(A, d*m) states -> (A, d*m, d*L) causal matrices.

    Stage 1 cuts each state into m chunks of length d and maps chunk i
    through its own affine map d -> d*L.  Stage 2 regroups the stage-1
    outputs by position into d*L vectors of length m and maps vector j
    through its own affine map m -> d*m; vector j becomes column j.
    The activation is applied before each affine map.  With
    ``decoder_hidden > 0`` each map gets one hidden layer of that width.
    """
    act = nd.ACTIVATIONS[cfg.activation]
    z = nd.const(z)
    single = z.ndim == 1
    if single:
        z = nd.reshape(z, (1, -1))
    d, m, L = cfg.d, cfg.m, cfg.L
    if z.shape[-1] != d * m:
        raise ShapeError(f"decoder expects states of length {d * m}, got {z.shape[-1]}")
    A = z.shape[0]
    H = cfg.decoder_hidden

    def parallel_map(x, stage, groups, width):
        # x: (A, groups, 1, in) through ``groups`` independent maps
        if H:
            x = nd.reshape(x @ params[f"{stage}_h"], (A, groups, H)) + params[f"{stage}_hb"]
            x = nd.reshape(act(x), (A, groups, 1, H))
        return nd.reshape(x @ params[f"{stage}_w"], (A, groups, width)) + params[f"{stage}_b"]

    z_tilde = parallel_map(nd.reshape(act(z), (A, m, 1, d)), "dec1", m, d * L)
    u = nd.reshape(nd.transpose(act(z_tilde), (0, 2, 1)), (A, d * L, 1, m))
    u_tilde = parallel_map(u, "dec2", d * L, d * m)
    W = nd.transpose(u_tilde, (0, 2, 1))
    return nd.reshape(W, (d * m, d * L)) if single else W


# ---------------------------------------------------------------- interpolation

@dataclass
class CoarseAnchors:
    times: np.ndarray  # 1-based, non-decreasing
    matrices: Tensor | np.ndarray  # (A, d*m, d*L)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        if self.times.size == 0:
            raise ValueError("need at least one anchor")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("anchor times must be non-decreasing")


def anchor_starts(T: int, K: int, S: int, tau: int) -> np.ndarray:
    """1-based window starts: floor((T-K)/S) strided windows plus one ending at T."""
    if T <= K + tau:
        raise ContractError(f"need T > K + tau (T={T}, K={K}, tau={tau})")
    n = (T - K) // S
    last = T - K + 1
    starts = [min(tau + 1 + a * S, last) for a in range(n)]
    return np.asarray(starts + [last], dtype=np.int64)


def interpolation_matrix(anchor_times, steps) -> np.ndarray:
    """Row t holds the two linear-interpolation weights over anchors.

    Steps before the first anchor or after the last copy the boundary anchor.
    """
    times = np.asarray(anchor_times)
    steps = np.asarray(steps)
    P = np.zeros((steps.size, times.size))
    for r, t in enumerate(steps):
        if t <= times[0]:
            P[r, 0] = 1.0
        elif t >= times[-1]:
            P[r, -1] = 1.0
        else:
            a = int(np.searchsorted(times, t, side="right")) - 1
            gap = times[a + 1] - times[a]
            s = t - times[a]
            P[r, a] = 1.0 - s / gap
            P[r, a + 1] = s / gap
    return P


def interpolate(anchors: CoarseAnchors, t) -> Tensor:
    """Causal matrix (or matrices, for an array of t) at time step(s) t."""
    mats = nd.const(anchors.matrices)
    scalar = np.ndim(t) == 0
    P = interpolation_matrix(anchors.times, np.atleast_1d(t))
    A, rows, cols = mats.shape
    out = nd.reshape(nd.const(P) @ nd.reshape(mats, (A, rows * cols)), (P.shape[0], rows, cols))
    return nd.reshape(out, (rows, cols)) if scalar else out


# ---------------------------------------------------------------- reconstruction

@dataclass
class WindowBatch:
    """Constant per-step reconstruction targets.

    For step t (1-based, t = tau+1..T) the rows are samples u = t..t+K-1
    clipped at T; ``mask`` zeroes clipped duplicates.
    """

    steps: np.ndarray        # (n,)
    cause: np.ndarray        # (n, K*N, d*L): [X_u | X_{u-1} | ... | X_{u-tau}]
    effect: np.ndarray       # (n, K*N, d):   X_u
    previous: np.ndarray     # (n, K*N, d):   X_{u-1} (zeros when tau = 0)
    mask: np.ndarray         # (n, K*N, 1)

    @property
    def n_samples(self) -> float:
        return float(self.mask.sum())


def cause_series(X: np.ndarray, tau: int, u: np.ndarray) -> np.ndarray:
    """[X_u | X_{u-1} | ... | X_{u-tau}] for 0-based indices u -> (N, len(u), d*L)."""
    if np.any(u - tau < 0):
        raise ContractError(f"missing history: need u >= tau={tau}")
    return np.concatenate([X[:, u - p, :] for p in range(tau + 1)], axis=-1)


def build_windows(X: np.ndarray, tau: int, K: int) -> WindowBatch:
    N, T, d = X.shape
    steps = np.arange(tau + 1, T + 1)
    offsets = np.arange(K)
    u = steps[:, None] - 1 + offsets[None, :]           # 0-based sample index
    mask = (u <= T - 1).astype(np.float64)
    u = np.minimum(u, T - 1)
    n = steps.size
    cause = cause_series(X, tau, u.ravel()).reshape(N, n, K, d * (tau + 1))
    effect = X[:, u.ravel(), :].reshape(N, n, K, d)
    prev = X[:, np.maximum(u.ravel() - 1, 0), :].reshape(N, n, K, d) if tau else np.zeros_like(effect)

    def arrange(a):
        # (N, n, K, c) -> (n, K*N, c)
        return np.ascontiguousarray(np.transpose(a, (1, 2, 0, 3)).reshape(n, K * N, a.shape[-1]))

    m = np.repeat(mask[:, :, None], N, axis=2).reshape(n, K * N, 1)
    return WindowBatch(steps, arrange(cause), arrange(effect), arrange(prev), m)


def ins_mask(cfg: ModelConfig) -> np.ndarray | None:
    """Zero mask for the instantaneous block under the ODE head."""
    if cfg.head is not Head.ODE:
        return None
    mask = np.ones((cfg.d * cfg.m, cfg.d * cfg.L))
    mask[:, :cfg.d] = 0.0
    return mask


def reconstruct(cfg: ModelConfig, W_steps, windows: WindowBatch, params: dict[str, Tensor]) -> Tensor:
    """Reconstruction of every sample in every step's window, (n, K*N, d)."""
    W = nd.const(W_steps)
    if cfg.head is Head.ODE:
        W = W * ins_mask(cfg)
    pre = nd.const(windows.cause) @ W.T                  # (n, KN, d*m)
    if cfg.head is Head.LINEAR:
        return pre
    act = nd.ACTIVATIONS[cfg.activation]
    n, rows, _ = pre.shape
    h = nd.reshape(act(pre), (n, rows, cfg.d, 1, cfg.m))
    hidden = act(nd.reshape(h @ params["mlp_w1"], (n, rows, cfg.d, cfg.head_hidden))
                 + params["mlp_b1"])
    out = nd.sum_(hidden * params["mlp_w2"], axis=-1) + params["mlp_b2"]
    if cfg.head is Head.ODE:
        out = out + windows.previous
    return out


def effective_adjacency_sq(W, cfg: ModelConfig) -> Tensor:
    """Sum over hidden units of squared weights: (..., d*m, d*L) -> (..., d, d*L)."""
    W = nd.const(W)
    lead = W.shape[:-2]
    grouped = nd.reshape(W, lead + (cfg.d, cfg.m, cfg.d * cfg.L))
    return nd.sum_(nd.square(grouped), axis=-2)


def effective_adjacency(W, m: int) -> np.ndarray:
    """Root-sum-of-squares over the m hidden units; |W| when m = 1."""
    W = np.asarray(W.value if isinstance(W, Tensor) else W, dtype=np.float64)
    rows, cols = W.shape[-2:]
    if rows % m:
        raise ShapeError(f"row count {rows} is not a multiple of m={m}")
    d = rows // m
    if m == 1:
        return np.abs(W)
    return np.sqrt(np.square(W.reshape(W.shape[:-2] + (d, m, cols))).sum(axis=-2))


# ---------------------------------------------------------------- model

@dataclass
class ForwardPass:
    anchors: CoarseAnchors
    W_steps: Tensor        # (n, d*m, d*L)
    recon: Tensor          # (n, K*N, d)
    decoder_calls: int


@dataclass
class CoarseToFineModel:
    cfg: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: ModelConfig, rng: Rng) -> "CoarseToFineModel":
        return cls(cfg, init_params(cfg, rng))

    def check_data(self, X: np.ndarray) -> None:
        if X.ndim != 3 or X.shape[2] != self.cfg.d:
            raise ShapeError(f"data must be (N, T, {self.cfg.d}), got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("data contains non-finite values")

    def anchor_windows(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        T = X.shape[1]
        starts = anchor_starts(T, self.cfg.K, self.cfg.S, self.cfg.tau)
        idx = starts[:, None] - 1 + np.arange(self.cfg.K)[None, :]
        windows = np.transpose(X[:, idx, :], (1, 0, 2, 3))  # (A, N, K, d)
        return starts, windows

    def anchors(self, X: np.ndarray) -> CoarseAnchors:
        starts, windows = self.anchor_windows(X)
        z = encode_windows(windows, self.params, self.cfg)
        return CoarseAnchors(starts, decode_parallel(z, self.params, self.cfg))

    def forward(self, X: np.ndarray, windows: WindowBatch | None = None) -> ForwardPass:
        self.check_data(X)
        windows = windows or build_windows(X, self.cfg.tau, self.cfg.K)
        anchors = self.anchors(X)
        W_steps = interpolate(anchors, windows.steps)
        recon = reconstruct(self.cfg, W_steps, windows, self.params)
        return ForwardPass(anchors, W_steps, recon, len(anchors.times))

    def step_matrices(self, X: np.ndarray) -> np.ndarray:
        """Interpolated (n, d*m, d*L) matrices for t = tau+1..T, no tape kept."""
        anchors = self.anchors(X)
        return interpolate(anchors, np.arange(self.cfg.tau + 1, X.shape[1] + 1)).value

    def adjacency(self, W_steps: np.ndarray) -> np.ndarray:
        """Effective adjacency per step, ODE head's instantaneous block zeroed."""
        A = effective_adjacency(W_steps, self.cfg.m)
        if self.cfg.head is Head.ODE:
            A = A.copy()
            A[..., :self.cfg.d] = 0.0
        return A

    # -- checkpoints

    def to_json(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "params": {k: {"shape": list(v.shape), "data": v.value.ravel().tolist()}
                       for k, v in sorted(self.params.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CoarseToFineModel":
        cfg = ModelConfig(**obj["config"])
        params = {k: nd.param(np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]), name=k)
                  for k, v in obj["params"].items()}
        return cls(cfg, params)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "CoarseToFineModel":
        return cls.from_json(json.loads(Path(path).read_text()))
