"""Seeded synthetic time series: linear/nonlinear SEMs, Lorenz-96 and
time-varying-weight variants.

Time indices in files and trajectories are 1-based.  The first ``tau``
steps of every SEM series are pure noise (no history exists for them).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graphs import CausalMatrix, DynGraphTrajectory, is_dag, topological_order
from .ndcore import Rng, ShapeError

MLP_LOW, MLP_HIGH = 0.5, 2.0
MLP_HIDDEN = 100


class GenerationError(ValueError):
    pass


class DivergenceError(GenerationError):
    pass


@dataclass
class Dataset:
    data: np.ndarray  # (N, T, d)
    tau: int
    generator_tag: str
    noise_strength: float
    seed: int
    ground_truth: DynGraphTrajectory | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError(f"data must be (N, T, d), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise GenerationError("dataset contains non-finite values")
        gt = self.ground_truth
        if gt is not None and (gt.d != self.d or gt.tau != self.tau):
            raise ShapeError(f"ground truth (d={gt.d}, tau={gt.tau}) does not match "
                             f"data (d={self.d}, tau={self.tau})")

    @property
    def N(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    @property
    def d(self) -> int:
        return self.data.shape[2]

    def metadata(self) -> dict:
        meta = {"N": self.N, "T": self.T, "d": self.d, "tau": self.tau,
                "generator": self.generator_tag, "seed": self.seed,
                "noise": self.noise_strength}
        meta.update(self.extra)
        return meta

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["series", "t"] + [f"x{i}" for i in range(self.d)])
        for n in range(self.N):
            for t in range(self.T):
                writer.writerow([n, t + 1] + [repr(float(v)) for v in self.data[n, t]])
        return buf.getvalue()

    def save(self, stem) -> dict[str, Path]:
        """Write ``<stem>.csv``, ``<stem>.meta.json`` and (if known) ``<stem>.truth.json``."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        paths = {"csv": stem.with_suffix(".csv"), "meta": stem.with_suffix(".meta.json")}
        paths["csv"].write_text(self.to_csv())
        paths["meta"].write_text(json.dumps(self.metadata(), sort_keys=True) + "\n")
        if self.ground_truth is not None:
            paths["truth"] = stem.with_suffix(".truth.json")
            self.ground_truth.save(paths["truth"])
        return paths

    @classmethod
    def load(cls, csv_path, meta_path=None, truth_path=None) -> "Dataset":
        csv_path = Path(csv_path)
        meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".meta.json")
        if not meta_path.exists():
            raise FileNotFoundError(f"metadata sidecar not found: {meta_path}")
        meta = json.loads(meta_path.read_text())
        for key in ("N", "T", "d", "tau"):
            if key not in meta:
                raise ValueError(f"{meta_path}: missing field {key!r}")
        data = read_series_csv(csv_path, int(meta["N"]), int(meta["T"]), int(meta["d"]))
        truth = None
        truth_path = Path(truth_path) if truth_path else csv_path.with_suffix(".truth.json")
        if truth_path.exists():
            truth = DynGraphTrajectory.load(truth_path)
        return cls(data, int(meta["tau"]), meta.get("generator", "csv"),
                   float(meta.get("noise", math.nan)), int(meta.get("seed", 0)), truth)


def read_series_csv(path, N: int, T: int, d: int) -> np.ndarray:
    """Read the ``series,t,x0..x{d-1}`` layout into an (N, T, d) array."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["series", "t"] + [f"x{i}" for i in range(d)]
        if header != expected:
            raise ValueError(f"{path}: header {header} != {expected}")
        data = np.full((N, T, d), np.nan)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 2:
                raise ValueError(f"{path}:{lineno}: expected {d + 2} columns, got {len(row)}")
            n, t = int(row[0]), int(row[1])
            if not (0 <= n < N and 1 <= t <= T):
                raise ValueError(f"{path}:{lineno}: (series={n}, t={t}) outside N={N}, T={T}")
            data[n, t - 1] = [float(v) for v in row[2:]]
    if np.isnan(data).any():
        raise ValueError(f"{path}: missing rows for some (series, t)")
    return data


# ---------------------------------------------------------------- helpers

def _as_schedule(gt, T: int) -> tuple[list[CausalMatrix], int]:
    """Per-step matrices for t = tau+1..T (index 0 <-> t = tau+1)."""
    if isinstance(gt, CausalMatrix):
        return [gt] * (T - gt.tau), gt.tau
    mats = gt.matrices
    tau = gt.tau
    if gt.start_t != tau + 1 or len(mats) != T - tau:
        raise ShapeError(f"trajectory covers t={gt.start_t}..{gt.start_t + len(mats) - 1}, "
                         f"need {tau + 1}..{T}")
    return mats, tau


def _check_dags(mats) -> list[list[int]]:
    orders = []
    cache: dict[bytes, list[int]] = {}
    for m in mats:
        key = (m.ins != 0).tobytes()
        if key not in cache:
            order = topological_order(m.ins)
            if order is None:
                raise GenerationError("instantaneous block contains a directed cycle")
            cache[key] = order
        orders.append(cache[key])
    return orders


def _series_rngs(rng: Rng, N: int) -> list[Rng]:
    return rng.spawn(N)


def _trajectory(gt, T: int) -> DynGraphTrajectory:
    if isinstance(gt, DynGraphTrajectory):
        return gt
    return DynGraphTrajectory.constant(gt, gt.tau + 1, T - gt.tau)


# ---------------------------------------------------------------- linear SEM

def gen_linear_sem(gt, N: int, T: int, noise: float = 1.0, rng: Rng | None = None,
                   tag: str = "linear") -> Dataset:
    """X_t = W_t [X_t | X_{t-1} | ... | X_{t-tau}] + eps_t, eps ~ N(0, noise^2 I)."""
    rng = rng or Rng(0)
    mats, tau = _as_schedule(gt, T)
    orders = _check_dags(mats)
    d = mats[0].d
    eps = np.stack([r.normal(noise, (T, d)) for r in _series_rngs(rng, N)])
    X = np.zeros((N, T, d))
    X[:, :tau] = eps[:, :tau]
    for k, (m, order) in enumerate(zip(mats, orders)):
        t = tau + k
        base = eps[:, t].copy()
        for p in range(1, tau + 1):
            base += X[:, t - p] @ m.block(p).T
        ins = m.ins
        for i in order:
            X[:, t, i] = base[:, i] + X[:, t] @ ins[i]
    return Dataset(X, tau, tag, noise, rng.seed, _trajectory(gt, T))


# ---------------------------------------------------------------- nonlinear SEM

def _two_interval(rng: Rng, size, low=MLP_LOW, high=MLP_HIGH) -> np.ndarray:
    mag = rng.uniform(low, high, size)
    return np.where(rng.random(size) < 0.5, -mag, mag)


@dataclass
class _VarMLP:
    w1: np.ndarray  # (hidden, d*L) -- columns of non-parents unused
    b1: np.ndarray
    w2: np.ndarray
    b2: float


def gen_nonlinear_sem(gt, N: int, T: int, noise: float = 1.0, rng: Rng | None = None,
                      tag: str = "nonlinear") -> Dataset:
    """x_{t,i} = w2 . sigmoid(W1 u + b1) + b2 + eps, u = parent values times their weights.

    Each variable has its own 1-hidden-layer MLP (100 units) with every
    parameter drawn from [-2,-0.5] U [0.5,2].  Parents are the nonzero
    entries of the current causal matrix over lags 0..tau.
    """
    rng = rng or Rng(0)
    mats, tau = _as_schedule(gt, T)
    orders = _check_dags(mats)
    d, L = mats[0].d, mats[0].num_lags
    param_rng, noise_rng = rng.spawn(2)
    nets = [_VarMLP(_two_interval(param_rng, (MLP_HIDDEN, d * L)),
                    _two_interval(param_rng, MLP_HIDDEN),
                    _two_interval(param_rng, MLP_HIDDEN),
                    float(_two_interval(param_rng, 1)[0])) for _ in range(d)]
    eps = np.stack([r.normal(noise, (T, d)) for r in _series_rngs(noise_rng, N)])
    X = np.zeros((N, T, d))
    X[:, :tau] = eps[:, :tau]
    for k, (m, order) in enumerate(zip(mats, orders)):
        t = tau + k
        W = m.weights
        for i in order:
            cols = np.flatnonzero(W[i])
            if cols.size == 0:
                X[:, t, i] = eps[:, t, i]
                continue
            # cause vector [X_t | X_{t-1} | ...] restricted to parents
            lags, vars_ = np.divmod(cols, d)
            u = X[:, t - lags, vars_] * W[i, cols]
            net = nets[i]
            h = 1.0 / (1.0 + np.exp(-(u @ net.w1[:, cols].T + net.b1)))
            X[:, t, i] = h @ net.w2 + net.b2 + eps[:, t, i]
    ds = Dataset(X, tau, tag, noise, rng.seed, _trajectory(gt, T))
    ds.extra["mlp_params"] = {"hidden": MLP_HIDDEN, "interval": [MLP_LOW, MLP_HIGH]}
    ds.nets = nets  # exposed for inspection in tests
    return ds


# ---------------------------------------------------------------- Lorenz-96

def lorenz96_drift(x: np.ndarray, F: float) -> np.ndarray:
    """-x_{i-1}(x_{i-2} - x_{i+1}) - x_i + F along the last axis (cyclic)."""
    return (-np.roll(x, 1, -1) * (np.roll(x, 2, -1) - np.roll(x, -1, -1)) - x + F)


def lorenz96_graph(d: int) -> CausalMatrix:
    """Lag-1 parents x_{i-2}, x_{i-1}, x_i, x_{i+1}; no instantaneous edges."""
    W = np.zeros((d, 2 * d))
    for i in range(d):
        for j in (i - 2, i - 1, i, i + 1):
            W[i, d + j % d] = 1.0
    return CausalMatrix(W, d, 2)


def gen_lorenz96(d: int, N: int, T: int, F: float = 5.0, dt: float = 0.02,
                 noise: float = 0.05, rng: Rng | None = None, init_var: float = 0.01) -> Dataset:
    """Euler steps x_{t+1} = x_t + dt (drift + dw), dw ~ N(0, noise) (variance)."""
    if d < 4:
        raise GenerationError(f"Lorenz-96 needs d >= 4, got {d}")
    rng = rng or Rng(0)
    X = np.zeros((N, T, d))
    for n, r in enumerate(_series_rngs(rng, N)):
        x = r.normal(math.sqrt(init_var), d)
        dw = r.normal(math.sqrt(noise), (T, d))
        X[n, 0] = x
        for t in range(1, T):
            x = x + dt * (lorenz96_drift(x, F) + dw[t])
            if not np.all(np.abs(x) <= 1e6):
                raise DivergenceError(f"Lorenz-96 trajectory diverged at t={t + 1} with dt={dt}")
            X[n, t] = x
    ds = Dataset(X, 1, "lorenz96", noise, rng.seed, _trajectory(lorenz96_graph(d), T))
    ds.extra.update({"F": F, "dt": dt})
    return ds


# ---------------------------------------------------------------- dynamic weights

@dataclass
class DynWeightSchedule:
    """W_t = W_0 cos(angle) where the selector is < 0.5, else W_0 sin(angle).

    ``angle = (t / P) * (pi / E)``; with P = T and E = 1 this is (pi/T) t.
    ``period_scale=None`` means P = T of the generated series.
    """

    base: CausalMatrix
    phase_selector: np.ndarray
    period_scale: float | None = None
    intensity_scale: float = 1.0

    def __post_init__(self):
        self.phase_selector = np.asarray(self.phase_selector, dtype=np.float64)
        if self.phase_selector.shape != self.base.weights.shape:
            raise ShapeError("phase selector must match the base matrix shape")
        if self.period_scale is not None and self.period_scale < 1:
            raise ValueError("period_scale must be >= 1")
        if self.intensity_scale < 1:
            raise ValueError("intensity_scale must be >= 1")

    @classmethod
    def random(cls, base: CausalMatrix, rng: Rng, period_scale=None, intensity_scale=1.0):
        return cls(base, rng.random(base.weights.shape), period_scale, intensity_scale)

    def cos_branch(self) -> np.ndarray:
        return self.phase_selector < 0.5

    def at(self, t: float, T: int | None = None) -> CausalMatrix:
        P = self.period_scale if self.period_scale is not None else T
        if P is None:
            raise ValueError("period_scale unset; pass the series length T")
        angle = (t / P) * (math.pi / self.intensity_scale)
        factor = np.where(self.cos_branch(), math.cos(angle), math.sin(angle))
        return CausalMatrix(self.base.weights * factor, self.base.d, self.base.num_lags)

    def trajectory(self, T: int) -> DynGraphTrajectory:
        tau = self.base.tau
        return DynGraphTrajectory(tau + 1, [self.at(t, T) for t in range(tau + 1, T + 1)])


def gen_dynamic(schedule: DynWeightSchedule, model: str, N: int, T: int,
                noise: float = 1.0, rng: Rng | None = None) -> Dataset:
    traj = schedule.trajectory(T)
    if model == "linear":
        ds = gen_linear_sem(traj, N, T, noise, rng, tag="dynamic-linear")
    elif model == "nonlinear":
        ds = gen_nonlinear_sem(traj, N, T, noise, rng, tag="dynamic-nonlinear")
    else:
        raise ValueError(f"unknown dynamic model {model!r}")
    ds.extra.update({"period_scale": schedule.period_scale,
                     "intensity_scale": schedule.intensity_scale})
    return ds


__all__ = [
    "Dataset", "DynWeightSchedule", "GenerationError", "DivergenceError",
    "gen_linear_sem", "gen_nonlinear_sem", "gen_lorenz96", "gen_dynamic",
    "lorenz96_drift", "lorenz96_graph", "read_series_csv", "is_dag",
]
