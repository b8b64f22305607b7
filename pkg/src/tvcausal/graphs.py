"""Lag-augmented causal matrices, random ground truths, DAG checks and pruning.

Layout is effects-as-rows: a matrix for ``d`` variables and ``L = tau + 1``
lag blocks has shape ``(d, d * L)`` and entry ``(i, j + p * d)`` is the
effect of ``x[t - p, j]`` on ``x[t, i]``.  Block ``p = 0`` is instantaneous.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ndcore import Rng, ShapeError

WEIGHT_LOW, WEIGHT_HIGH = 0.3, 0.5


class GraphParameterError(ValueError):
    pass


@dataclass(frozen=True)
class CausalMatrix:
    weights: np.ndarray
    d: int
    num_lags: int

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.shape != (self.d, self.d * self.num_lags):
            raise ShapeError(f"weights shape {w.shape} != ({self.d}, {self.d * self.num_lags})")
        if np.any(np.diag(w[:, :self.d]) != 0):
            raise ValueError("instantaneous block must have a zero diagonal")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_weights(cls, weights, d: int | None = None, zero_diagonal: bool = False):
        w = np.array(weights, dtype=np.float64)
        d = w.shape[0] if d is None else d
        if w.shape[1] % d:
            raise ShapeError(f"column count {w.shape[1]} is not a multiple of d={d}")
        if zero_diagonal:
            np.fill_diagonal(w[:, :d], 0.0)
        return cls(w, d, w.shape[1] // d)

    @property
    def tau(self) -> int:
        return self.num_lags - 1

    @property
    def ins(self) -> np.ndarray:
        return self.weights[:, :self.d]

    @property
    def lag(self) -> np.ndarray:
        return self.weights[:, self.d:]

    def block(self, p: int) -> np.ndarray:
        return self.weights[:, p * self.d:(p + 1) * self.d]

    def cause_major(self) -> np.ndarray:
        """Export view of shape ``(d * L, d)``: entry ``[j + p d, i]``."""
        return self.weights.T.copy()

    @classmethod
    def from_cause_major(cls, m):
        return cls.from_weights(np.asarray(m).T)


class BinaryGraph(CausalMatrix):
    def __post_init__(self):
        super().__post_init__()
        if not np.all((self.weights == 0) | (self.weights == 1)):
            raise ValueError("binary graph entries must be 0 or 1")

    @property
    def n_edges(self) -> int:
        return int(self.weights.sum())


@dataclass
class DynGraphTrajectory:
    """One matrix per time step, starting at ``start_t`` (1-based)."""

    start_t: int
    matrices: list[CausalMatrix] = field(default_factory=list)

    def __post_init__(self):
        if self.matrices:
            shape = (self.matrices[0].d, self.matrices[0].num_lags)
            for m in self.matrices:
                if (m.d, m.num_lags) != shape:
                    raise ShapeError("all matrices in a trajectory must share (d, L)")

    def __len__(self) -> int:
        return len(self.matrices)

    @property
    def d(self) -> int:
        return self.matrices[0].d

    @property
    def tau(self) -> int:
        return self.matrices[0].tau

    @property
    def times(self) -> list[int]:
        return list(range(self.start_t, self.start_t + len(self.matrices)))

    def at(self, t: int) -> CausalMatrix:
        idx = t - self.start_t
        if not 0 <= idx < len(self.matrices):
            raise IndexError(f"t={t} outside [{self.start_t}, {self.start_t + len(self) - 1}]")
        return self.matrices[idx]

    def stack(self) -> np.ndarray:
        return np.stack([m.weights for m in self.matrices])

    @property
    def is_binary(self) -> bool:
        return all(isinstance(m, BinaryGraph) for m in self.matrices)

    def to_json(self) -> dict:
        cast = int if self.is_binary else float
        return {
            "d": self.d,
            "tau": self.tau,
            "layout": "effect_major",
            "time_steps": [
                {"t": t, "weights": [[cast(v) for v in row] for row in m.weights]}
                for t, m in zip(self.times, self.matrices)
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DynGraphTrajectory":
        if obj.get("layout", "effect_major") != "effect_major":
            raise ValueError(f"unsupported layout {obj.get('layout')!r}")
        d, tau = int(obj["d"]), int(obj["tau"])
        steps = sorted(obj["time_steps"], key=lambda s: s["t"])
        if not steps:
            raise ValueError("trajectory has no time steps")
        ts = [int(s["t"]) for s in steps]
        if ts != list(range(ts[0], ts[0] + len(ts))):
            raise ValueError("time steps must be consecutive")
        mats = []
        for s in steps:
            w = np.asarray(s["weights"], dtype=np.float64)
            if w.shape != (d, d * (tau + 1)):
                raise ShapeError(f"step t={s['t']}: weights {w.shape} != ({d}, {d * (tau + 1)})")
            binary = np.all((w == 0) | (w == 1)) and all(
                isinstance(v, int) for row in s["weights"] for v in row)
            mats.append((BinaryGraph if binary else CausalMatrix)(w, d, tau + 1))
        return cls(ts[0], mats)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "DynGraphTrajectory":
        return cls.from_json(json.loads(Path(path).read_text()))

    @classmethod
    def constant(cls, m: CausalMatrix, start_t: int, n: int) -> "DynGraphTrajectory":
        return cls(start_t, [m] * n)


# ---------------------------------------------------------------- generation

def gen_er_ground_truth(d: int, tau: int, e: float = 2.0, rng: Rng | None = None) -> BinaryGraph:
    """Random DAG with exactly ``e*d`` instantaneous edges plus Bernoulli(e/d) lags."""
    rng = rng or Rng(0)
    n_edges = int(round(e * d))
    if d < 1 or tau < 0:
        raise GraphParameterError(f"need d >= 1 and tau >= 0, got d={d}, tau={tau}")
    if e <= 0 or n_edges > d * (d - 1) // 2 or abs(n_edges - e * d) > 1e-9:
        raise GraphParameterError(
            f"cannot place e*d={e * d:g} edges in a DAG on {d} nodes (max {d * (d - 1) // 2})")
    if e / d > 1:
        raise GraphParameterError(f"lag edge probability e/d={e / d:g} exceeds 1")
    order = rng.permutation(d)
    # pairs (a, b) with a before b in the topological order: order[a] -> order[b]
    a_idx, b_idx = np.triu_indices(d, k=1)
    chosen = rng.choice(a_idx.size, n_edges, replace=False)
    G = np.zeros((d, d * (tau + 1)))
    causes, effects = order[a_idx[chosen]], order[b_idx[chosen]]
    G[effects, causes] = 1.0
    if tau:
        G[:, d:] = (rng.random((d, d * tau)) < e / d).astype(np.float64)
    return BinaryGraph(G, d, tau + 1)


def assign_weights(g: BinaryGraph, eta: float = 1.5, rng: Rng | None = None) -> CausalMatrix:
    """Weights from [-0.5,-0.3] U [0.3,0.5], lag block p scaled by (1/eta)^p."""
    if not eta > 1:
        raise GraphParameterError(f"eta must exceed 1, got {eta}")
    rng = rng or Rng(0)
    shape = g.weights.shape
    mag = rng.uniform(WEIGHT_LOW, WEIGHT_HIGH, shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    decay = np.repeat((1.0 / eta) ** np.arange(g.num_lags), g.d)
    return CausalMatrix(g.weights * mag * sign * decay[None, :], g.d, g.num_lags)


# ---------------------------------------------------------------- structure

def topological_order(m) -> list[int] | None:
    """Kahn's algorithm over nonzero entries (``m[i, j] != 0`` means j -> i).

    Returns an order of the nodes, or None if there is a directed cycle.
    """
    A = np.asarray(m) != 0
    d = A.shape[0]
    indeg = A.sum(axis=1).astype(int)
    queue = deque(int(i) for i in np.flatnonzero(indeg == 0))
    order = []
    while queue:
        j = queue.popleft()
        order.append(j)
        for i in np.flatnonzero(A[:, j]):
            indeg[i] -= 1
            if indeg[i] == 0:
                queue.append(int(i))
    return order if len(order) == d else None


def is_dag(m) -> bool:
    m = m.ins if isinstance(m, CausalMatrix) else np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"is_dag expects a square matrix, got {m.shape}")
    return topological_order(m) is not None


def prune(w: CausalMatrix | np.ndarray, delta: float = 0.3) -> BinaryGraph:
    """Keep entries with ``|weight| > delta``; the instantaneous diagonal is dropped."""
    if delta < 0:
        raise GraphParameterError(f"delta must be >= 0, got {delta}")
    W = w.weights if isinstance(w, CausalMatrix) else np.asarray(w, dtype=np.float64)
    d = w.d if isinstance(w, CausalMatrix) else W.shape[0]
    G = (np.abs(W) > delta).astype(np.float64)
    np.fill_diagonal(G[:, :d], 0.0)
    return BinaryGraph(G, d, W.shape[1] // d)


def prune_trajectory(traj: DynGraphTrajectory, delta: float = 0.3) -> DynGraphTrajectory:
    return DynGraphTrajectory(traj.start_t, [prune(m, delta) for m in traj.matrices])
