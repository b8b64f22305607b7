"""Differentiable acyclicity penalties and their stability benchmark.

All penalties act on a square weight matrix ``W`` through its elementwise
square ``A = W * W``:

* ``exp``     Tr(exp(A)) - d
* ``poly``    Tr((I - A/d)^d) - d
* ``log``     -logdet(alpha I - A) + d log(alpha), only defined while rho(A) < alpha
* ``rho``     spectral radius of A
* ``norm``    -logdet(alpha I - A/||A||_1) + d log(alpha)

``norm`` is invariant to rescaling W, so it never leaves its domain.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla

from . import ndcore as nd

DEFAULT_ALPHA = 1.001
# |value| or gradient norm past this counts as an explosion in the benchmark
EXPLODE_LIMIT = 1e12
VANISH_LIMIT = 1e-12


class FeasibilityError(ArithmeticError):
    """The log-det penalty was evaluated outside rho(W*W) < alpha."""

    def __init__(self, message: str, rho: float):
        super().__init__(message)
        self.rho = rho


class DegenerateSpectrumWarning(RuntimeWarning):
    pass


class Kind(str, Enum):
    EXP = "exp"
    POLY = "poly"
    LOG = "log"
    RHO = "rho"
    NORM = "norm"


def _square_input(W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise nd.ShapeError(f"expected a square matrix, got shape {W.shape}")
    return W


def norm1(A: np.ndarray) -> float:
    """Induced 1-norm: maximum absolute column sum."""
    return float(np.abs(A).sum(axis=0).max()) if A.size else 0.0


def spectral_radius(A: np.ndarray) -> float:
    return float(np.abs(np.linalg.eigvals(A)).max()) if A.size else 0.0


# ---------------------------------------------------------------- h_norm

def h_norm(W, alpha: float = DEFAULT_ALPHA, eps_zero: float = 1e-12) -> float:
    W = _square_input(W)
    A = W * W
    c = norm1(A)
    if c <= eps_zero:
        return 0.0
    d = W.shape[0]
    logdet, _ = nd.lu_logdet(alpha * np.eye(d) - A / c)
    return -logdet + d * math.log(alpha)


def h_norm_grad(W, alpha: float = DEFAULT_ALPHA, eps_zero: float = 1e-12,
                through_norm: bool = False) -> np.ndarray:
    """(2/c) (alpha I - A/c)^{-T} * W with c = ||W*W||_1 held fixed.

    ``through_norm`` adds the subgradient of the 1-norm scaling term.
    """
    W = _square_input(W)
    A = W * W
    c = norm1(A)
    if c <= eps_zero:
        return np.zeros_like(W)
    d = W.shape[0]
    M = alpha * np.eye(d) - A / c
    _, factors = nd.lu_logdet(M)
    inv_t = sla.lu_solve(factors, np.eye(d), check_finite=False).T
    grad = (2.0 / c) * inv_t * W
    if through_norm:
        # d/dc of -logdet(alpha I - A/c) = -tr(M^{-1} A) / c^2
        dh_dc = -float(np.sum(inv_t * A)) / (c * c)
        col = int(A.sum(axis=0).argmax())
        grad[:, col] += dh_dc * 2.0 * W[:, col]
    return grad


def h_norm_tape(W_sq: nd.Tensor, alpha: float = DEFAULT_ALPHA, eps_zero: float = 1e-12,
                through_norm: bool = False) -> nd.Tensor:
    """Batched h_norm on the tape, fed with the elementwise square ``W*W``.

    Taking the square directly lets callers pass a sum of squares (the
    effective adjacency of a multi-unit first layer) without a square root.
    The 1-norm is detached unless ``through_norm`` is set, which yields the
    same direction as :func:`h_norm_grad`.  Returns one value per matrix.
    """
    d = W_sq.shape[-1]
    c_node = nd.norm1(W_sq)
    c = c_node.value
    live = c > eps_zero
    safe = np.where(live, c, 1.0)
    if through_norm:
        scale = nd.reciprocal(c_node + (~live).astype(np.float64))
        scale = scale * live.astype(np.float64)
    else:
        scale = nd.const(np.where(live, 1.0 / safe, 0.0))
    A = W_sq * nd.reshape(scale, scale.shape + (1, 1))
    M = nd.const(alpha * np.eye(d)) - A
    return -nd.logdet_pd(M) + d * math.log(alpha)


# ---------------------------------------------------------------- comparators

def h_log(W, alpha: float = DEFAULT_ALPHA) -> float:
    W = _square_input(W)
    A = W * W
    d = W.shape[0]
    rho = spectral_radius(A)
    if rho >= alpha:
        raise FeasibilityError(f"h_log infeasible: rho(W*W)={rho:.6g} >= alpha={alpha}", rho)
    logdet, _ = nd.lu_logdet(alpha * np.eye(d) - A)
    return -logdet + d * math.log(alpha)


def h_log_grad(W, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    W = _square_input(W)
    A = W * W
    d = W.shape[0]
    rho = spectral_radius(A)
    if rho >= alpha:
        raise FeasibilityError(f"h_log infeasible: rho(W*W)={rho:.6g} >= alpha={alpha}", rho)
    return 2.0 * np.linalg.inv(alpha * np.eye(d) - A).T * W


def h_log_tape(W_sq: nd.Tensor, alpha: float = DEFAULT_ALPHA) -> nd.Tensor:
    """Batched h_log on the tape; raises FeasibilityError outside rho < alpha."""
    d = W_sq.shape[-1]
    rho = np.abs(np.linalg.eigvals(W_sq.value)).max(axis=-1)
    worst = float(np.max(rho))
    if worst >= alpha:
        raise FeasibilityError(f"h_log infeasible: rho(W*W)={worst:.6g} >= alpha={alpha}", worst)
    M = nd.const(alpha * np.eye(d)) - W_sq
    return -nd.logdet_pd(M) + d * math.log(alpha)


def h_exp(W) -> float:
    W = _square_input(W)
    with np.errstate(over="ignore", invalid="ignore"):
        E = sla.expm(W * W)
        val = float(np.trace(E)) - W.shape[0]
    return val if np.isfinite(val) else math.inf


def h_exp_grad(W) -> np.ndarray:
    W = _square_input(W)
    with np.errstate(over="ignore", invalid="ignore"):
        return sla.expm(W * W).T * 2.0 * W


def _poly_powers(W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = W.shape[0]
    B = np.eye(d) - W * W / d
    prev = np.eye(d)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(d - 1):
            prev = prev @ B
        return prev, prev @ B


def h_poly(W) -> float:
    W = _square_input(W)
    _, full = _poly_powers(W)
    val = float(np.trace(full)) - W.shape[0]
    return val if np.isfinite(val) else math.inf


def h_poly_grad(W) -> np.ndarray:
    W = _square_input(W)
    before, _ = _poly_powers(W)
    # d Tr(B^d)/dA = -(B^{d-1})^T
    with np.errstate(over="ignore", invalid="ignore"):
        return -before.T * 2.0 * W


def _power_iteration(A: np.ndarray, iters: int, tol: float) -> tuple[float, np.ndarray, bool]:
    v = np.ones(A.shape[0]) / math.sqrt(A.shape[0])
    lam = 0.0
    for _ in range(iters):
        w = A @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v, True
        w /= norm
        if abs(norm - lam) <= tol * max(1.0, norm) and np.linalg.norm(w - v) <= tol:
            return float(norm), w, True
        v, lam = w, norm
    return float(lam), v, False


def h_rho(W, power_iters: int = 100, tol: float = 1e-8) -> float:
    W = _square_input(W)
    rho, _, _ = _power_iteration(W * W, power_iters, tol)
    return rho


def h_rho_grad(W, power_iters: int = 100, tol: float = 1e-8) -> np.ndarray:
    """2W * (u v^T)/(u^T v) from dominant left/right power-iteration vectors.

    Warns with :class:`DegenerateSpectrumWarning` when either iteration fails
    to settle or the eigenvectors are (numerically) orthogonal.
    """
    W = _square_input(W)
    A = W * W
    rho, v, ok_right = _power_iteration(A, power_iters, tol)
    _, u, ok_left = _power_iteration(A.T, power_iters, tol)
    if rho == 0.0:
        return np.zeros_like(W)
    denom = float(u @ v)
    if not (ok_right and ok_left) or abs(denom) < 1e-12:
        warnings.warn("spectral radius gradient is ill-defined (repeated or non-dominant "
                      "leading eigenvalue)", DegenerateSpectrumWarning, stacklevel=2)
        if abs(denom) < 1e-12:
            return np.zeros_like(W)
    return 2.0 * W * np.outer(u, v) / denom


@dataclass(frozen=True)
class PenaltyResult:
    value: float
    grad: np.ndarray
    overflow: bool
    degenerate: bool = False


@dataclass(frozen=True)
class AcyclicPenalty:
    kind: Kind = Kind.NORM
    alpha: float = DEFAULT_ALPHA
    power_iters: int = 100
    eps_zero: float = 1e-12
    through_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not self.alpha > 1:
            raise ValueError(f"alpha must be > 1, got {self.alpha}")
        if self.power_iters < 1:
            raise ValueError(f"power_iters must be >= 1, got {self.power_iters}")

    def value(self, W) -> float:
        if self.kind is Kind.NORM:
            return h_norm(W, self.alpha, self.eps_zero)
        if self.kind is Kind.LOG:
            return h_log(W, self.alpha)
        if self.kind is Kind.EXP:
            return h_exp(W)
        if self.kind is Kind.POLY:
            return h_poly(W)
        return h_rho(W, self.power_iters)

    def grad(self, W) -> np.ndarray:
        if self.kind is Kind.NORM:
            return h_norm_grad(W, self.alpha, self.eps_zero, self.through_norm)
        if self.kind is Kind.LOG:
            return h_log_grad(W, self.alpha)
        if self.kind is Kind.EXP:
            return h_exp_grad(W)
        if self.kind is Kind.POLY:
            return h_poly_grad(W)
        return h_rho_grad(W, self.power_iters)

    def evaluate(self, W) -> PenaltyResult:
        """Value and gradient, folding overflow and infeasibility into a flag."""
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DegenerateSpectrumWarning)
            try:
                value = self.value(W)
                grad = self.grad(W)
            except FeasibilityError:
                return PenaltyResult(math.inf, np.full(np.shape(W), np.nan), True)
        degenerate = any(issubclass(w.category, DegenerateSpectrumWarning) for w in caught)
        gnorm = float(np.linalg.norm(grad)) if np.all(np.isfinite(grad)) else math.inf
        overflow = (not math.isfinite(value) or abs(value) > EXPLODE_LIMIT
                    or not math.isfinite(gnorm) or gnorm > EXPLODE_LIMIT)
        return PenaltyResult(value, grad, overflow, degenerate)


# ---------------------------------------------------------------- benchmark

class Family(str, Enum):
    UNIFORM = "uniform"
    CYCLE = "cycle"


@dataclass(frozen=True)
class BenchMatrixSpec:
    """One benchmark matrix.

    ``uniform``: d x d entries i.i.d. in [0, k] (the pattern is drawn in
    [0, 1] from ``seed`` and scaled by k, so sweeping k keeps it fixed).
    ``cycle``: the directed d-cycle with weights +-0.5, signs from ``seed``.
    """

    family: Family
    dim: int
    k: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))

    @property
    def param(self) -> float:
        return self.k if self.family is Family.UNIFORM else self.dim

    def matrix(self) -> np.ndarray:
        rng = nd.Rng(self.seed)
        if self.family is Family.UNIFORM:
            return self.k * rng.uniform(0.0, 1.0, (self.dim, self.dim))
        signs = np.where(rng.random(self.dim) < 0.5, -1.0, 1.0)
        W = np.zeros((self.dim, self.dim))
        idx = np.arange(self.dim)
        W[idx, (idx + 1) % self.dim] = 0.5 * signs
        return W


BENCH_HEADER = ("penalty", "family", "param", "value", "grad_norm", "runtime_ns",
                "overflow", "vanished")


def run_stability_bench(specs: Iterable[BenchMatrixSpec],
                        penalties: Sequence[AcyclicPenalty | Kind | str] = tuple(Kind),
                        ) -> list[dict]:
    """Evaluate each penalty on each matrix; one row per (penalty, matrix).

    ``vanished`` marks a value or gradient norm below 1e-12 on a matrix that
    contains a cycle (every benchmark family does).
    """
    pens = [p if isinstance(p, AcyclicPenalty) else AcyclicPenalty(Kind(p)) for p in penalties]
    rows = []
    for spec in specs:
        if not spec.param > 0 or not math.isfinite(spec.param):
            raise ValueError(f"sweep values must be positive and finite, got {spec.param}")
        W = spec.matrix()
        for pen in pens:
            start = time.perf_counter_ns()
            res = pen.evaluate(W)
            elapsed = max(time.perf_counter_ns() - start, 1)
            gnorm = float(np.linalg.norm(res.grad)) if np.all(np.isfinite(res.grad)) else math.inf
            if np.any(np.isnan(res.grad)):
                gnorm = math.nan
            vanished = (not res.overflow) and (abs(res.value) < VANISH_LIMIT or gnorm < VANISH_LIMIT)
            rows.append({
                "penalty": pen.kind.value,
                "family": spec.family.value,
                "param": spec.param,
                "value": res.value,
                "grad_norm": gnorm,
                "runtime_ns": elapsed,
                "overflow": int(res.overflow),
                "vanished": int(vanished),
            })
    return rows


def default_sweep(d: int = 20, ks: Sequence[float] = (1, 10, 100),
                  cycle_dims: Sequence[int] = (5, 10, 20, 30, 40, 50), seed: int = 0
                  ) -> list[BenchMatrixSpec]:
    specs = [BenchMatrixSpec(Family.UNIFORM, d, k, seed) for k in ks]
    specs += [BenchMatrixSpec(Family.CYCLE, n, 0.5, seed) for n in cycle_dims]
    return specs
