"""Central-path training of the coarse-to-fine model.

Each round minimises ``mu * (recon + beta * l1) + h`` with Adam for a fixed
number of steps, then shrinks ``mu`` by ``gamma``.  After the last round the
interpolated matrices are pruned at ``delta``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import ndcore as nd
from .acyclic import DEFAULT_ALPHA, FeasibilityError, h_log_tape, h_norm_tape
from .graphs import CausalMatrix, DynGraphTrajectory, prune_trajectory
from .model import CoarseToFineModel, Head, ModelConfig, build_windows, effective_adjacency_sq
from .ndcore import Rng, SingularityError

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, violations: int = 0):
        super().__init__(message)
        self.violations = violations


class Scope(str, Enum):
    ALL_STEPS = "all_steps"
    ANCHORS_ONLY = "anchors_only"


@dataclass
class TrainConfig:
    beta: float = 0.05
    mu0: float = 1.0
    gamma: float = 0.1
    rounds: int = 4
    inner_steps: int = 1000
    lr: float = 0.005
    delta: float = 0.3
    alpha: float = DEFAULT_ALPHA
    acyclic_scope: Scope = Scope.ALL_STEPS
    constraint: str = "norm"          # "norm" or "log" (ablation)
    through_norm: bool = False
    init_bias: float = 0.0            # constant added to the decoder output bias
    max_restarts: int = 5             # only reachable with constraint="log"
    seed: int = 0

    def __post_init__(self):
        self.acyclic_scope = Scope(self.acyclic_scope)
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.rounds < 1 or self.inner_steps < 1:
            raise ValueError("rounds and inner_steps must be >= 1")
        if self.constraint not in ("norm", "log"):
            raise ValueError(f"constraint must be 'norm' or 'log', got {self.constraint!r}")
        if self.delta < 0 or self.lr <= 0 or self.beta < 0:
            raise ValueError("delta, beta must be >= 0 and lr > 0")

    def mu_schedule(self) -> list[float]:
        return [self.mu0 * self.gamma ** k for k in range(self.rounds)]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["acyclic_scope"] = self.acyclic_scope.value
        return out


@dataclass
class LossParts:
    recon: nd.Tensor
    l1: nd.Tensor
    hnorm: nd.Tensor | None


@dataclass
class FitReport:
    trajectory: DynGraphTrajectory
    pruned: DynGraphTrajectory
    trace: list[dict]
    wall_clock: float
    model_config: dict
    train_config: dict
    final_hnorm: float | None
    feasibility_violations: int = 0
    model: CoarseToFineModel | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "model_config": self.model_config,
            "train_config": self.train_config,
            "final_hnorm": self.final_hnorm,
            "feasibility_violations": self.feasibility_violations,
            "wall_clock": self.wall_clock,
            "trace": self.trace,
        }


class Adam:
    def __init__(self, params: dict[str, nd.Tensor], lr: float,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[nd.Tensor, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.value = p.value - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def uses_constraint(model_cfg: ModelConfig) -> bool:
    return model_cfg.head is not Head.ODE


def loss_components(model: CoarseToFineModel, X: np.ndarray, windows, train: TrainConfig,
                    normaliser: float) -> LossParts:
    """Forward pass split into the three objective terms.

    recon: squared window reconstruction error divided by N*T*K.
    l1:    mean over steps of the sum of |W_t|.
    hnorm: mean acyclicity penalty over the constrained instantaneous blocks.
    """
    cfg = model.cfg
    fp = model.forward(X, windows)
    resid = (nd.const(windows.effect) - fp.recon) * windows.mask
    recon = nd.sum_(nd.square(resid)) * (1.0 / normaliser)
    l1 = nd.mean(nd.sum_(nd.absolute(fp.W_steps), axis=(1, 2)))
    hval = None
    if uses_constraint(cfg):
        mats = fp.W_steps if train.acyclic_scope is Scope.ALL_STEPS else nd.const(fp.anchors.matrices)
        sq = effective_adjacency_sq(mats, cfg)
        ins = nd.take(sq, (Ellipsis, slice(None), slice(0, cfg.d)))
        if train.constraint == "norm":
            h = h_norm_tape(ins, train.alpha, through_norm=train.through_norm)
        else:
            h = h_log_tape(ins, train.alpha)
        hval = nd.mean(h)
    return LossParts(recon, l1, hval)


def _inject_bias(model: CoarseToFineModel, value: float) -> None:
    if value:
        b = model.params["dec2_b"]
        b.value = b.value + value


def fit(X, model_cfg: ModelConfig, train: TrainConfig, model: CoarseToFineModel | None = None
        ) -> FitReport:
    """Train on (N, T, d) data (or a Dataset) and return the learned trajectory."""
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    if X.ndim != 3:
        raise nd.ShapeError(f"data must be (N, T, d), got {X.shape}")
    N, T, d = X.shape
    if T <= model_cfg.K + model_cfg.tau:
        raise nd.ContractError(f"need T > K + tau (T={T}, K={model_cfg.K}, tau={model_cfg.tau})")
    if not np.all(np.isfinite(X)):
        raise TrainingError("data contains non-finite values")

    constrained = uses_constraint(model_cfg)
    rounds = train.rounds if constrained else 1
    windows = build_windows(X, model_cfg.tau, model_cfg.K)
    normaliser = float(N * T * model_cfg.K)
    start = time.perf_counter()
    violations = 0
    lr, bias = train.lr, train.init_bias
    while True:
        rng = Rng(train.seed)
        model_run = model or CoarseToFineModel.create(model_cfg, rng)
        _inject_bias(model_run, bias)
        try:
            trace = _optimise(model_run, X, windows, train, rounds, lr, normaliser, constrained)
            break
        except FeasibilityError as err:
            # log-det left its domain: retrain with a smaller step and initialisation
            violations += 1
            if violations > train.max_restarts or model is not None:
                raise TrainingError(f"h_log left its domain {violations} times",
                                    violations) from err
            lr, bias = lr / 2, bias / 2
            log.warning("feasibility violation (rho=%.4g); restarting with lr=%.4g, init bias %.4g",
                        err.rho, lr, bias)

    W_steps = model_run.step_matrices(X)
    adj = model_run.adjacency(W_steps)
    signed = W_steps if model_cfg.m == 1 else adj
    if model_cfg.head is Head.ODE:
        signed = signed.copy()
        signed[..., :d] = 0.0
    mats = [CausalMatrix.from_weights(w, d, zero_diagonal=True) for w in signed]
    trajectory = DynGraphTrajectory(model_cfg.tau + 1, mats)
    pruned = prune_trajectory(trajectory, train.delta)
    final_h = trace[-1]["hnorm"] if constrained else None
    return FitReport(trajectory, pruned, trace, time.perf_counter() - start,
                     model_cfg.to_dict(), train.to_dict(), final_h, violations, model_run)


def _optimise(model, X, windows, train, rounds, lr, normaliser, constrained) -> list[dict]:
    params = list(model.params.values())
    opt = Adam(model.params, lr)
    trace = []
    mu = train.mu0
    step = 0
    for rnd in range(rounds):
        for _ in range(train.inner_steps):
            try:
                parts = loss_components(model, X, windows, train, normaliser)
            except SingularityError as err:
                raise TrainingError(f"log-det singular at step {step} (pivot {err.pivot}); "
                                    "this should be unreachable for the 1-norm scaled penalty") from err
            objective = (parts.recon + parts.l1 * train.beta) * mu
            if parts.hnorm is not None:
                objective = objective + parts.hnorm
            if not np.isfinite(objective.value):
                raise TrainingError(f"non-finite objective at step {step}")
            grads = nd.backward(objective, params)
            opt.step(grads)
            trace.append({
                "step": step,
                "round": rnd,
                "mu": mu,
                "recon": float(parts.recon.value),
                "l1": float(parts.l1.value),
                "hnorm": float(parts.hnorm.value) if parts.hnorm is not None else None,
            })
            step += 1
        mu *= train.gamma
    if constrained:
        # trace the penalty at the final parameters too
        parts = loss_components(model, X, windows, train, normaliser)
        trace.append({"step": step, "round": rounds - 1, "mu": mu / train.gamma,
                      "recon": float(parts.recon.value), "l1": float(parts.l1.value),
                      "hnorm": float(parts.hnorm.value)})
    return trace
