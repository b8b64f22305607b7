"""Edge-recovery metrics for lag-augmented causal graphs."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .graphs import BinaryGraph, CausalMatrix, DynGraphTrajectory, prune
from .ndcore import ShapeError


class UndefinedMetricError(ValueError):
    pass


def _arr(g) -> np.ndarray:
    return g.weights if isinstance(g, CausalMatrix) else np.asarray(g, dtype=np.float64)


def _check(est: np.ndarray, gt: np.ndarray) -> None:
    if est.shape != gt.shape:
        raise ShapeError(f"shape mismatch: estimate {est.shape} vs truth {gt.shape}")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int

    @property
    def tpr(self) -> float:
        """Recall; NaN when the truth has no edges."""
        pos = self.tp + self.fn
        return self.tp / pos if pos else math.nan

    @property
    def precision(self) -> float:
        pred = self.tp + self.fp
        return self.tp / pred if pred else math.nan

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else math.nan


def confusion(est, gt) -> Confusion:
    e, g = _arr(est) != 0, _arr(gt) != 0
    _check(e, g)
    return Confusion(int(np.sum(e & g)), int(np.sum(e & ~g)), int(np.sum(~e & g)))


def shd(est, gt, d: int | None = None) -> int:
    """Structural Hamming distance.

    Instantaneous block: a pair (i, j) whose only disagreement is the edge
    direction counts once as reversed; any other mismatch costs one per
    differing entry.  Lagged blocks: one per differing entry.
    """
    e, g = _arr(est) != 0, _arr(gt) != 0
    _check(e, g)
    if d is None:
        d = est.d if isinstance(est, CausalMatrix) else e.shape[0]
    lag = int(np.sum(e[:, d:] != g[:, d:]))
    ei, gi = e[:, :d], g[:, :d]
    diff = ei != gi
    # reversed: exactly one direction in each, opposite to each other
    reversed_ = ei & gi.T & ~gi & ~ei.T
    iu = np.triu(np.ones((d, d), dtype=bool), 1)
    n_reversed = int(np.sum((reversed_ | reversed_.T) & iu))
    return lag + int(np.sum(diff)) - n_reversed


def auroc(scores, gt, d: int | None = None) -> float:
    """Area under the ROC curve for ``|scores|`` against the truth's edges.

    The instantaneous diagonal is excluded.  Tied scores form one ROC point,
    so the trapezoid area equals the Mann-Whitney statistic.
    """
    s, g = np.abs(_arr(scores)), _arr(gt) != 0
    _check(s, g)
    if d is None:
        d = gt.d if isinstance(gt, CausalMatrix) else s.shape[0]
    keep = np.ones(s.shape, dtype=bool)
    if s.ndim == 2 and d <= s.shape[1]:
        keep[:, :d] &= ~np.eye(s.shape[0], d, dtype=bool)
    return _auroc_flat(s[keep], g[keep])


def _auroc_flat(scores: np.ndarray, labels: np.ndarray) -> float:
    labels = labels.astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative entries")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # cut points after each block of equal scores
    cuts = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    ends = np.concatenate([cuts, [s.size - 1]])
    tps = np.cumsum(y)[ends]
    fps = np.cumsum(~y)[ends]
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def mann_whitney_auc(scores, labels) -> float:
    """P(score of a positive > score of a negative), ties counted 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative entries")
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))


# ---------------------------------------------------------------- trajectories

@dataclass
class StepMetrics:
    t: int
    tpr: float
    precision: float
    f1: float
    shd: int
    blocks: dict = field(default_factory=dict)


@dataclass
class EvalResult:
    per_step: list[StepMetrics]
    aggregate: dict
    auroc: float | None

    def step(self, t: int) -> StepMetrics:
        for s in self.per_step:
            if s.t == t:
                return s
        raise KeyError(t)

    def to_json(self) -> dict:
        return {
            "per_step": [
                {"t": s.t, "tpr": _num(s.tpr), "precision": _num(s.precision),
                 "f1": _num(s.f1), "shd": s.shd, **({"blocks": s.blocks} if s.blocks else {})}
                for s in self.per_step
            ],
            "aggregate": {k: _num(v) for k, v in self.aggregate.items()},
            "auroc": _num(self.auroc) if self.auroc is not None else None,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "tpr", "precision", "f1", "shd"])
        for s in self.per_step:
            w.writerow([s.t, _fmt(s.tpr), _fmt(s.precision), _fmt(s.f1), s.shd])
        return buf.getvalue()


def _num(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def binarize(traj: DynGraphTrajectory, threshold: float) -> DynGraphTrajectory:
    if traj.is_binary:
        return traj
    return DynGraphTrajectory(traj.start_t, [prune(m, threshold) for m in traj.matrices])


def _stats(values) -> tuple[float, float]:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std())


def evaluate(est: DynGraphTrajectory, gt: DynGraphTrajectory, delta: float = 0.3,
             gt_threshold: float | None = None, by_block: bool = False) -> EvalResult:
    """Score an estimated trajectory against the truth at every shared step.

    Weighted estimates are pruned at ``delta``; weighted truths are
    binarised at ``gt_threshold`` (default ``delta``).  Steps missing from
    one side are skipped.  AUROC pools every step's scores when the
    estimate is weighted.
    """
    if (est.d, est.tau) != (gt.d, gt.tau):
        raise ShapeError(f"estimate (d={est.d}, tau={est.tau}) vs truth (d={gt.d}, tau={gt.tau})")
    gt_threshold = delta if gt_threshold is None else gt_threshold
    est_bin = binarize(est, delta)
    gt_bin = binarize(gt, gt_threshold)
    shared = sorted(set(est.times) & set(gt.times))
    if not shared:
        raise ValueError("estimate and truth share no time steps")
    d = gt.d
    steps = []
    for t in shared:
        e, g = est_bin.at(t), gt_bin.at(t)
        c = confusion(e, g)
        blocks = {}
        if by_block:
            for name, sl in (("instantaneous", slice(0, d)), ("lagged", slice(d, None))):
                cb = confusion(e.weights[:, sl], g.weights[:, sl])
                blocks[name] = {"tpr": _num(cb.tpr), "precision": _num(cb.precision),
                                "f1": _num(cb.f1)}
        steps.append(StepMetrics(t, c.tpr, c.precision, c.f1, shd(e, g), blocks))
    agg = {}
    for key in ("tpr", "precision", "f1", "shd"):
        mean, std = _stats([float(getattr(s, key)) for s in steps])
        agg[f"{key}_mean"], agg[f"{key}_std"] = mean, std
    score = None
    if not est.is_binary:
        scores = np.concatenate([est.at(t).weights.ravel() for t in shared])
        labels = np.concatenate([gt_bin.at(t).weights.ravel() for t in shared])
        keep = np.concatenate([_offdiag_mask(est.at(t)).ravel() for t in shared])
        try:
            score = _auroc_flat(np.abs(scores[keep]), labels[keep] != 0)
        except UndefinedMetricError:
            score = None
    return EvalResult(steps, agg, score)


def _offdiag_mask(m: CausalMatrix) -> np.ndarray:
    keep = np.ones(m.weights.shape, dtype=bool)
    keep[:, :m.d] &= ~np.eye(m.d, dtype=bool)
    return keep
