"""Experiment driver: generate, fit, eval, bench-constraints, run-all.

Every command reads a JSON config (``spec_version`` required, every other
field defaulted) and writes plain CSV/JSON artifacts into ``--out``.  All
randomness flows from one master seed: ``Rng(seed).spawn(4)`` gives the
graph, weight, schedule and data streams, and the model is initialised
from ``seed`` itself.

Written artifacts carry no timings so that reruns are byte-identical; wall
clock and per-penalty runtimes go to stderr, except in the standalone
``bench-constraints`` CSV whose ``runtime_ns`` column is the point of it.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import acyclic, graphs, metrics, synthgen
from .model import ModelConfig
from .ndcore import Rng
from .trainer import FitReport, TrainConfig, TrainingError, fit

SPEC_VERSION = "1.0"
log = logging.getLogger("tvcausal")


# ---------------------------------------------------------------- config schema

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeneratorSection(_Section):
    kind: Literal["linear", "nonlinear", "lorenz96", "dynamic-linear", "dynamic-nonlinear"] = "linear"
    d: int = Field(10, ge=1)
    tau: int = Field(2, ge=0)
    N: int = Field(20, ge=1)
    T: int = Field(50, ge=2)
    e: float = Field(2.0, gt=0)
    eta: float = Field(1.5, gt=1)
    noise: float = Field(1.0, ge=0)
    period_scale: Optional[float] = Field(None, ge=1)
    intensity_scale: float = Field(1.0, ge=1)
    F: float = 5.0
    dt: float = Field(0.02, gt=0)


class ModelSection(_Section):
    K: int = Field(10, ge=1)
    S: int = Field(5, ge=1)
    m: int = Field(1, ge=1)
    head: Literal["linear", "nonlinear", "ode"] = "linear"
    channels: int = Field(16, ge=1)
    activation: Literal["relu", "sigmoid", "tanh", "identity"] = "relu"
    head_hidden: int = Field(10, ge=1)
    decoder_hidden: int = Field(0, ge=0)


class TrainSection(_Section):
    beta: float = Field(0.05, ge=0)
    mu0: float = Field(1.0, gt=0)
    gamma: float = Field(0.1, gt=0, lt=1)
    rounds: int = Field(4, ge=1)
    inner_steps: int = Field(1000, ge=1)
    lr: float = Field(0.005, gt=0)
    delta: float = Field(0.3, ge=0)
    alpha: float = Field(acyclic.DEFAULT_ALPHA, gt=1)
    acyclic_scope: Literal["all_steps", "anchors_only"] = "all_steps"
    constraint: Literal["norm", "log"] = "norm"
    through_norm: bool = False
    init_bias: float = 0.0
    max_restarts: int = Field(5, ge=0)


class EvalSection(_Section):
    gt_threshold: Optional[float] = Field(None, ge=0)
    by_block: bool = False


class BenchSection(_Section):
    d: int = Field(20, ge=1)
    ks: list[float] = Field(default_factory=lambda: [1.0, 10.0, 100.0])
    cycle_dims: list[int] = Field(default_factory=lambda: [5, 10, 20, 30, 40, 50])
    penalties: list[Literal["exp", "poly", "log", "rho", "norm"]] = Field(
        default_factory=lambda: ["exp", "poly", "log", "rho", "norm"])


class ExperimentConfig(_Section):
    spec_version: Literal["1.0"]
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    out: str = "out"
    generator: GeneratorSection = Field(default_factory=GeneratorSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    bench: BenchSection = Field(default_factory=BenchSection)


class ConfigError(ValueError):
    pass


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {loc}: {e['msg']}")
    return "invalid config:\n" + "\n".join(lines)


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    """Read the JSON config (or defaults when ``path`` is None) and apply flag overrides."""
    raw: dict = {"spec_version": SPEC_VERSION}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: not valid JSON ({err})") from err
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as err:
        raise ConfigError(_format_validation(err)) from err


# ---------------------------------------------------------------- building blocks

def make_dataset(gen: GeneratorSection, seed: int) -> synthgen.Dataset:
    graph_rng, weight_rng, sched_rng, data_rng = Rng(seed).spawn(4)
    if gen.kind == "lorenz96":
        ds = synthgen.gen_lorenz96(gen.d, gen.N, gen.T, gen.F, gen.dt, rng=data_rng)
    else:
        g = graphs.gen_er_ground_truth(gen.d, gen.tau, gen.e, graph_rng)
        W = graphs.assign_weights(g, gen.eta, weight_rng)
        if gen.kind == "linear":
            ds = synthgen.gen_linear_sem(W, gen.N, gen.T, gen.noise, data_rng)
        elif gen.kind == "nonlinear":
            ds = synthgen.gen_nonlinear_sem(W, gen.N, gen.T, gen.noise, data_rng)
        else:
            sched = synthgen.DynWeightSchedule.random(W, sched_rng, gen.period_scale,
                                                      gen.intensity_scale)
            ds = synthgen.gen_dynamic(sched, gen.kind.split("-", 1)[1], gen.N, gen.T,
                                      gen.noise, data_rng)
    ds.seed = seed
    return ds


def model_config(cfg: ExperimentConfig, d: int, tau: int) -> ModelConfig:
    return ModelConfig(d=d, tau=tau, **cfg.model.model_dump())


def train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return TrainConfig(seed=seed, **cfg.train.model_dump())


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def trace_csv(report: FitReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "round", "mu", "recon", "l1", "hnorm"])
    for e in report.trace:
        w.writerow([e["step"], e["round"], repr(e["mu"]), repr(e["recon"]), repr(e["l1"]),
                    "" if e["hnorm"] is None else repr(e["hnorm"])])
    return buf.getvalue()


def write_fit(report: FitReport, out: Path, stem: str) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / f"{stem}.fit.json",
        "trajectory": out / f"{stem}.trajectory.json",
        "pruned": out / f"{stem}.pruned.json",
        "trace": out / f"{stem}.trace.csv",
        "model": out / f"{stem}.model.json",
    }
    body = report.to_json()
    body.pop("wall_clock", None)
    body["trajectory"] = paths["trajectory"].name
    body["pruned"] = paths["pruned"].name
    paths["report"].write_text(_json(body))
    report.trajectory.save(paths["trajectory"])
    report.pruned.save(paths["pruned"])
    paths["trace"].write_text(trace_csv(report))
    report.model.save(paths["model"])
    return paths


def reporting_steps(times: list[int]) -> list[int]:
    """First, middle and last scored step (t=1 and t=T/2 clamp into range)."""
    T = times[-1]
    wanted = [1, T // 2, T]
    return sorted({min(max(t, times[0]), T) for t in wanted})


def write_eval(result: metrics.EvalResult, out: Path, stem: str) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / f"{stem}.eval.json", "csv": out / f"{stem}.eval.csv"}
    paths["json"].write_text(_json(result.to_json()))
    paths["csv"].write_text(result.to_csv())
    return paths


def bench_csv(rows: list[dict], with_runtime: bool = True) -> str:
    header = [h for h in acyclic.BENCH_HEADER if with_runtime or h != "runtime_ns"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(r[h]) if isinstance(r[h], float) else r[h] for h in header])
    return buf.getvalue()


def run_bench(cfg: ExperimentConfig, seed: int) -> list[dict]:
    b = cfg.bench
    specs = acyclic.default_sweep(b.d, b.ks, b.cycle_dims, seed)
    return acyclic.run_stability_bench(specs, b.penalties)


# ---------------------------------------------------------------- commands

def cmd_generate(cfg: ExperimentConfig, out: Path, jobs: int) -> int:
    for seed, paths in zip(cfg.seeds, _map(_generate_one, [(cfg, out, s) for s in cfg.seeds], jobs)):
        print(f"generated seed={seed}: {paths['csv']}")
    return 0


def _generate_one(args):
    cfg, out, seed = args
    ds = make_dataset(cfg.generator, seed)
    return ds.save(out / f"data_seed{seed}")


def cmd_fit(cfg: ExperimentConfig, data: Path, out: Path) -> int:
    ds = synthgen.Dataset.load(data)
    seed = cfg.seeds[0]
    report = fit(ds, model_config(cfg, ds.d, ds.tau), train_config(cfg, seed))
    stem = data.name.removesuffix(".csv")
    paths = write_fit(report, out, stem)
    h = "n/a" if report.final_hnorm is None else f"{report.final_hnorm:.3g}"
    print(f"fit {data.name}: final h_norm={h}, violations={report.feasibility_violations}, "
          f"wall clock {report.wall_clock:.1f}s -> {paths['report']}")
    return 0


def cmd_eval(cfg: ExperimentConfig, traj: Path, truth: Path, out: Path) -> int:
    est = graphs.DynGraphTrajectory.load(traj)
    gt = graphs.DynGraphTrajectory.load(truth)
    result = metrics.evaluate(est, gt, cfg.train.delta, cfg.eval.gt_threshold, cfg.eval.by_block)
    stem = traj.name.removesuffix(".json").removesuffix(".trajectory")
    paths = write_eval(result, out, stem)
    steps = [result.step(t) for t in reporting_steps([s.t for s in result.per_step])]
    f1s = ", ".join(f"t={s.t}: F1={s.f1:.3f}" for s in steps)
    print(f"eval {traj.name}: {f1s}; mean SHD={result.aggregate['shd_mean']:.2f} -> {paths['json']}")
    return 0


def cmd_bench(cfg: ExperimentConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    rows = run_bench(cfg, cfg.seeds[0])
    path = out / "bench_constraints.csv"
    path.write_text(bench_csv(rows))
    flagged = sum(r["overflow"] or r["vanished"] for r in rows)
    print(f"bench: {len(rows)} rows, {flagged} flagged -> {path}")
    return 0


def _pipeline_one(args) -> dict:
    cfg, out, seed = args
    ds = make_dataset(cfg.generator, seed)
    stem = f"data_seed{seed}"
    ds.save(out / stem)
    report = fit(ds, model_config(cfg, ds.d, ds.tau), train_config(cfg, seed))
    log.info("seed %d fitted in %.1fs", seed, report.wall_clock)
    write_fit(report, out, stem)
    result = metrics.evaluate(report.trajectory, ds.ground_truth, cfg.train.delta,
                              cfg.eval.gt_threshold, cfg.eval.by_block)
    write_eval(result, out, stem)
    row = {"seed": seed, **{k: result.aggregate[k] for k in ("tpr_mean", "precision_mean",
                                                             "f1_mean", "shd_mean")}}
    for t in reporting_steps([s.t for s in result.per_step]):
        row[f"f1_t{t}"] = result.step(t).f1
    row.update(auroc=result.auroc, final_hnorm=report.final_hnorm,
               violations=report.feasibility_violations)
    return row


def cmd_run_all(cfg: ExperimentConfig, out: Path, jobs: int) -> int:
    out.mkdir(parents=True, exist_ok=True)
    # the echo omits "out" so reruns into another directory stay byte-identical
    (out / "config.json").write_text(_json(cfg.model_dump(exclude={"out"})))
    rows = list(_map(_pipeline_one, [(cfg, out, s) for s in cfg.seeds], jobs))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = list(rows[0])
    w.writerow(keys)
    for r in rows:
        w.writerow([_cell(r[k]) for k in keys])
    (out / "summary.csv").write_text(buf.getvalue())
    (out / "bench_constraints.csv").write_text(bench_csv(run_bench(cfg, cfg.seeds[0]),
                                                         with_runtime=False))
    for r in rows:
        print(f"seed {r['seed']}: F1 mean {r['f1_mean']:.3f}, SHD mean {r['shd_mean']:.2f}")
    print(f"run-all: {len(rows)} seed(s) -> {out / 'summary.csv'}")
    return 0


def _cell(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def _map(fn, items: list, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tvcausal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON experiment config (defaults if omitted)")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--seed", type=int, help="run a single master seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel processes over seeds")
        p.add_argument("--beta", type=float)
        p.add_argument("--delta", type=float)
        p.add_argument("--K", type=int)
        p.add_argument("--S", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--head", choices=["linear", "nonlinear", "ode"])
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("generate", help="write synthetic datasets"))
    p = sub.add_parser("fit", help="fit one dataset CSV")
    common(p)
    p.add_argument("--data", required=True, help="dataset CSV (sidecar .meta.json next to it)")
    p = sub.add_parser("eval", help="score a trajectory against ground truth")
    common(p)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--truth", required=True)
    common(sub.add_parser("bench-constraints", help="acyclicity stability benchmark"))
    common(sub.add_parser("run-all", help="generate, fit and evaluate every seed, then bench"))
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    over = {
        "train.beta": args.beta, "train.delta": args.delta, "train.alpha": args.alpha,
        "model.K": args.K, "model.S": args.S, "model.head": args.head, "out": args.out,
    }
    if args.seed is not None:
        over["seeds"] = [args.seed]
    return over


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.jobs < 1:
            raise ConfigError("invalid config:\n  jobs: must be >= 1")
        out = Path(cfg.out)
        if args.command == "generate":
            return cmd_generate(cfg, out, args.jobs)
        if args.command == "fit":
            return cmd_fit(cfg, Path(args.data), out)
        if args.command == "eval":
            return cmd_eval(cfg, Path(args.trajectory), Path(args.truth), out)
        if args.command == "bench-constraints":
            return cmd_bench(cfg, out)
        return cmd_run_all(cfg, out, args.jobs)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError, TrainingError, ArithmeticError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
