import json

import pytest

from tvcausal import cli
from tvcausal.graphs import DynGraphTrajectory

SMALL = {
    "spec_version": "1.0",
    "seeds": [0],
    "generator": {"kind": "linear", "d": 5, "e": 1, "tau": 1, "N": 5, "T": 20},
    "model": {"K": 4, "S": 4},
    "train": {"inner_steps": 15, "rounds": 2},
    "bench": {"d": 6, "cycle_dims": [5, 8]},
}


def write_config(tmp_path, **changes):
    cfg = json.loads(json.dumps(SMALL))
    for section, values in changes.items():
        if isinstance(values, dict):
            cfg.setdefault(section, {}).update(values)
        else:
            cfg[section] = values
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_generate_dynamic_shape_and_determinism(tmp_path):
    cfg = write_config(tmp_path, generator={"kind": "dynamic-linear", "d": 20, "T": 10, "N": 200})
    assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "data_seed0.csv").read_bytes()
    assert a == (tmp_path / "b" / "data_seed0.csv").read_bytes()
    assert len(a.decode().splitlines()) == 1 + 200 * 10
    for suffix in (".meta.json", ".truth.json"):
        assert (tmp_path / "a" / f"data_seed0{suffix}").exists()


def test_invalid_config_reports_field(tmp_path, capsys):
    cfg = write_config(tmp_path, generator={"d": 0})
    assert cli.main(["generate", "--config", cfg]) == 2
    err = capsys.readouterr().err
    assert "generator.d" in err
    bad = tmp_path / "v.json"
    bad.write_text(json.dumps({"spec_version": "9"}))
    assert cli.main(["generate", "--config", str(bad)]) == 2
    assert "spec_version" in capsys.readouterr().err
    unknown = write_config(tmp_path, train={"gama": 0.2})
    assert cli.main(["bench-constraints", "--config", unknown]) == 2


def test_flag_overrides_reach_config():
    cfg = cli.load_config(None, cli._overrides(cli.build_parser().parse_args(
        ["fit", "--data", "x.csv", "--beta", "0.2", "--delta", "0.1", "--K", "3", "--S", "2",
         "--alpha", "1.5", "--head", "ode", "--seed", "7", "--out", "z"])))
    assert (cfg.train.beta, cfg.train.delta, cfg.train.alpha) == (0.2, 0.1, 1.5)
    assert (cfg.model.K, cfg.model.S, cfg.model.head) == (3, 2, "ode")
    assert cfg.seeds == [7] and cfg.out == "z"


def test_fit_and_eval_commands(tmp_path, capsys):
    cfg = write_config(tmp_path)
    data = tmp_path / "d"
    assert cli.main(["generate", "--config", cfg, "--out", str(data)]) == 0
    fitdir = tmp_path / "f"
    assert cli.main(["fit", "--config", cfg, "--data", str(data / "data_seed0.csv"),
                     "--out", str(fitdir)]) == 0
    report = json.loads((fitdir / "data_seed0.fit.json").read_text())
    assert report["trajectory"] == "data_seed0.trajectory.json"
    assert len(report["trace"]) == 31 and "wall_clock" not in report
    lines = (fitdir / "data_seed0.trace.csv").read_text().splitlines()
    assert lines[0] == "step,round,mu,recon,l1,hnorm" and len(lines) == 32
    traj = fitdir / "data_seed0.trajectory.json"
    assert cli.main(["eval", "--config", cfg, "--trajectory", str(traj),
                     "--truth", str(data / "data_seed0.truth.json"), "--out", str(tmp_path / "e")]) == 0
    out = capsys.readouterr().out
    assert "t=2:" in out and "t=10:" in out and "t=20:" in out
    # identical inputs give zero SHD everywhere
    truth = data / "data_seed0.truth.json"
    assert cli.main(["eval", "--trajectory", str(truth), "--truth", str(truth),
                     "--delta", "0.0", "--out", str(tmp_path / "self")]) == 0
    rows = (tmp_path / "self" / "data_seed0.truth.eval.csv").read_text().splitlines()[1:]
    assert rows and all(r.endswith(",0") for r in rows)


def test_fit_ode_head_single_round(tmp_path):
    cfg = write_config(tmp_path)
    cli.main(["generate", "--config", cfg, "--out", str(tmp_path)])
    assert cli.main(["fit", "--config", cfg, "--data", str(tmp_path / "data_seed0.csv"),
                     "--head", "ode", "--out", str(tmp_path / "f")]) == 0
    report = json.loads((tmp_path / "f" / "data_seed0.fit.json").read_text())
    assert len(report["trace"]) == 15
    assert all(e["hnorm"] is None and e["round"] == 0 for e in report["trace"])


def test_fit_missing_sidecar(tmp_path, capsys):
    cfg = write_config(tmp_path)
    cli.main(["generate", "--config", cfg, "--out", str(tmp_path)])
    (tmp_path / "data_seed0.meta.json").unlink()
    assert cli.main(["fit", "--config", cfg, "--data", str(tmp_path / "data_seed0.csv")]) == 1
    assert "data_seed0.meta.json" in capsys.readouterr().err


def test_eval_shape_mismatch(tmp_path, capsys):
    cfg_a = write_config(tmp_path)
    cli.main(["generate", "--config", cfg_a, "--out", str(tmp_path / "a")])
    cfg_b = write_config(tmp_path, generator={"d": 6})
    cli.main(["generate", "--config", cfg_b, "--out", str(tmp_path / "b")])
    assert cli.main(["eval", "--trajectory", str(tmp_path / "a" / "data_seed0.truth.json"),
                     "--truth", str(tmp_path / "b" / "data_seed0.truth.json")]) == 1
    assert "d=5" in capsys.readouterr().err


def test_bench_constraints_csv(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.main(["bench-constraints", "--config", cfg, "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "bench_constraints.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header == list(cli.acyclic.BENCH_HEADER)
    rows = [dict(zip(header, l.split(","))) for l in lines[1:]]
    assert all(int(r["runtime_ns"]) > 0 for r in rows)
    norm = {r["param"]: r["value"] for r in rows if r["penalty"] == "norm" and r["family"] == "uniform"}
    assert len(set(float(v) for v in norm.values())) == 1 or \
        max(map(float, norm.values())) - min(map(float, norm.values())) < 1e-9
    assert any(r["penalty"] == "exp" and r["overflow"] == "1" for r in rows)


def test_run_all_byte_identical(tmp_path):
    cfg = write_config(tmp_path, seeds=[0, 1])
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run-all", "--config", cfg, "--out", str(a)]) == 0
    assert cli.main(["run-all", "--config", cfg, "--out", str(b), "--jobs", "2"]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n
    summary = (a / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("seed,") and len(summary) == 3
    DynGraphTrajectory.load(a / "data_seed1.pruned.json")
