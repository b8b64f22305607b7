import math
import warnings

import numpy as np
import pytest

from tvcausal import acyclic as ac
from tvcausal import ndcore as nd

from conftest import fd_grad, rel_err


def has_cycle_dfs(W):
    """Independent cycle oracle: colour-marking depth-first search."""
    A = np.asarray(W) != 0
    d = A.shape[0]
    colour = [0] * d  # 0 new, 1 on stack, 2 done

    def visit(j):
        colour[j] = 1
        for i in np.flatnonzero(A[:, j]):  # edge j -> i
            if colour[i] == 1 or (colour[i] == 0 and visit(i)):
                return True
        colour[j] = 2
        return False

    return any(colour[j] == 0 and visit(j) for j in range(d))


def random_dag(rng, d):
    perm = rng.permutation(d)
    mask = np.triu(rng.random((d, d)) < 0.4, 1)
    W = mask * rng.uniform(0.3, 2.0, (d, d)) * rng.choice([-1, 1], (d, d))
    return W[np.ix_(perm, perm)]


def random_cyclic(rng, d):
    W = random_dag(rng, d)
    length = rng.integers(2, d + 1)
    nodes = rng.permutation(d)[:length]
    for a, b in zip(nodes, np.roll(nodes, -1)):
        W[b, a] = rng.uniform(0.3, 2.0) * rng.choice([-1, 1])
    return W


TWO_CYCLE = np.array([[0.0, 0.5], [0.5, 0.0]])


def test_closed_forms_two_cycle():
    assert ac.h_norm(TWO_CYCLE) == pytest.approx(6.21611, abs=1e-4)
    assert ac.h_exp(TWO_CYCLE) == pytest.approx(0.0628261, abs=1e-6)
    assert ac.h_poly(TWO_CYCLE) == pytest.approx(0.03125, abs=1e-9)
    assert ac.h_log(TWO_CYCLE) == pytest.approx(0.064407, abs=1e-5)
    # independent hand forms
    assert ac.h_exp(TWO_CYCLE) == pytest.approx(2 * math.cosh(0.25) - 2, abs=1e-12)
    a = 1.001
    assert ac.h_log(TWO_CYCLE) == pytest.approx(-math.log(a * a - 0.0625) + 2 * math.log(a), abs=1e-12)
    assert ac.h_norm(TWO_CYCLE) == pytest.approx(-math.log(a * a - 1) + 2 * math.log(a), abs=1e-10)


def test_zero_matrix_and_identity_cases():
    assert ac.h_norm(np.zeros((4, 4))) == 0.0
    assert ac.h_norm_grad(np.zeros((4, 4))).tolist() == np.zeros((4, 4)).tolist()
    assert ac.h_norm([[0.0, 1.0], [0.0, 0.0]]) == pytest.approx(0.0, abs=1e-12)
    assert ac.h_norm([[0.7]]) > 0  # self-loop is a cycle


def test_non_square_rejected():
    with pytest.raises(nd.ShapeError):
        ac.h_norm(np.ones((2, 3)))


def test_theorem_dag_iff_zero():
    rng = np.random.default_rng(2024)
    for _ in range(500):
        W = random_dag(rng, int(rng.integers(2, 21)))
        assert not has_cycle_dfs(W)
        assert ac.h_norm(W) <= 1e-10
    for _ in range(500):
        W = random_cyclic(rng, int(rng.integers(2, 21)))
        assert has_cycle_dfs(W)
        assert ac.h_norm(W) >= 1e-6
        assert np.linalg.norm(ac.h_norm_grad(W)) > 0


@pytest.mark.parametrize("k", [1e-6, 1e-3, 1e3, 1e6])
def test_scale_invariance(k):
    rng = np.random.default_rng(5)
    for _ in range(100):
        W = rng.normal(size=(6, 6))
        assert abs(ac.h_norm(k * W) - ac.h_norm(W)) <= 1e-9
        g = ac.h_norm_grad(k * W)
        assert np.all(np.isfinite(g))
        # the gradient scales as 1/k
        assert np.allclose(g * k, ac.h_norm_grad(W), rtol=1e-7, atol=1e-12)


def test_norm_gradient_matches_frozen_scale_fd():
    rng = np.random.default_rng(11)
    for _ in range(10):
        W0 = rng.normal(size=(5, 5))
        c0 = ac.norm1(W0 * W0)
        frozen = lambda w: -np.linalg.slogdet(1.001 * np.eye(5) - w * w / c0)[1] + 5 * math.log(1.001)
        assert rel_err(ac.h_norm_grad(W0), fd_grad(frozen, W0, 1e-6)) <= 1e-5


def test_norm_gradient_through_norm_matches_fd():
    rng = np.random.default_rng(12)
    for _ in range(10):
        W0 = rng.normal(size=(4, 4))
        g = ac.h_norm_grad(W0, through_norm=True)
        assert rel_err(g, fd_grad(ac.h_norm, W0, 1e-7)) <= 1e-4


def test_tape_matches_numpy():
    rng = np.random.default_rng(3)
    Ws = rng.normal(size=(3, 5, 5))
    Ws[1] = 0.0
    Wt = nd.param(Ws)
    h = ac.h_norm_tape(nd.square(Wt))
    expected = [ac.h_norm(w) for w in Ws]
    assert np.allclose(h.value, expected, atol=1e-12)
    g = nd.backward(nd.sum_(h))[Wt]
    for b in (0, 2):
        assert np.allclose(g[b], ac.h_norm_grad(Ws[b]), atol=1e-10)
    assert np.all(g[1] == 0)
    gt = nd.backward(nd.sum_(ac.h_norm_tape(nd.square(Wt), through_norm=True)))[Wt]
    for b in (0, 2):
        assert np.allclose(gt[b], ac.h_norm_grad(Ws[b], through_norm=True), atol=1e-10)


def test_comparator_gradients_match_fd():
    rng = np.random.default_rng(8)
    W0 = rng.uniform(-0.4, 0.4, (4, 4))
    for f, g in ((ac.h_exp, ac.h_exp_grad), (ac.h_poly, ac.h_poly_grad),
                 (ac.h_log, ac.h_log_grad), (ac.h_rho, ac.h_rho_grad)):
        assert rel_err(g(W0), fd_grad(f, W0, 1e-6)) <= 1e-4, f.__name__


def test_log_tape_matches_numpy():
    rng = np.random.default_rng(9)
    W0 = rng.uniform(-0.4, 0.4, (4, 4))
    Wt = nd.param(W0[None])
    h = ac.h_log_tape(nd.square(Wt))
    assert float(h.value[0]) == pytest.approx(ac.h_log(W0), abs=1e-12)
    assert np.allclose(nd.backward(nd.sum_(h))[Wt][0], ac.h_log_grad(W0), atol=1e-10)


def test_log_infeasible_raises_with_rho():
    with pytest.raises(ac.FeasibilityError) as err:
        ac.h_log(3.0 * TWO_CYCLE)
    assert err.value.rho == pytest.approx(2.25)
    with pytest.raises(ac.FeasibilityError):
        ac.h_log_tape(nd.const((3.0 * TWO_CYCLE)[None] ** 2))


def test_rho_on_dag_and_cycle():
    assert ac.h_rho(TWO_CYCLE) == pytest.approx(0.25, abs=1e-8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ac.DegenerateSpectrumWarning)
        assert ac.h_rho([[0.0, 1.0], [0.0, 0.0]]) == pytest.approx(0.0, abs=1e-6)


def test_penalty_evaluate_flags():
    pen = ac.AcyclicPenalty(ac.Kind.LOG)
    assert pen.evaluate(10 * TWO_CYCLE).overflow
    assert not pen.evaluate(TWO_CYCLE).overflow
    assert ac.AcyclicPenalty(ac.Kind.EXP).evaluate(100 * np.ones((20, 20))).overflow
    with pytest.raises(ValueError):
        ac.AcyclicPenalty(alpha=1.0)


def test_bench_matrix_families():
    u1 = ac.BenchMatrixSpec("uniform", 5, 1.0, 3).matrix()
    u10 = ac.BenchMatrixSpec("uniform", 5, 10.0, 3).matrix()
    assert np.allclose(u10, 10 * u1)
    c = ac.BenchMatrixSpec("cycle", 6, seed=1).matrix()
    assert has_cycle_dfs(c)
    assert np.all(np.abs(c[c != 0]) == 0.5)
    assert (c != 0).sum() == 6


def test_stability_bench_qualitative():
    rows = ac.run_stability_bench(ac.default_sweep())
    by = {(r["penalty"], r["family"], r["param"]): r for r in rows}
    # uniform sweep: exp and poly break, norm stays constant in k
    for kind in ("exp", "poly"):
        assert any(by[(kind, "uniform", k)]["overflow"] or by[(kind, "uniform", k)]["vanished"]
                   for k in (1, 10, 100))
    norms = [by[("norm", "uniform", k)]["value"] for k in (1, 10, 100)]
    assert max(norms) - min(norms) <= 1e-9
    # cycles: norm never vanishes
    for n in (5, 10, 20, 30, 40, 50):
        r = by[("norm", "cycle", n)]
        assert r["value"] > 0 and r["grad_norm"] > 0 and not r["vanished"] and not r["overflow"]
    assert list(rows[0]) == list(ac.BENCH_HEADER)


def test_bench_rejects_bad_sweep():
    with pytest.raises(ValueError):
        ac.run_stability_bench([ac.BenchMatrixSpec("uniform", 4, 0.0)])
