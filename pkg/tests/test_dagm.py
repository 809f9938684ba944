import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dagm import oracle
from dagm.dagm import (
    CommCounter,
    DivergenceError,
    RunConfig,
    ScheduleError,
    dagm_run,
    hypergradient,
    inner_loop,
    lipschitz_constants,
    network_constants,
    neumann_order,
    predicted_units,
    schedule_params,
    solve_inner,
)
from dagm.dihgp import dihgp
from dagm.graph import complete_graph, cycle_graph, metropolis_weights, path_graph, random_connected_graph
from dagm.penalty import StackedState, outer_penalty_grad
from dagm.problem import ProblemConstants, random_quad_bilevel

from conftest import beta_bar


class TestRunConfig:
    @pytest.mark.parametrize("kw", [
        dict(alpha=0.0), dict(beta=-1.0), dict(U=-1), dict(M=0), dict(K=-1), dict(schedule="adam"),
    ])
    def test_invalid(self, kw):
        base = dict(alpha=0.1, beta=0.1, U=1, M=1, K=1)
        base.update(kw)
        with pytest.raises(ValueError):
            RunConfig(**base)


class TestInnerLoop:
    def test_single_node_converges(self):
        p = random_quad_bilevel(1, 2, 3, seed=0)
        x = np.array([[0.5, -1.0]])
        y = inner_loop(p, np.array([[1.0]]), 0.5, x, np.zeros((1, 3)), 80)
        np.testing.assert_allclose(y[0], p.A[0] @ x[0] + p.b[0], atol=1e-8)

    def test_matches_manual_recursion(self):
        p = random_quad_bilevel(4, 2, 2, seed=1)
        W = metropolis_weights(cycle_graph(4))
        rng = np.random.default_rng(0)
        x, y0 = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
        beta = 0.3
        # dense recursion y <- W y - beta grad g
        ref = y0.copy()
        for _ in range(7):
            grad = ref - np.einsum("nij,nj->ni", p.A, x) - p.b
            ref = W.w @ ref - beta * grad
        np.testing.assert_allclose(inner_loop(p, W, beta, x, y0, 7), ref, atol=1e-13)

    def test_fixed_point(self):
        p = random_quad_bilevel(5, 2, 3, seed=2)
        W = metropolis_weights(random_connected_graph(5, 0.5, 1))
        x = np.random.default_rng(0).standard_normal((5, 2))
        y_star = oracle.dense_penalized_inner(p, W, 0.2, x, tol=1e-13)
        np.testing.assert_allclose(inner_loop(p, W, 0.2, x, y_star, 25), y_star, atol=1e-12)

    def test_counter(self):
        p = random_quad_bilevel(3, 2, 5, seed=0)
        c = CommCounter()
        inner_loop(p, metropolis_weights(path_graph(3)), 0.1, np.zeros((3, 2)), np.zeros((3, 5)), 6, c)
        assert (c.vectors_inner, c.vectors_outer, c.floats) == (24, 0, 120)

    def test_rejects_zero_rounds(self):
        p = random_quad_bilevel(2, 1, 1, seed=0)
        with pytest.raises(ValueError):
            inner_loop(p, metropolis_weights(path_graph(2)), 0.1, np.zeros((2, 1)), np.zeros((2, 1)), 0)

    @pytest.mark.parametrize("g", [path_graph(3), cycle_graph(6), complete_graph(4), random_connected_graph(8, 0.5, 1)],
                             ids=["path3", "cycle6", "complete4", "random8"])
    def test_rate_bound_at_small_beta(self, g):
        # the consensus mode contracts at |1 - beta|, which is within
        # sqrt(1 - beta b_g) exactly when beta <= 2 - b_g
        W = metropolis_weights(g)
        bb, b_g = beta_bar(W)
        beta = min(0.1 * bb, 2.0 - b_g)
        p = random_quad_bilevel(g.n, 2, 3, seed=g.n)
        rng = np.random.default_rng(g.n)
        x, y0 = rng.standard_normal((g.n, 2)), rng.standard_normal((g.n, 3))
        y_star = oracle.dense_penalized_inner(p, W, beta, x, tol=1e-13)
        e0 = np.linalg.norm(y0 - y_star)
        for M in (1, 5, 20):
            err = np.linalg.norm(inner_loop(p, W, beta, x, y0, M) - y_star)
            assert err <= (1 - beta * b_g) ** (M / 2) * e0 + 1e-10

    def test_consensus_mode_rate(self):
        # a consensus perturbation of the fixed point decays exactly by (1 - beta) per step
        g = path_graph(3)
        W = metropolis_weights(g)
        p = random_quad_bilevel(3, 1, 2, seed=0)
        x = np.zeros((3, 1))
        beta = 0.5
        y_star = oracle.dense_penalized_inner(p, W, beta, x, tol=1e-13)
        y = inner_loop(p, W, beta, x, y_star + 1.0, 1)
        np.testing.assert_allclose(y - y_star, 0.5, atol=1e-12)

    def test_solve_inner_matches_newton(self):
        p = random_quad_bilevel(6, 2, 2, seed=3)
        W = metropolis_weights(random_connected_graph(6, 0.5, 4))
        x = np.random.default_rng(2).standard_normal((6, 2))
        y = solve_inner(p, W, 0.1, x, tol=1e-11)
        ref = oracle.dense_penalized_inner(p, W, 0.1, x, tol=1e-13)
        assert np.linalg.norm(y - ref) <= 1e-11


class TestHypergradient:
    def test_single_node_analytic(self):
        p = random_quad_bilevel(1, 3, 2, reg=0.4, seed=0)
        x = np.array([[0.3, -0.2, 1.0]])
        y = p.y_star(x[0])[None, :]
        h, _ = dihgp(p, np.array([[1.0]]), 0.7, StackedState(x, y), 0)
        d = hypergradient(p, np.array([[1.0]]), 0.1, 0.7, x, y, h)
        np.testing.assert_allclose(d[0], p.outer_gradient(x[0]), atol=1e-12)

    def test_zero_h_decomposition(self):
        p = random_quad_bilevel(3, 2, 2, reg=0.5, seed=1)
        W = metropolis_weights(path_graph(3))
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        d = hypergradient(p, W, 0.2, 0.1, x, y, np.zeros((3, 2)))
        np.testing.assert_allclose(d, outer_penalty_grad(W, 0.2, x) + p.grad_f_x(x, y), atol=1e-15)

    def test_consensus_point_matches_fd(self):
        p = random_quad_bilevel(3, 2, 2, reg=0.5, seed=7)
        W = metropolis_weights(complete_graph(3))
        alpha, beta = 0.5, 0.5
        x = np.tile([0.2, -0.4], (3, 1))
        y = solve_inner(p, W, beta, x, tol=1e-12)
        h, _ = dihgp(p, W, beta, StackedState(x, y), 120)
        d = hypergradient(p, W, alpha, beta, x, y, h)
        fd = oracle.fd_hypergradient(p, W, alpha, beta, x, eps=1e-5)
        assert np.linalg.norm(d - fd) <= 1e-4 * np.linalg.norm(fd)


class TestRun:
    def test_zero_iterations(self):
        p = random_quad_bilevel(3, 1, 1, seed=0)
        tr = dagm_run(p, metropolis_weights(path_graph(3)), RunConfig(0.1, 0.1, 1, 1, 0))
        assert len(tr.snapshots) == 1 and tr.final.k == 0 and tr.final.hypergrad_norm is None

    def test_snapshot_count_and_monotone_counters(self):
        p = random_quad_bilevel(4, 2, 3, seed=1)
        tr = dagm_run(p, metropolis_weights(cycle_graph(4)), RunConfig(0.1, 0.1, 2, 3, 7))
        assert [s.k for s in tr.snapshots] == list(range(8))
        units = [s.comm.units(2, 3, tr.edges) for s in tr.snapshots]
        assert units == sorted(units)
        assert units[-1] == predicted_units(7, 2, 3, 2, 3)

    def test_size_mismatch(self):
        p = random_quad_bilevel(4, 1, 1, seed=0)
        with pytest.raises(ValueError):
            dagm_run(p, metropolis_weights(path_graph(3)), RunConfig(0.1, 0.1, 1, 1, 1))

    def test_divergence(self):
        p = random_quad_bilevel(3, 2, 2, reg=1.0, seed=0)
        with pytest.raises(DivergenceError) as exc:
            dagm_run(p, metropolis_weights(path_graph(3)), RunConfig(50.0, 0.1, 1, 2, 100))
        assert exc.value.k < 100

    def test_single_node_matches_centralized_gd(self):
        p = random_quad_bilevel(1, 2, 3, reg=0.5, seed=4)
        alpha, K = 0.3, 200
        # M = 60 inner steps at beta = 0.5 leave a 2^-60 inner error
        tr = dagm_run(p, np.array([[1.0]]), RunConfig(alpha, 0.5, 0, 60, K))
        x = np.zeros(2)
        for k in range(K):
            x = x - alpha * p.outer_gradient(x)
            np.testing.assert_allclose(tr.snapshots[k + 1].x[0], x, atol=1e-10)
        np.testing.assert_allclose(tr.final.x[0], p.x_star, atol=1e-8)

    def test_deterministic(self):
        p = random_quad_bilevel(5, 2, 2, seed=3)
        W = metropolis_weights(random_connected_graph(5, 0.5, 3))
        cfg = RunConfig(0.2, 0.1, 3, 5, 20)
        a, b = dagm_run(p, W, cfg), dagm_run(p, W, cfg)
        for sa, sb in zip(a.snapshots, b.snapshots):
            assert np.array_equal(sa.x, sb.x) and np.array_equal(sa.y, sb.y)

    def test_callback_and_jsonl(self, tmp_path):
        p = random_quad_bilevel(3, 1, 2, seed=0)
        seen = []
        tr = dagm_run(p, metropolis_weights(path_graph(3)), RunConfig(0.1, 0.1, 1, 2, 3), callback=seen.append)
        assert len(seen) == 4
        tr.to_jsonl(tmp_path / "t.jsonl")
        recs = [json.loads(line) for line in (tmp_path / "t.jsonl").read_text().splitlines()]
        assert recs[-1]["units"] == predicted_units(3, 1, 2, 1, 2)
        assert recs[-1]["vectors_inner"] == 3 * 2 * 4

    def test_consensus_scales_with_alpha(self):
        g = random_connected_graph(6, 0.5, 2)
        W = metropolis_weights(g)
        p = random_quad_bilevel(6, 2, 2, reg=1.0, seed=0)
        sigma = network_constants(W)["sigma"]
        ratios = []
        for alpha in (1e-1, 1e-2, 1e-3):
            tr = dagm_run(p, W, RunConfig(alpha, 0.1, 5, 10, math.ceil(12 / alpha)))
            x = tr.final.x
            ratios.append(np.linalg.norm(x - x.mean(axis=0)) / (alpha / (1 - sigma)))
        assert max(ratios) / min(ratios) < 2.0


@settings(max_examples=100, deadline=None)
@given(
    K=st.integers(0, 6), U=st.integers(0, 5), M=st.integers(1, 6),
    d1=st.integers(1, 4), d2=st.integers(1, 4), n=st.integers(1, 7), seed=st.integers(0, 1000),
)
def test_counters_match_closed_form(K, U, M, d1, d2, n, seed):
    W = np.array([[1.0]]) if n == 1 else metropolis_weights(random_connected_graph(n, 0.5, seed))
    p = random_quad_bilevel(n, d1, d2, seed=seed)
    tr = dagm_run(p, W, RunConfig(0.01, 0.1, U, M, K))
    c = tr.final.comm
    E = tr.edges
    assert c.vectors_inner == K * M * E
    assert c.vectors_outer == K * (U + 1) * E
    assert c.floats == K * E * (M * d2 + d1 + U * d2)
    expected = predicted_units(K, U, M, d1, d2) if E else 0
    assert c.units(d1, d2, E) == expected


class TestSchedules:
    def test_network_constants_path3(self):
        net = network_constants(metropolis_weights(path_graph(3)))
        # I - W has eigenvalues {0, 1/3, 1}
        assert net["lap_min_nonzero"] == pytest.approx(1 / 3)
        assert net["lap_max"] == pytest.approx(1.0)
        assert net["sigma"] == pytest.approx(2 / 3)

    def test_single_node(self):
        net = network_constants(np.array([[1.0]]))
        assert net["lap_min_nonzero"] is None and net["sigma"] == 0.0

    def test_beta_bar_path3(self):
        p = random_quad_bilevel(3, 1, 1, seed=0, box=1.0)
        W = metropolis_weights(path_graph(3))
        # b_g = 1/3 + 1/2; caps: b_g / 1, 2/2, 1/b_g, 1
        sch = schedule_params(p.constants, W, 10, "theorem_nonconvex", U_fallback=3)
        assert sch.b_g == pytest.approx(5 / 6)
        assert sch.beta_bar == pytest.approx(5 / 6)

    def test_nonconvex_order(self):
        assert neumann_order("theorem_nonconvex", 100, 0.5, 1.0) == 4

    def test_convex_order(self):
        assert neumann_order("theorem_convex", 100, 0.5, 1.0) == math.ceil(math.log2(100))

    def test_strongly_convex_order_grows_with_K(self):
        a = neumann_order("theorem_strongly_convex", 10, 0.5, 1.0, contraction=0.9)
        b = neumann_order("theorem_strongly_convex", 100, 0.5, 1.0, contraction=0.9)
        assert b > a

    def test_order_needs_contraction(self):
        with pytest.raises(ScheduleError):
            neumann_order("theorem_convex", 10, 1.2, 1.0)

    def test_rho_at_least_one_reported(self):
        p = random_quad_bilevel(3, 1, 1, seed=0, box=1.0)
        with pytest.raises(ScheduleError, match="rho"):
            schedule_params(p.constants, metropolis_weights(path_graph(3)), 10, "theorem_convex", beta_cap=0.1)

    def test_unknown_lipschitz(self):
        c = ProblemConstants(mu_g=1.0, L_g=1.0, C_gyy=1.0)
        with pytest.raises(ScheduleError, match="L_F"):
            schedule_params(c, metropolis_weights(complete_graph(3)), 10, "theorem_convex")

    def test_strongly_convex_needs_inner_contraction(self):
        # uniform weights put beta_bar exactly at 1 / b_g
        p = random_quad_bilevel(4, 2, 2, reg=1.0, seed=0, box=1.0)
        with pytest.raises(ScheduleError, match="beta_cap"):
            schedule_params(p.constants, metropolis_weights(complete_graph(4)), 50, "theorem_strongly_convex")

    @pytest.mark.parametrize("mode,cap", [
        ("theorem_strongly_convex", 0.5), ("theorem_convex", 1.0), ("theorem_nonconvex", 0.125),
    ])
    def test_alpha_caps(self, mode, cap):
        p = random_quad_bilevel(5, 2, 2, reg=1.0, seed=0, box=1.0)
        W = metropolis_weights(cycle_graph(5))
        sch = schedule_params(p.constants, W, 50, mode)
        L_F = lipschitz_constants(p.constants, W)["L_F"]
        assert sch.alpha == pytest.approx(cap / L_F)
        bb, _ = beta_bar(W)
        assert sch.beta == pytest.approx(bb)
        assert sch.rho < 1 and sch.U >= 0 and sch.M >= 1

    def test_beta_cap(self):
        p = random_quad_bilevel(4, 2, 2, reg=1.0, seed=0, box=1.0)
        sch = schedule_params(p.constants, metropolis_weights(complete_graph(4)), 50, "theorem_convex", beta_cap=0.3)
        assert sch.beta == 0.3

    def test_single_node_schedule(self):
        p = random_quad_bilevel(1, 2, 2, reg=1.0, seed=0, box=1.0)
        sch = schedule_params(p.constants, np.array([[1.0]]), 20, "theorem_nonconvex")
        assert sch.b_g == pytest.approx(0.5)
        assert sch.rho == 0.0 and sch.U == 0

    def test_lipschitz_quad(self):
        # quad: only L_fx, C_gxy L_fy / mu_G and the Lt_fy term survive
        p = random_quad_bilevel(3, 2, 2, reg=0.7, seed=1, box=1.0)
        W = metropolis_weights(complete_graph(3))
        lip = lipschitz_constants(p.constants, W)
        mu_G = 1.0 + 1.0  # nonzero Laplacian eigenvalue of the uniform 3-clique is 1
        C = 0.7 + p.constants.C_gxy / mu_G
        assert lip["mu_G"] == pytest.approx(mu_G)
        assert lip["C"] == pytest.approx(C)
        assert lip["L_F"] == pytest.approx(C * p.constants.C_gxy / mu_G + 0.7)
