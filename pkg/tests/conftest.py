import warnings

import numpy as np
import pytest

from dagm.dagm import network_constants
from dagm.graph import complete_graph, cycle_graph, metropolis_weights, path_graph, random_connected_graph
from dagm.penalty import StackedState, rho_bound
from dagm.problem import random_quad_bilevel


def beta_bar(W, mu=1.0, L=1.0):
    net = network_constants(W)
    b_g = mu * L / (mu + L) + (net["lap_min_nonzero"] or 0.0)
    caps = [2.0 / (mu + L), 1.0 / b_g, 1.0]
    if net["lap_max"] > 0:
        caps.append(b_g / (net["lap_max"] * L))
    return min(caps), b_g


def _candidate_graph(rng):
    n = int(rng.integers(2, 9))
    kind = rng.integers(4)
    if n == 2 or kind == 0:
        return complete_graph(n)
    if kind == 1:
        return cycle_graph(n)
    return random_connected_graph(n, float(rng.choice([0.6, 0.8, 0.9])), int(rng.integers(1 << 30)))


def contracting_instances(count, seed=0, max_d2=5):
    """Random quad instances whose Neumann factor rho is below one.

    Graphs are drawn until the self-weight spread admits some beta in
    (2 (Theta - theta), beta_bar]; beta is then drawn from that range.
    """
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        g = _candidate_graph(rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            W = metropolis_weights(g)
        bb, _ = beta_bar(W)
        lo = 2.0 * (W.Theta - W.theta)
        if lo >= 0.9 * bb:
            continue
        beta = float(rng.uniform(max(lo * 1.05, 1e-3), bb))
        rho = rho_bound(W.theta, W.Theta, beta, 1.0)
        if rho >= 0.999:
            continue
        d1 = int(rng.integers(1, 5))
        d2 = int(rng.integers(1, max_d2 + 1))
        p = random_quad_bilevel(g.n, d1, d2, reg=1.0, seed=int(rng.integers(1 << 30)))
        s = StackedState(rng.standard_normal((g.n, d1)), rng.standard_normal((g.n, d2)))
        out.append((p, W, beta, s, rho))
    return out


@pytest.fixture
def path3():
    return path_graph(3)


@pytest.fixture
def path3_W(path3):
    return metropolis_weights(path3)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
