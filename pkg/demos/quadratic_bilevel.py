"""
DAGM on a strongly convex quadratic bilevel problem
===================================================

The quadratic family has a closed-form optimum, so the optimality gap can
be tracked exactly. Smaller step sizes reach a lower floor but need more
iterations to get there.
"""

import math

import numpy as np

from dagm.dagm import RunConfig, dagm_run
from dagm.diagnostics import penalty_gap_slope, stationarity
from dagm.graph import metropolis_weights, random_connected_graph
from dagm.penalty import neumann_rate_bound
from dagm.problem import random_quad_bilevel

g = random_connected_graph(10, 0.5, seed=3)
W = metropolis_weights(g)
p = random_quad_bilevel(10, 2, 2, reg=1.0, seed=0, heterogeneity=0.1)
print(f"x* = {p.x_star}, f* = {p.f_star:.5f}")

for step in (0.5, 0.05):
    # enough Neumann rounds for a 1e-6 inverse error, enough inner steps for y to settle
    U = math.ceil(math.log(1e-6) / math.log(neumann_rate_bound(W.theta, step, 1.0, 1.0)))
    M = max(10, math.ceil(2 / step))
    traj = dagm_run(p, W, RunConfig(alpha=step, beta=step, U=U, M=M, K=400))
    gap = stationarity(p, traj, "strongly_convex")
    print(f"\nalpha = beta = {step}: U = {U}, M = {M}")
    for k in (0, 10, 20, 40, 80, 160, 400):
        print(f"  K={k:3d}  gap = {gap[k]:.3e}  consensus error = {traj.snapshots[k].consensus_err:.2e}")
    print(f"  communication units = {traj.final.comm.units(2, 2, traj.edges)}")

# The penalized inner solution drifts from the exact one roughly linearly in beta
x = np.random.default_rng(0).standard_normal((10, 2))
slope, gaps = penalty_gap_slope(p, W, x, np.logspace(-4, -1, 7))
print("\npenalty gap: " + ", ".join(f"{v:.1e}" for v in gaps) + f"; log-log slope = {slope:.3f}")
