"""
Mixing matrices on small networks
=================================

Build a few graphs, weight them with Metropolis and max-degree rules, and
look at the numbers that drive every convergence constant downstream.
"""

import numpy as np

from dagm.graph import (
    complete_graph,
    max_degree_weights,
    metropolis_weights,
    path_graph,
    random_connected_graph,
    spectral_gap,
    star_graph,
    validate_mixing,
)

np.set_printoptions(precision=3, suppress=True)

# The 3-node path is the smallest graph with unequal degrees
g = path_graph(3)
W = metropolis_weights(g)
print("Metropolis weights on the 3-path:")
print(W.w)
print(validate_mixing(W, g))

# sigma is the second largest eigenvalue magnitude; smaller means faster mixing
for name, graph in [("path-8", path_graph(8)), ("star-8", star_graph(8)),
                    ("complete-8", complete_graph(8)), ("random-8", random_connected_graph(8, 0.5, seed=0))]:
    met = metropolis_weights(graph)
    mdeg = max_degree_weights(graph)
    print(f"{name:11s} sigma(metropolis) = {spectral_gap(met):.3f}  sigma(max-degree) = {spectral_gap(mdeg):.3f}"
          f"  self-weights in [{met.theta:.3f}, {met.Theta:.3f}]")

# Sparse random graphs mix slowly; dense ones almost instantly
for r in (0.1, 0.3, 0.5, 0.9):
    sig = [spectral_gap(metropolis_weights(random_connected_graph(30, r, seed=s))) for s in range(5)]
    print(f"n=30, r={r}: mean sigma = {np.mean(sig):.3f}")
