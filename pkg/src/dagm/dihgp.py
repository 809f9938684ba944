"""Decentralized inverse-Hessian-gradient product by a truncated Neumann series.

Each node solves only its own ``D_ii`` system and talks to its neighbors
once per round:

    h_(0)   = -D^{-1} p
    h_(s+1) = D^{-1} (B h_(s) - p),     s = 0 .. U-1

with ``p_i = grad_y f_i(x_i, y_i)``. ``h_(U)`` approximates ``-H^{-1} p``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .penalty import HessianSplit, StackedState, apply_B, hessian_split, rho_bound, solve_D, weights_of

__all__ = ["DihgpTrace", "dihgp", "dihgp_step", "dihgp_error", "directed_edge_count"]


def directed_edge_count(W) -> int:
    """Number of ordered neighbor pairs, i.e. ``sum_i |N_i|``."""
    w = weights_of(W)
    off = w - np.diag(np.diag(w))
    return int(np.count_nonzero(off))


@dataclass
class DihgpTrace:
    iterates: list = field(default_factory=list)
    messages: list = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return len(self.iterates) - 1

    @property
    def total_messages(self) -> int:
        return int(sum(self.messages))

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for s, (h, m) in enumerate(zip(self.iterates, self.messages)):
                rec = {"round": s, "h_norms": [float(v) for v in np.linalg.norm(h, axis=1)], "messages": int(m)}
                fh.write(json.dumps(rec) + "\n")


def dihgp_step(split: HessianSplit, h_prev, p_vec) -> np.ndarray:
    """One synchronous round of the recursion."""
    return solve_D(split, apply_B(split, h_prev) - p_vec)


def dihgp(p, W, beta: float, s: StackedState, U: int, split: HessianSplit | None = None, keep_iterates: bool = True):
    """Run ``U`` communication rounds and return ``(h_(U), trace)``.

    Parameters
    ----------
    p : BilevelProblem
    W : MixingMatrix or ndarray
    beta : float
        Inner step size, which also scales the inner consensus penalty.
    s : StackedState
        Point ``(x, y)`` at which derivatives are evaluated.
    U : int
        Number of Neumann rounds after the local initialization.
    split : HessianSplit, optional
        Reuse a split already computed at ``s``.
    keep_iterates : bool
        Store every ``h_(s)`` in the trace. The message counts are always kept.
    """
    if U < 0:
        raise ValueError(f"U must be nonnegative, got {U}")
    if split is None:
        split = hessian_split(p, W, beta, s)
    p_vec = p.grad_f_y(s.x, s.y)
    per_round = directed_edge_count(split.w)
    h = -solve_D(split, p_vec)
    trace = DihgpTrace()
    trace.iterates.append(h if keep_iterates else None)
    trace.messages.append(0)
    for _ in range(U):
        h = dihgp_step(split, h, p_vec)
        if keep_iterates:
            trace.iterates.append(h)
        else:
            trace.iterates.append(None)
        trace.messages.append(per_round)
    return h, trace


def dihgp_error(p, W, beta: float, s: StackedState, U: int):
    """Distance of ``h_(U)`` from the exact product, with a geometric bound.

    The bound follows from ``H_U^{-1} - H^{-1} = D^{-1/2} X^{U+1} (I - X)^{-1} D^{-1/2}``
    with ``X = D^{-1/2} B D^{-1/2}``: using ``|X| <= rho`` and
    ``|D^{-1}| <= 1 / (2(1 - Theta) + beta mu_g)`` gives

        |h_(U) - h| <= rho^{U+1} |p| / ((1 - rho)(2(1 - Theta) + beta mu_g)).

    Returns
    -------
    abs_err, bound : float
    """
    w = weights_of(W)
    diag = np.diag(w)
    theta, Theta = float(diag.min()), float(diag.max())
    mu_g = p.constants.mu_g
    if Theta >= 1.0:
        raise ValueError("self-weights must be below one")
    rho = rho_bound(theta, Theta, beta, mu_g)
    if rho >= 1.0:
        raise ValueError(f"rho = {rho:.6g} >= 1 for this instance; the error bound does not apply")
    split = hessian_split(p, W, beta, s)
    h, _ = dihgp(p, W, beta, s, U, split=split, keep_iterates=False)
    p_vec = p.grad_f_y(s.x, s.y)
    n, d2 = p_vec.shape
    # exact product from an assembled dense system
    H = np.zeros((n * d2, n * d2))
    for i in range(n):
        H[i * d2:(i + 1) * d2, i * d2:(i + 1) * d2] = split.D_blocks[i]
    H -= np.kron(np.eye(n) - 2.0 * np.diag(diag) + w, np.eye(d2))
    h_exact = -np.linalg.solve(H, p_vec.reshape(-1)).reshape(n, d2)
    abs_err = float(np.linalg.norm(h - h_exact))
    denom = 2.0 * (1.0 - Theta) + beta * mu_g
    bound = rho ** (U + 1) * float(np.linalg.norm(p_vec)) / ((1.0 - rho) * denom)
    return abs_err, bound
