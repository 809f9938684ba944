"""Decentralized alternating gradient method for bilevel problems.

Every outer iteration runs ``M`` rounds of decentralized gradient descent
on the penalized inner problem (warm-started from the previous outer
iteration), estimates the inverse-Hessian-gradient product with ``U``
Neumann rounds, and takes one step along the assembled hypergradient.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .dihgp import dihgp, directed_edge_count
from .graph import laplacian_spectrum
from .penalty import StackedState, consensus_error, hessian_split, inner_penalized_grad, outer_penalty_grad, weights_of

__all__ = [
    "SCHEDULES",
    "RunConfig",
    "CommCounter",
    "Snapshot",
    "Trajectory",
    "DivergenceError",
    "ScheduleError",
    "Schedule",
    "inner_loop",
    "solve_inner",
    "hypergradient",
    "dagm_run",
    "network_constants",
    "lipschitz_constants",
    "schedule_params",
    "neumann_order",
    "predicted_units",
]

SCHEDULES = ("fixed", "theorem_strongly_convex", "theorem_convex", "theorem_nonconvex")


class DivergenceError(FloatingPointError):
    def __init__(self, k: int, reason: str):
        super().__init__(f"outer iteration {k}: {reason}")
        self.k = k


class ScheduleError(ValueError):
    pass


@dataclass
class RunConfig:
    alpha: float
    beta: float
    U: int
    M: int
    K: int
    seed: int = 0
    schedule: str = "fixed"
    divergence_threshold: float = 1e8

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"step sizes must be positive, got alpha={self.alpha}, beta={self.beta}")
        if self.U < 0 or self.M < 1 or self.K < 0:
            raise ValueError(f"need U >= 0, M >= 1, K >= 0; got U={self.U}, M={self.M}, K={self.K}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; choose from {SCHEDULES}")


@dataclass
class CommCounter:
    """Exact message counts.

    ``vectors_inner`` counts inner-loop exchanges of ``y`` blocks (length
    ``d2``). ``vectors_outer`` counts the outer-phase exchanges: one ``x``
    block plus one ``h`` block per Neumann round, all tallied in the
    outer-dimension unit. ``floats`` counts scalars actually sent, with
    ``h`` blocks at their true length ``d2``.
    """

    vectors_inner: int = 0
    vectors_outer: int = 0
    floats: int = 0

    def copy(self) -> "CommCounter":
        return CommCounter(self.vectors_inner, self.vectors_outer, self.floats)

    def units(self, d1: int, d2: int, edges: int) -> int:
        """Neighbor-normalized total ``(vectors_outer d1 + vectors_inner d2) / sum_i |N_i|``."""
        if edges == 0:
            return 0
        total = self.vectors_outer * d1 + self.vectors_inner * d2
        q, r = divmod(total, edges)
        assert r == 0, "counters are always whole multiples of the directed edge count"
        return q


def predicted_units(K: int, U: int, M: int, d1: int, d2: int) -> int:
    """Closed-form communication total ``K((U+1) d1 + M d2)``."""
    return K * ((U + 1) * d1 + M * d2)


@dataclass
class Snapshot:
    k: int
    x: np.ndarray
    y: np.ndarray
    hypergrad_norm: Optional[float]
    consensus_err: float
    comm: CommCounter
    wall: float


@dataclass
class Trajectory:
    config: RunConfig
    d1: int
    d2: int
    edges: int
    snapshots: list = field(default_factory=list)

    @property
    def final(self) -> Snapshot:
        return self.snapshots[-1]

    def x_bars(self) -> np.ndarray:
        return np.array([s.x.mean(axis=0) for s in self.snapshots])

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for s in self.snapshots:
                rec = {
                    "k": s.k,
                    "x": s.x.tolist(),
                    "y": s.y.tolist(),
                    "hypergrad_norm": s.hypergrad_norm,
                    "consensus_err": s.consensus_err,
                    "vectors_inner": s.comm.vectors_inner,
                    "vectors_outer": s.comm.vectors_outer,
                    "floats": s.comm.floats,
                    "units": s.comm.units(self.d1, self.d2, self.edges),
                    "wall_clock": s.wall,
                }
                fh.write(json.dumps(rec) + "\n")


def inner_loop(p, W, beta: float, x, y0, M: int, counter: Optional[CommCounter] = None) -> np.ndarray:
    """``M`` rounds of ``y <- y - beta q`` with ``q`` the penalized inner gradient."""
    if M < 1:
        raise ValueError(f"M must be at least 1, got {M}")
    s = StackedState(x, np.array(y0, dtype=float))
    for _ in range(M):
        s.y = s.y - beta * inner_penalized_grad(p, W, beta, s)
    if counter is not None:
        e = directed_edge_count(W)
        counter.vectors_inner += M * e
        counter.floats += M * e * s.y.shape[1]
    return s.y


def solve_inner(p, W, beta: float, x, y0=None, tol: float = 1e-10, max_iter: int = 10_000_000) -> np.ndarray:
    """Run the inner recursion until ``|y - ycheck*(x)| <= tol`` is certified.

    The certificate uses ``|y - ycheck*| <= |q| / mu_g``.
    """
    x = np.asarray(x, dtype=float)
    s = StackedState(x, np.zeros((x.shape[0], p.d2)) if y0 is None else np.array(y0, dtype=float))
    mu = p.constants.mu_g
    for _ in range(max_iter):
        q = inner_penalized_grad(p, W, beta, s)
        if np.linalg.norm(q) <= tol * mu:
            return s.y
        s.y = s.y - beta * q
    raise RuntimeError(f"inner solve did not reach tolerance {tol} in {max_iter} iterations")


def hypergradient(p, W, alpha: float, beta: float, x, y, h) -> np.ndarray:
    """Row ``i``: ``(1/alpha)((1 - w_ii) x_i - sum_j w_ij x_j) + grad_x f_i + beta J_i h_i``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mixed = np.einsum("nab,nb->na", p.jac_g_xy(x, y), h)
    return outer_penalty_grad(W, alpha, x) + p.grad_f_x(x, y) + beta * mixed


def dagm_run(p, W, cfg: RunConfig, x0=None, y0=None, callback: Optional[Callable] = None) -> Trajectory:
    """Run ``cfg.K`` outer iterations and record ``K + 1`` snapshots.

    Parameters
    ----------
    p : BilevelProblem
    W : MixingMatrix or ndarray
    cfg : RunConfig
    x0, y0 : ndarray, optional
        Initial stacked iterates; zeros by default.
    callback : callable, optional
        Called as ``callback(snapshot)`` after each recorded snapshot.

    Raises
    ------
    DivergenceError
        When an iterate becomes non-finite or its norm exceeds
        ``cfg.divergence_threshold``.
    """
    w = weights_of(W)
    n = w.shape[0]
    if n != p.n:
        raise ValueError(f"mixing matrix has {n} nodes but the problem has {p.n} agents")
    x = np.zeros((n, p.d1)) if x0 is None else np.array(x0, dtype=float).reshape(n, p.d1)
    y = np.zeros((n, p.d2)) if y0 is None else np.array(y0, dtype=float).reshape(n, p.d2)
    edges = directed_edge_count(w)
    counter = CommCounter()
    traj = Trajectory(cfg, p.d1, p.d2, edges)
    t0 = time.perf_counter()

    def record(k, g_norm):
        snap = Snapshot(k, x.copy(), y.copy(), g_norm, consensus_error(x), counter.copy(), time.perf_counter() - t0)
        traj.snapshots.append(snap)
        if callback is not None:
            callback(snap)

    record(0, None)
    for k in range(cfg.K):
        # warm start: the inner loop continues from the previous y
        y = inner_loop(p, w, cfg.beta, x, y, cfg.M, counter)
        s = StackedState(x, y)
        split = hessian_split(p, w, cfg.beta, s)
        h, _ = dihgp(p, w, cfg.beta, s, cfg.U, split=split, keep_iterates=False)
        d = hypergradient(p, w, cfg.alpha, cfg.beta, x, y, h)
        counter.vectors_outer += (cfg.U + 1) * edges
        counter.floats += edges * p.d1 + cfg.U * edges * p.d2
        x = x - cfg.alpha * d
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DivergenceError(k, "non-finite iterate")
        if np.linalg.norm(x) > cfg.divergence_threshold:
            raise DivergenceError(k, f"|x| exceeded {cfg.divergence_threshold:g}")
        record(k + 1, float(np.linalg.norm(d)))
    return traj


# --------------------------------------------------------------------------
# step-size schedules

def network_constants(W) -> dict:
    """Spectral quantities of ``I - W`` used by the schedules."""
    w = weights_of(W)
    n = w.shape[0]
    diag = np.diag(w)
    lap = laplacian_spectrum(w)
    if n > 1:
        lam_min_nz = float(lap[1])
        lam_max = float(lap[-1])
        ev = np.linalg.eigvalsh(w - np.full((n, n), 1.0 / n))
        sigma = float(min(max(abs(ev[0]), abs(ev[-1])), 1.0))
    else:
        lam_min_nz = None
        lam_max = 0.0
        sigma = 0.0
    return {
        "n": n,
        "theta": float(diag.min()),
        "Theta": float(diag.max()),
        "lap_min_nonzero": lam_min_nz,
        "lap_max": lam_max,
        "sigma": sigma,
    }


def _inner_rate(constants, net):
    mu, L = constants.mu_g, constants.L_g
    base = mu * L / (mu + L)
    return base if net["lap_min_nonzero"] is None else net["lap_min_nonzero"] + base


def _beta_cap(constants, net, b_g):
    mu, L = constants.mu_g, constants.L_g
    terms = [2.0 / (mu + L), 1.0 / b_g, 1.0]
    if net["lap_max"] > 0:
        terms.append(b_g / (net["lap_max"] * L))
    return min(terms)


_LF_NEEDS = ("C_gxy", "C_fy", "L_fx", "L_fy", "L_gxy", "L_gyy", "Lt_fy", "Lt_gxy", "Lt_gyy")


def lipschitz_constants(constants, W) -> dict:
    """``mu_G``, ``C`` and ``L_F`` for the penalized outer objective.

    Entries are ``None`` when a required problem constant is unknown.
    """
    net = network_constants(W)
    mu_G = (net["lap_min_nonzero"] or 0.0) + constants.mu_g
    out = {"mu_G": mu_G, "C": None, "L_F": None, "varrho": None}
    if constants.C_gxy is not None and constants.mu_g > 0:
        out["varrho"] = constants.C_gxy / constants.mu_g
    if any(getattr(constants, k) is None for k in _LF_NEEDS):
        return out
    c = constants
    C = c.L_fx + c.C_gxy * c.L_fy / mu_G + c.C_fy * (c.L_gxy / mu_G + c.C_gxy * c.L_gyy / mu_G**2)
    L_F = (c.Lt_fy + C) * c.C_gxy / mu_G + c.L_fx + c.C_fy * (c.Lt_gxy * c.C_fy / mu_G + c.C_gxy * c.Lt_gyy / mu_G**2)
    out.update(C=C, L_F=L_F)
    return out


@dataclass
class Schedule:
    alpha: float
    beta: float
    U: int
    M: int
    rho: float
    eta: Optional[float]
    L_F: float
    beta_bar: float
    b_g: float
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _ceil_abs(v: float) -> int:
    return abs(math.ceil(v))


def neumann_order(mode: str, K: int, rho: float, eta: float, contraction: float = 1.0, mult: float = 1.0) -> int:
    """Neumann truncation order for a theorem schedule.

    ``contraction`` is the inner-loop factor ``1 - beta b_g``; it enters
    only the strongly convex rule, evaluated at the final iterate ``K``.
    """
    if not 0 < rho < 1:
        raise ScheduleError(f"rho must lie in (0, 1), got {rho}")
    log_inv_rho = -math.log(rho)
    if mode == "theorem_strongly_convex":
        v = 0.5 * (math.log(eta**2 * K) - K * math.log(contraction)) / log_inv_rho
    elif mode == "theorem_convex":
        v = math.log(eta * K) / log_inv_rho
    elif mode == "theorem_nonconvex":
        v = 0.5 * math.log(eta**2 * K) / log_inv_rho
    else:
        raise ScheduleError(f"no Neumann rule for mode {mode!r}")
    return _ceil_abs(mult * v)


def schedule_params(
    constants,
    W,
    K: int,
    mode: str,
    beta_cap: Optional[float] = None,
    U_fallback: Optional[int] = None,
    M_mult: float = 1.0,
    U_mult: float = 1.0,
) -> Schedule:
    """Step sizes and loop lengths prescribed by the convergence theorems.

    Parameters
    ----------
    constants : ProblemConstants
    W : MixingMatrix or ndarray
    K : int
        Outer iteration budget.
    mode : {"theorem_strongly_convex", "theorem_convex", "theorem_nonconvex"}
    beta_cap : float, optional
        Extra upper bound on ``beta`` on top of the theoretical cap.
    U_fallback : int, optional
        Neumann order to use when ``eta`` cannot be evaluated.
    M_mult, U_mult : float
        Multipliers on the order-of-magnitude formulas for ``M`` and ``U``,
        whose hidden constants are taken to be one.

    Raises
    ------
    ScheduleError
        If ``L_F`` is unknown, if ``rho >= 1`` at the chosen ``beta``, or if
        ``U`` cannot be determined.
    """
    if mode not in SCHEDULES[1:]:
        raise ScheduleError(f"mode must be one of {SCHEDULES[1:]}, got {mode!r}")
    if K < 1:
        raise ScheduleError("K must be positive")
    if constants.mu_g <= 0:
        raise ScheduleError("mu_g must be positive")
    net = network_constants(W)
    b_g = _inner_rate(constants, net)
    beta_bar = _beta_cap(constants, net, b_g)
    beta = beta_bar if beta_cap is None else min(beta_bar, beta_cap)
    lip = lipschitz_constants(constants, W)
    if lip["L_F"] is None:
        missing = [k for k in _LF_NEEDS if getattr(constants, k) is None]
        raise ScheduleError(f"L_F needs the unknown constants {missing}")
    L_F = lip["L_F"]
    notes = []
    if net["n"] == 1:
        notes.append("single node: b_g reduces to mu_g L_g / (mu_g + L_g)")
    theta, Theta = net["theta"], net["Theta"]
    if net["n"] == 1:
        # B = 0, so the zeroth Neumann term is already exact
        rho = 0.0
    elif Theta >= 1.0:
        raise ScheduleError("self-weights must be below one for the Neumann constants")
    else:
        rho = 2.0 * (1.0 - theta) / (2.0 * (1.0 - Theta) + beta * constants.mu_g)
    if rho >= 1.0:
        raise ScheduleError(f"rho = {rho:.6g} >= 1 at beta = {beta:.6g}; the self-weight spread is too wide for this beta")
    contraction = 1.0 - beta * b_g
    if mode == "theorem_strongly_convex" and contraction <= 0.0:
        raise ScheduleError(
            f"1 - beta b_g = {contraction:.3g} at beta = {beta:.6g}; the strongly convex U rule needs it positive, "
            "pass beta_cap below 1/b_g"
        )
    eta = None
    if rho > 0.0 and constants.C_gxy is not None and constants.C_fy is not None:
        eta = beta * net["n"] ** 2 * constants.C_gxy * constants.C_fy / (
            (2.0 * (1.0 - Theta) + beta * constants.mu_g) * (1.0 - rho)
        )
    if mode == "theorem_strongly_convex":
        alpha = 1.0 / (2.0 * L_F)
        M = max(K, math.ceil(M_mult * abs(math.log(alpha)) / beta))
    elif mode == "theorem_convex":
        alpha = 1.0 / L_F
        M = math.ceil(M_mult * K * alpha / beta)
    else:
        alpha = 1.0 / (8.0 * L_F)
        M = math.ceil(M_mult * (1.0 + alpha**2) / beta)
    if rho == 0.0:
        U = 0
    elif eta is None or eta <= 0:
        if U_fallback is None:
            raise ScheduleError("eta is unknown for these constants; pass U_fallback")
        U = int(U_fallback)
        notes.append("U taken from the fallback because eta is unavailable")
    else:
        U = neumann_order(mode, K, rho, eta, contraction, U_mult)
    return Schedule(alpha, beta, int(U), int(max(M, 1)), rho, eta, L_F, beta_bar, b_g, notes)
