"""Stationarity measures, penalty-gap probes and theoretical constants."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import oracle
from .dagm import Trajectory, lipschitz_constants, network_constants
from .penalty import neumann_bounds, neumann_rate_bound, weights_of

__all__ = [
    "MODES",
    "MetricsRecord",
    "InnerSolveError",
    "constrained_inner_solution",
    "penalized_inner_solution",
    "centralized_value",
    "centralized_gradient",
    "reference_optimum",
    "stationarity",
    "penalty_gap",
    "penalty_gap_slope",
    "theory_constants",
    "metrics_records",
    "write_metrics_csv",
    "write_metrics_jsonl",
    "complexity_table",
    "METRIC_COLUMNS",
]

MODES = ("strongly_convex", "convex", "nonconvex")


class InnerSolveError(RuntimeError):
    pass


def _newton(grad, hess, y0, tol, value=None, max_iter=100):
    # stops on a small gradient or on a small full Newton step; the latter
    # stays meaningful when the gradient carries a 1/beta rounding floor
    y = np.array(y0, dtype=float)
    for _ in range(max_iter):
        g = grad(y)
        if np.linalg.norm(g) <= tol:
            return y
        step = np.linalg.solve(hess(y), g)
        t = 1.0
        if value is not None:
            f0 = value(y)
            while value(y - t * step) > f0 - 0.25 * t * float(g @ step) + 1e-14 * abs(f0) and t > 1e-10:
                t *= 0.5
        y = y - t * step
        if t == 1.0 and np.linalg.norm(step) <= tol:
            return y
    raise InnerSolveError(f"Newton solve stalled at gradient norm {np.linalg.norm(grad(y)):.3g}")


def constrained_inner_solution(p, x, tol: float = 1e-10) -> np.ndarray:
    """Common minimizer of ``(1/n) sum_i g_i(x_i, y)``.

    ``x`` may be one point shared by all agents or a stacked array.
    """
    x = np.asarray(x, dtype=float)
    xs = np.broadcast_to(x, (p.n, p.d1)) if x.ndim == 1 else x.reshape(p.n, p.d1)
    if getattr(p, "family", "") == "quad":
        return np.einsum("nij,nj->i", p.A, xs) / p.n + p.b_bar

    def stack(y):
        return np.broadcast_to(y, (p.n, p.d2))

    def value(y):
        return float(np.mean(p.g_values(xs, stack(y))))

    def grad(y):
        return p.grad_g_y(xs, stack(y)).mean(axis=0)

    def hess(y):
        return p.hess_g_yy(xs, stack(y)).mean(axis=0)

    return _newton(grad, hess, np.zeros(p.d2), tol, value)


def penalized_inner_solution(p, W, beta: float, x, tol: float = 1e-10) -> np.ndarray:
    """Minimizer of the penalized inner objective by Newton on the stacked system."""
    w = weights_of(W)
    n, d2 = w.shape[0], p.d2
    x = np.asarray(x, dtype=float).reshape(n, p.d1)
    lap = np.kron(np.eye(n) - w, np.eye(d2)) / beta

    def grad(v):
        y = v.reshape(n, d2)
        # sum_j w_ij (y_i - y_j): near consensus the differences are exact,
        # whereas y - W y cancels and the 1/beta factor amplifies the rounding
        lap_y = np.einsum("ij,ijk->ik", w, y[:, None, :] - y[None, :, :])
        return (lap_y / beta + p.grad_g_y(x, y)).reshape(-1)

    def hess(v):
        blocks = p.hess_g_yy(x, v.reshape(n, d2))
        out = lap.copy()
        for i in range(n):
            out[i * d2:(i + 1) * d2, i * d2:(i + 1) * d2] += blocks[i]
        return out

    def value(v):
        y = v.reshape(n, d2)
        diff = y[:, None, :] - y[None, :, :]
        quad = 0.25 * float(np.einsum("ij,ijk,ijk->", w, diff, diff))
        return quad / beta + float(np.sum(p.g_values(x, y)))

    y0 = np.broadcast_to(constrained_inner_solution(p, x, tol), (n, d2)).reshape(-1)
    v = _newton(grad, hess, y0, tol * p.constants.mu_g, value)
    return v.reshape(n, d2)


def centralized_value(p, x, y=None) -> float:
    """``(1/n) sum_i f_i(x, y*(x))`` at a common point ``x``."""
    x = np.asarray(x, dtype=float)
    if y is None:
        y = constrained_inner_solution(p, x)
    return float(np.mean(p.f_values(np.broadcast_to(x, (p.n, p.d1)), np.broadcast_to(y, (p.n, p.d2)))))


def centralized_gradient(p, x, y=None) -> np.ndarray:
    """True hypergradient of the centralized outer objective."""
    x = np.asarray(x, dtype=float)
    if y is None:
        y = constrained_inner_solution(p, x)
    xs = np.broadcast_to(x, (p.n, p.d1))
    ys = np.broadcast_to(y, (p.n, p.d2))
    fx = p.grad_f_x(xs, ys).mean(axis=0)
    fy = p.grad_f_y(xs, ys).mean(axis=0)
    gxy = p.jac_g_xy(xs, ys).mean(axis=0)
    gyy = p.hess_g_yy(xs, ys).mean(axis=0)
    return fx - gxy @ np.linalg.solve(gyy, fy)


_OPT_CACHE: dict = {}


def reference_optimum(p, steps: int = 200000, tol: float = 1e-10):
    """``(x*, f*)`` from the closed form, or a cached long centralized run."""
    if getattr(p, "family", "") == "quad":
        return p.x_star, p.f_star
    key = p.fingerprint()
    if key not in _OPT_CACHE:
        _OPT_CACHE[key] = oracle.centralized_bilevel_gd(p, steps=steps, tol=tol)
    return _OPT_CACHE[key]


def stationarity(p, traj: Trajectory, mode: str, f_star: Optional[float] = None) -> np.ndarray:
    """Per-iteration stationarity measure, one entry per snapshot.

    ``strongly_convex``: ``f(xbar_k, y*(xbar_k)) - f*``.
    ``convex``: the same gap at the running average of ``xbar_1..xbar_k``
    (``xbar_0`` at ``k = 0``).
    ``nonconvex``: mean of ``|grad f(xbar_j, y*(xbar_j))|^2`` over
    ``j < k`` (``j = 0`` at ``k = 0``).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    xbars = traj.x_bars()
    if mode == "nonconvex":
        sq = np.array([float(np.sum(centralized_gradient(p, xb) ** 2)) for xb in xbars])
        out = np.empty_like(sq)
        out[0] = sq[0]
        out[1:] = np.cumsum(sq)[:-1] / np.arange(1, len(sq))
        return out
    if f_star is None:
        try:
            f_star = reference_optimum(p)[1]
        except Exception as exc:
            raise ValueError(f"f* is unavailable for mode {mode!r}: {exc}") from exc
    if mode == "convex":
        pts = [xbars[0]] + [xbars[1:k + 1].mean(axis=0) for k in range(1, len(xbars))]
    else:
        pts = list(xbars)
    return np.array([centralized_value(p, xb) - f_star for xb in pts])


def penalty_gap(p, W, beta: float, x, tol: float = 1e-10) -> float:
    """``|y*(x) - ycheck*(x)|`` over the stacked copies."""
    w = weights_of(W)
    x = np.asarray(x, dtype=float).reshape(w.shape[0], p.d1)
    y_con = constrained_inner_solution(p, x, tol)
    y_pen = penalized_inner_solution(p, w, beta, x, tol)
    return float(np.linalg.norm(y_pen - y_con[None, :]))


def penalty_gap_slope(p, W, x, betas: Sequence[float]):
    """Least-squares slope of ``log gap`` against ``log beta``.

    Returns
    -------
    slope : float
    gaps : ndarray
    """
    betas = np.asarray(betas, dtype=float)
    gaps = np.array([penalty_gap(p, W, b, x) for b in betas])
    slope = np.polyfit(np.log(betas), np.log(gaps), 1)[0]
    return float(slope), gaps


def theory_constants(constants, W, beta: float, alpha: float, U: int) -> dict:
    """Evaluate the scalar constants of the convergence analysis.

    Unavailable entries are ``None``. ``flags`` lists violated
    preconditions: ``rho>=1`` and ``beta>beta_bar``.
    """
    net = network_constants(W)
    mu, L, Cyy = constants.mu_g, constants.L_g, constants.C_gyy
    base = mu * L / (mu + L)
    b_g = base if net["lap_min_nonzero"] is None else net["lap_min_nonzero"] + base
    caps = [2.0 / (mu + L), 1.0 / b_g, 1.0]
    if net["lap_max"] > 0:
        caps.append(b_g / (net["lap_max"] * L))
    beta_bar = min(caps)
    theta, Theta = net["theta"], net["Theta"]
    t = dict(net)
    t.update(b_g=b_g, beta_bar=beta_bar, beta=beta, alpha=alpha, U=U)
    rho = lam = Lam = rho_safe = None
    if 0 < theta <= Theta < 1:
        rho = 2.0 * (1.0 - theta) / (2.0 * (1.0 - Theta) + beta * mu)
        lam, Lam = neumann_bounds(theta, Theta, beta, mu, Cyy, U)
        rho_safe = neumann_rate_bound(theta, beta, mu, Cyy)
    t.update(rho=rho, lam=lam, Lam=Lam, rho_safe=rho_safe)
    t.update(lipschitz_constants(constants, W))
    eta = None
    if rho is not None and rho < 1 and constants.C_gxy is not None and constants.C_fy is not None:
        eta = beta * net["n"] ** 2 * constants.C_gxy * constants.C_fy / ((2.0 * (1.0 - Theta) + beta * mu) * (1.0 - rho))
    t["eta"] = eta
    mu_F = None if constants.mu_f is None else constants.mu_f + (1.0 - net["sigma"]) / (2.0 * alpha)
    t["mu_F"] = mu_F
    t["nu"] = None if mu_F is None else min(alpha * mu_F, beta * b_g)
    C_tilde = C_hat = None
    if constants.C_fx is not None and constants.C_fy is not None:
        C_hat = constants.C_fx + constants.C_fy
        if constants.C_gxy is not None and Lam is not None:
            C_tilde = constants.C_fx + 2.0 * constants.C_gxy * Lam * constants.C_fy / (mu + L)
    t.update(C_tilde=C_tilde, C_hat=C_hat)
    flags = []
    if rho is None or rho >= 1:
        flags.append("rho>=1")
    if beta > beta_bar:
        flags.append("beta>beta_bar")
    t["flags"] = flags
    return t


# --------------------------------------------------------------------------
# metrics

@dataclass
class MetricsRecord:
    k: int
    consensus_err: float
    hypergrad_norm: Optional[float] = None
    sc_gap: Optional[float] = None
    cvx_gap: Optional[float] = None
    ncvx_grad_sq: Optional[float] = None
    train_cost: Optional[float] = None
    test_mse: Optional[float] = None
    penalty_gap: Optional[float] = None
    msgs_d1: int = 0
    msgs_d2: int = 0
    comm_units: int = 0
    floats_sent: int = 0


METRIC_COLUMNS = tuple(f.name for f in fields(MetricsRecord))


def metrics_records(p, traj: Trajectory, measures: Sequence[str] = (), W=None, f_star=None) -> list:
    """Build one record per snapshot.

    ``measures`` selects optional columns among ``strongly_convex``,
    ``convex``, ``nonconvex``, ``train_cost``, ``test_mse`` and
    ``penalty_gap`` (the last needs ``W``).
    """
    recs = []
    for s in traj.snapshots:
        recs.append(
            MetricsRecord(
                k=s.k,
                consensus_err=s.consensus_err,
                hypergrad_norm=s.hypergrad_norm,
                msgs_d1=s.comm.vectors_outer,
                msgs_d2=s.comm.vectors_inner,
                comm_units=s.comm.units(traj.d1, traj.d2, traj.edges),
                floats_sent=s.comm.floats,
            )
        )
    column = {"strongly_convex": "sc_gap", "convex": "cvx_gap", "nonconvex": "ncvx_grad_sq"}
    for m in measures:
        if m in column:
            series = stationarity(p, traj, m, f_star)
            for r, v in zip(recs, series):
                setattr(r, column[m], float(v))
        elif m == "train_cost":
            for r, s in zip(recs, traj.snapshots):
                r.train_cost = p.train_cost(s.y)
        elif m == "test_mse":
            for r, s in zip(recs, traj.snapshots):
                r.test_mse = p.test_mse(s.y)
        elif m == "penalty_gap":
            if W is None:
                raise ValueError("penalty_gap needs the mixing matrix")
            for r, s in zip(recs, traj.snapshots):
                r.penalty_gap = penalty_gap(p, W, traj.config.beta, s.x)
        else:
            raise ValueError(f"unknown measure {m!r}")
    return recs


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for r in records:
            writer.writerow([_fmt(getattr(r, c)) for c in METRIC_COLUMNS])


def write_metrics_jsonl(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")


# --------------------------------------------------------------------------
# communication complexity

def complexity_table(n: int, d1: int, d2: int, eps: float, sigma: float,
                     K: Optional[int] = None, U: Optional[int] = None, M: Optional[int] = None) -> dict:
    """Leading-order communication costs with all hidden constants set to one.

    Rows: DAGM ``((d1 + d2) log(1/eps) + d1) / (n eps (1 - sigma)^2)``,
    DGBO ``(d2^2 log(1/eps) + d1 d2) / (eps (1 - sigma)^2)`` and
    DGTBO ``(d1 d2 log(1/eps) + d1) / (eps (1 - sigma)^2)``. With ``K``,
    ``U`` and ``M`` the exact per-neighbor count ``K((U+1) d1 + M d2)`` is
    added.
    """
    if min(n, d1, d2) <= 0 or eps <= 0:
        raise ValueError("n, d1, d2 and eps must be positive")
    if not 0 <= sigma < 1:
        raise ValueError(f"sigma must lie in [0, 1), got {sigma}")
    log_term = math.log(1.0 / eps)
    scale = eps * (1.0 - sigma) ** 2
    table = {
        "DAGM": ((d1 + d2) * log_term + d1) / (n * scale),
        "DGBO": (d2**2 * log_term + d1 * d2) / scale,
        "DGTBO": (d1 * d2 * log_term + d1) / scale,
    }
    if K is not None and U is not None and M is not None:
        table["DAGM_exact"] = K * ((U + 1) * d1 + M * d2)
    return table
