"""Brute-force dense references for testing.

Everything here assembles explicit matrices with Kronecker products and
solves them with direct factorizations. Nothing is shared with the
iterative code paths in ``penalty``, ``dihgp`` or ``dagm``; a test enforces
that this module never imports them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

__all__ = [
    "OracleSizeError",
    "OracleConvergenceError",
    "DenseSystem",
    "dense_assemble",
    "dense_split",
    "dense_ihgp",
    "dense_truncated_neumann",
    "dense_penalized_inner",
    "dense_penalized_objective",
    "dense_constrained_inner",
    "fd_hypergradient",
    "centralized_objective",
    "centralized_hypergradient",
    "centralized_bilevel_gd",
    "MAX_NODES",
    "MAX_DIM",
]

MAX_NODES = 16
MAX_DIM = 8


class OracleSizeError(ValueError):
    pass


class OracleConvergenceError(RuntimeError):
    pass


def _w(W):
    return np.asarray(W.w if hasattr(W, "w") else W, dtype=float)


def _cap(p, stacked=True):
    if stacked and p.n > MAX_NODES:
        raise OracleSizeError(f"dense oracles accept at most {MAX_NODES} nodes, got {p.n}")
    if max(p.d1, p.d2) > MAX_DIM:
        raise OracleSizeError(f"dense oracles accept dimensions up to {MAX_DIM}, got d1={p.d1}, d2={p.d2}")


def _blockdiag(blocks):
    return sla.block_diag(*blocks) if len(blocks) else np.zeros((0, 0))


@dataclass
class DenseSystem:
    H: np.ndarray
    L_x: np.ndarray


def dense_assemble(p, W, beta: float, s) -> DenseSystem:
    """``H = (I - W) kron I + beta * blockdiag(hess_y g_i)`` and ``(I - W) kron I``."""
    _cap(p)
    w = _w(W)
    n = w.shape[0]
    hess = [p.locals[i].hess_g_yy(s.x[i], s.y[i]) for i in range(n)]
    H = np.kron(np.eye(n) - w, np.eye(p.d2)) + beta * _blockdiag(hess)
    L_x = np.kron(np.eye(n) - w, np.eye(p.d1))
    return DenseSystem(H, L_x)


def dense_split(p, W, beta: float, s):
    """Dense ``D`` and ``B`` with ``H = D - B``."""
    _cap(p)
    w = _w(W)
    n = w.shape[0]
    I2 = np.eye(p.d2)
    Wd = np.diag(np.diag(w))
    hess = [p.locals[i].hess_g_yy(s.x[i], s.y[i]) for i in range(n)]
    D = beta * _blockdiag(hess) + 2.0 * np.kron(np.eye(n) - Wd, I2)
    B = np.kron(np.eye(n) - 2.0 * Wd + w, I2)
    return D, B


def dense_ihgp(sys: DenseSystem, p_vec) -> np.ndarray:
    """Exact ``-H^{-1} p`` by Cholesky."""
    p_flat = np.asarray(p_vec, dtype=float).reshape(-1)
    c = sla.cho_factor(sys.H)
    return -sla.cho_solve(c, p_flat).reshape(np.shape(p_vec))


def _inv_sqrt(D):
    vals, vecs = np.linalg.eigh(D)
    if vals.min() <= 0:
        raise np.linalg.LinAlgError("D is not positive definite")
    return (vecs / np.sqrt(vals)) @ vecs.T


def dense_truncated_neumann(sys: DenseSystem, D, B, p_vec, U: int) -> np.ndarray:
    """``-D^{-1/2} sum_{u<=U} (D^{-1/2} B D^{-1/2})^u D^{-1/2} p`` by explicit powers."""
    S = _inv_sqrt(D)
    X = S @ B @ S
    acc = np.zeros_like(X)
    P = np.eye(X.shape[0])
    for _ in range(U + 1):
        acc += P
        P = P @ X
    approx_inv = S @ acc @ S
    p_flat = np.asarray(p_vec, dtype=float).reshape(-1)
    return -(approx_inv @ p_flat).reshape(np.shape(p_vec))


# --------------------------------------------------------------------------
# inner solves

def _newton(value, grad, hess, y0, tol, max_iter=200):
    y = np.array(y0, dtype=float)
    for _ in range(max_iter):
        g = grad(y)
        if np.linalg.norm(g) <= tol:
            return y
        step = np.linalg.solve(hess(y), g)
        t = 1.0
        f0 = value(y)
        while value(y - t * step) > f0 - 0.25 * t * float(g @ step) and t > 1e-12:
            t *= 0.5
        y = y - t * step
        if t == 1.0 and np.linalg.norm(step) <= tol:
            return y
        if t * np.linalg.norm(step) <= 1e-15 * max(1.0, np.linalg.norm(y)):
            if np.linalg.norm(grad(y)) <= 100 * tol:
                return y
    raise OracleConvergenceError(f"Newton did not reach gradient norm {tol} in {max_iter} iterations")


def dense_penalized_inner(p, W, beta: float, x, y0=None, tol: float = 1e-11) -> np.ndarray:
    """Minimizer of ``G(x, .)`` by damped Newton, shape ``(n, d2)``."""
    _cap(p)
    w = _w(W)
    n, d2 = w.shape[0], p.d2
    x = np.asarray(x, dtype=float).reshape(n, p.d1)
    Lap = np.kron(np.eye(n) - w, np.eye(d2))
    locs = p.locals

    def value(v):
        y = v.reshape(n, d2)
        return 0.5 * v @ Lap @ v / beta + sum(locs[i].g_val(x[i], y[i]) for i in range(n))

    def grad(v):
        y = v.reshape(n, d2)
        return Lap @ v / beta + np.concatenate([locs[i].grad_g_y(x[i], y[i]) for i in range(n)])

    def hess(v):
        y = v.reshape(n, d2)
        return Lap / beta + _blockdiag([locs[i].hess_g_yy(x[i], y[i]) for i in range(n)])

    v0 = np.zeros(n * d2) if y0 is None else np.asarray(y0, dtype=float).reshape(-1)
    return _newton(value, grad, hess, v0, tol).reshape(n, d2)


def dense_penalized_objective(p, W, alpha: float, beta: float, x, tol: float = 1e-11) -> float:
    """``F(x, ycheck*(x))`` with the inner point from ``dense_penalized_inner``."""
    w = _w(W)
    n = w.shape[0]
    x = np.asarray(x, dtype=float).reshape(n, p.d1)
    y = dense_penalized_inner(p, W, beta, x, tol=tol)
    v = x.reshape(-1)
    pen = 0.5 * v @ np.kron(np.eye(n) - w, np.eye(p.d1)) @ v / alpha
    return float(pen + sum(p.locals[i].f_val(x[i], y[i]) for i in range(n)))


def dense_constrained_inner(p, x, y0=None, tol: float = 1e-11) -> np.ndarray:
    """Common ``y`` minimizing ``(1/n) sum_i g_i(x_i, y)``.

    ``x`` is either one point of length ``d1`` shared by all agents or a
    stacked ``(n, d1)`` array.
    """
    _cap(p, stacked=False)
    x = np.asarray(x, dtype=float)
    xs = np.broadcast_to(x, (p.n, p.d1)) if x.ndim == 1 else x.reshape(p.n, p.d1)
    locs = p.locals
    n = p.n

    def value(y):
        return sum(locs[i].g_val(xs[i], y) for i in range(n)) / n

    def grad(y):
        return sum(locs[i].grad_g_y(xs[i], y) for i in range(n)) / n

    def hess(y):
        return sum(locs[i].hess_g_yy(xs[i], y) for i in range(n)) / n

    y0 = np.zeros(p.d2) if y0 is None else y0
    return _newton(value, grad, hess, y0, tol)


def fd_hypergradient(p, W, alpha: float, beta: float, x, eps: float = 1e-6, tol: float = 1e-11) -> np.ndarray:
    """Central differences of ``x -> F(x, ycheck*(x))``, shape ``(n, d1)``."""
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    _cap(p)
    x = np.asarray(x, dtype=float).reshape(p.n, p.d1)
    out = np.zeros_like(x)
    for i in range(p.n):
        for a in range(p.d1):
            xp = x.copy()
            xm = x.copy()
            xp[i, a] += eps
            xm[i, a] -= eps
            fp = dense_penalized_objective(p, W, alpha, beta, xp, tol)
            fm = dense_penalized_objective(p, W, alpha, beta, xm, tol)
            out[i, a] = (fp - fm) / (2.0 * eps)
    return out


# --------------------------------------------------------------------------
# centralized bilevel reference

def centralized_objective(p, x, y=None) -> float:
    """``(1/n) sum_i f_i(x, y*(x))`` for a common ``x``."""
    x = np.asarray(x, dtype=float)
    if y is None:
        y = dense_constrained_inner(p, x)
    return float(np.mean([loc.f_val(x, y) for loc in p.locals]))


def centralized_hypergradient(p, x, y=None) -> np.ndarray:
    """Implicit-function gradient of the centralized outer objective."""
    x = np.asarray(x, dtype=float)
    if y is None:
        y = dense_constrained_inner(p, x)
    n = p.n
    fx = sum(loc.grad_f_x(x, y) for loc in p.locals) / n
    fy = sum(loc.grad_f_y(x, y) for loc in p.locals) / n
    gxy = sum(loc.jac_g_xy(x, y) for loc in p.locals) / n
    gyy = sum(loc.hess_g_yy(x, y) for loc in p.locals) / n
    return fx - gxy @ np.linalg.solve(gyy, fy)


def centralized_bilevel_gd(p, steps: int = 20000, tol: float = 1e-9, x0=None):
    """Gradient descent on the reduced objective with exact inner solves.

    Step sizes adapt by Armijo backtracking and are allowed to grow after
    each accepted step.

    Returns
    -------
    x_star : ndarray
    f_star : float
    """
    _cap(p, stacked=False)
    x = np.zeros(p.d1) if x0 is None else np.array(x0, dtype=float)
    y = dense_constrained_inner(p, x)
    f = centralized_objective(p, x, y)
    t = 1.0
    for _ in range(steps):
        g = centralized_hypergradient(p, x, y)
        gn = float(g @ g)
        if np.sqrt(gn) <= tol:
            return x, f
        while True:
            xn = x - t * g
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    yn = dense_constrained_inner(p, xn, y0=y)
                    fn = centralized_objective(p, xn, yn)
            except (OracleConvergenceError, np.linalg.LinAlgError):
                fn = np.inf
            if not np.isfinite(fn):
                # an overlong trial step; shrink and retry
                t *= 0.5
                if t < 1e-14:
                    break
                continue
            if fn <= f - 0.5 * t * gn or t < 1e-14:
                break
            # below the resolution of f, accept any step that shrinks the gradient
            if 0.5 * t * gn <= 1e-13 * max(1.0, abs(f)):
                if np.linalg.norm(centralized_hypergradient(p, xn, yn)) < np.sqrt(gn):
                    break
            t *= 0.5
        if t < 1e-14:
            break
        x, y, f = xn, yn, fn
        t *= 2.0
    g = centralized_hypergradient(p, x, y)
    if np.linalg.norm(g) <= tol:
        return x, f
    raise OracleConvergenceError(f"gradient norm {np.linalg.norm(g):.3g} above {tol} after {steps} steps")
