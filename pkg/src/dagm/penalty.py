"""Stacked penalized formulation and the block splitting of its Hessian.

Node copies are stored row-wise: ``x`` has shape ``(n, d1)`` and ``y`` has
shape ``(n, d2)``. Consensus is relaxed into the quadratic penalties

    F(x, y) = 1/(2 alpha) x^T (I - W) x + sum_i f_i(x_i, y_i)
    G(x, y) = 1/(2 beta)  y^T (I - W) y + sum_i g_i(x_i, y_i)

where ``W`` acts blockwise. Kronecker products are never formed: a product
with ``W`` is ``w @ v`` on the row-stacked array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import MixingMatrix

__all__ = [
    "StackedState",
    "HessianSplit",
    "SplitError",
    "weights_of",
    "neighbor_sum",
    "consensus_average",
    "consensus_error",
    "inner_penalized_grad",
    "outer_penalty_grad",
    "penalized_outer_value",
    "penalized_inner_value",
    "hessian_split",
    "apply_D",
    "apply_B",
    "apply_H",
    "solve_D",
    "rho_bound",
    "neumann_bounds",
    "neumann_rate_bound",
]


class SplitError(np.linalg.LinAlgError):
    """A local block ``D_ii`` is not numerically positive definite."""


def weights_of(W) -> np.ndarray:
    return W.w if isinstance(W, MixingMatrix) else np.asarray(W, dtype=float)


@dataclass
class StackedState:
    """Per-node copies of the outer and inner variables."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"x has {self.x.shape[0]} blocks but y has {self.y.shape[0]}")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @classmethod
    def zeros(cls, n: int, d1: int, d2: int) -> "StackedState":
        return cls(np.zeros((n, d1)), np.zeros((n, d2)))

    def x_bar(self) -> np.ndarray:
        return self.x.mean(axis=0)

    def y_bar(self) -> np.ndarray:
        return self.y.mean(axis=0)

    def copy(self) -> "StackedState":
        return StackedState(self.x.copy(), self.y.copy())


def consensus_average(v) -> np.ndarray:
    """Replace every block with the block average."""
    v = np.asarray(v, dtype=float)
    return np.broadcast_to(v.mean(axis=0), v.shape).copy()


def consensus_error(v) -> float:
    """Frobenius distance of the stacked blocks from their average."""
    v = np.asarray(v, dtype=float)
    return float(np.linalg.norm(v - v.mean(axis=0)))


def neighbor_sum(W, v) -> np.ndarray:
    """Row ``i`` is ``sum_{j != i} w_ij v_j``.

    Only entries on graph edges are nonzero, so row ``i`` depends on
    neighbor blocks alone.
    """
    w = weights_of(W)
    off = w - np.diag(np.diag(w))
    return off @ v


def _laplacian_apply(w, v):
    # ((1 - w_ii) v_i - sum_{j in N_i} w_ij v_j) == (I - W) v
    return v - w @ v


def inner_penalized_grad(p, W, beta: float, s: StackedState) -> np.ndarray:
    """Gradient of ``G`` in ``y``: ``(1/beta)(I - W) y + grad_y g``."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    w = weights_of(W)
    return _laplacian_apply(w, s.y) / beta + p.grad_g_y(s.x, s.y)


def outer_penalty_grad(W, alpha: float, x) -> np.ndarray:
    """Gradient of the outer consensus penalty, ``(1/alpha)(I - W) x``."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return _laplacian_apply(weights_of(W), np.asarray(x, dtype=float)) / alpha


def penalized_outer_value(p, W, alpha: float, s: StackedState) -> float:
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    w = weights_of(W)
    quad = float(np.sum(s.x * _laplacian_apply(w, s.x)))
    return quad / (2.0 * alpha) + float(np.sum(p.f_values(s.x, s.y)))


def penalized_inner_value(p, W, beta: float, s: StackedState) -> float:
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    w = weights_of(W)
    quad = float(np.sum(s.y * _laplacian_apply(w, s.y)))
    return quad / (2.0 * beta) + float(np.sum(p.g_values(s.x, s.y)))


@dataclass
class HessianSplit:
    """``H = D - B`` with block-diagonal ``D`` and neighbor-sparse ``B``.

    ``D_ii = beta * hess_y g_i + 2 (1 - w_ii) I``; ``B`` has diagonal blocks
    ``(1 - w_ii) I`` and off-diagonal blocks ``w_ij I``.
    """

    D_blocks: np.ndarray
    w: np.ndarray
    beta: float
    D_inv: np.ndarray

    @property
    def n(self) -> int:
        return self.D_blocks.shape[0]

    @property
    def d2(self) -> int:
        return self.D_blocks.shape[1]


def hessian_split(p, W, beta: float, s: StackedState) -> HessianSplit:
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    w = weights_of(W)
    hyy = p.hess_g_yy(s.x, s.y)
    d2 = hyy.shape[-1]
    shift = 2.0 * (1.0 - np.diag(w))
    D = beta * hyy + shift[:, None, None] * np.eye(d2)
    D = 0.5 * (D + np.transpose(D, (0, 2, 1)))
    try:
        L = np.linalg.cholesky(D)
    except np.linalg.LinAlgError as exc:
        eigs = np.linalg.eigvalsh(D)[:, 0]
        bad = [int(i) for i in np.flatnonzero(eigs <= 0)]
        raise SplitError(f"local blocks D_ii not positive definite at nodes {bad}; inner Hessian is not SPD") from exc
    Linv = np.linalg.inv(L)
    D_inv = np.transpose(Linv, (0, 2, 1)) @ Linv
    return HessianSplit(D, w, float(beta), D_inv)


def apply_D(split: HessianSplit, v) -> np.ndarray:
    return np.einsum("nij,nj->ni", split.D_blocks, v)


def apply_B(split: HessianSplit, v) -> np.ndarray:
    """Row ``i`` is ``(1 - w_ii) v_i + sum_{j in N_i} w_ij v_j``."""
    v = np.asarray(v, dtype=float)
    w = split.w
    return v + w @ v - 2.0 * np.diag(w)[:, None] * v


def apply_H(split: HessianSplit, v) -> np.ndarray:
    return apply_D(split, v) - apply_B(split, v)


def solve_D(split: HessianSplit, b) -> np.ndarray:
    return np.einsum("nij,nj->ni", split.D_inv, b)


# --------------------------------------------------------------------------
# scalar constants of the truncated Neumann approximation

def _check_domain(theta, Theta, beta, mu_g):
    if not 0 < theta <= Theta < 1:
        raise ValueError(f"need 0 < theta <= Theta < 1, got theta={theta}, Theta={Theta}")
    if beta <= 0 or mu_g <= 0:
        raise ValueError(f"beta and mu_g must be positive, got beta={beta}, mu_g={mu_g}")


def rho_bound(theta: float, Theta: float, beta: float, mu_g: float) -> float:
    """``rho = 2(1 - theta) / (2(1 - Theta) + beta mu_g)``.

    The value is returned as computed. It exceeds one when the spread of
    self-weights dominates ``beta mu_g``; callers decide what to do then.
    """
    _check_domain(theta, Theta, beta, mu_g)
    return 2.0 * (1.0 - theta) / (2.0 * (1.0 - Theta) + beta * mu_g)


def neumann_bounds(theta: float, Theta: float, beta: float, mu_g: float, C_gyy: float, U: int):
    """Eigenvalue bounds ``(lam, Lam)`` of the order-``U`` inverse approximation."""
    _check_domain(theta, Theta, beta, mu_g)
    if U < 0:
        raise ValueError(f"U must be nonnegative, got {U}")
    rho = rho_bound(theta, Theta, beta, mu_g)
    denom = 2.0 * (1.0 - Theta) + beta * mu_g
    lam = 1.0 / (2.0 * (1.0 - theta) + beta * C_gyy)
    if rho == 1.0:
        series = U + 1.0
    else:
        series = (1.0 - rho ** (U + 1)) / (1.0 - rho)
    return lam, series / denom


def neumann_rate_bound(theta: float, beta: float, mu_g: float, C_gyy: float) -> float:
    """Contraction factor of the Neumann recursion that holds for every graph.

    ``D^{-1/2} B D^{-1/2} = I - D^{-1/2} H D^{-1/2}`` has spectrum in
    ``[0, 1 - beta mu_g / (2(1 - theta) + beta C_gyy)]``, so this factor is
    always below one. It is usually far looser than ``rho_bound`` when the
    latter is below one.
    """
    if not 0 < theta < 1 or beta <= 0 or mu_g <= 0:
        raise ValueError("need 0 < theta < 1 and positive beta, mu_g")
    return 1.0 - beta * mu_g / (2.0 * (1.0 - theta) + beta * C_gyy)
