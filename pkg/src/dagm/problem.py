"""Per-agent bilevel objectives and the built-in problem families.

Every agent ``i`` owns an outer objective ``f_i(x, y)`` and an inner
objective ``g_i(x, y)``; the network jointly solves

    min_x (1/n) sum_i f_i(x, y*(x))  s.t.  y*(x) = argmin_y (1/n) sum_i g_i(x, y).

Stacked quantities are arrays of shape ``(n, d)``, one row per agent.
"""

from __future__ import annotations

import csv
import hashlib
import math
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit, logsumexp

__all__ = [
    "LocalObjectivePair",
    "ProblemConstants",
    "BilevelProblem",
    "QuadBilevel",
    "AgentData",
    "ProblemWarning",
    "ConstantsReport",
    "quad_bilevel",
    "random_quad_bilevel",
    "ho_problem",
    "synthetic_regression_data",
    "read_dataset_csv",
    "write_dataset_csv",
    "verify_constants",
    "LOSSES",
]

LOSSES = ("linear", "logistic", "smoothed_svm", "softmax")


class ProblemWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LocalObjectivePair:
    """Oracle bundle for one agent.

    ``jac_g_xy`` returns the mixed block ``d/dx grad_y g`` laid out as a
    ``(d1, d2)`` matrix; ``hess_g_yy`` returns ``(d2, d2)``.
    """

    f_val: Callable
    grad_f_x: Callable
    grad_f_y: Callable
    g_val: Callable
    grad_g_y: Callable
    jac_g_xy: Callable
    hess_g_yy: Callable


@dataclass
class ProblemConstants:
    """Smoothness and curvature constants.

    ``L_*`` are Lipschitz constants in ``y`` for fixed ``x``; the ``Lt_*``
    variants are Lipschitz constants in ``x`` for fixed ``y``. ``C_fx`` and
    ``C_fy`` bound gradient norms and ``C_gxy`` bounds the spectral norm of
    the mixed second derivative. ``None`` marks a constant that is unknown
    or unbounded for the family.
    """

    mu_g: float
    L_g: float
    C_gyy: float
    C_gxy: Optional[float] = None
    C_fx: Optional[float] = None
    C_fy: Optional[float] = None
    L_fx: Optional[float] = None
    L_fy: Optional[float] = None
    L_gxy: Optional[float] = None
    L_gyy: Optional[float] = None
    Lt_fy: Optional[float] = None
    Lt_gxy: Optional[float] = None
    Lt_gyy: Optional[float] = None
    mu_f: Optional[float] = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and (not math.isfinite(v) or v < 0):
                raise ValueError(f"constant {f.name} must be finite and nonnegative, got {v}")
        if self.mu_g > self.C_gyy:
            raise ValueError(f"mu_g={self.mu_g} exceeds C_gyy={self.C_gyy}")
        if self.mu_g == 0:
            warnings.warn("mu_g = 0: inner objective is not strongly convex", ProblemWarning, stacklevel=3)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class BilevelProblem:
    """A bilevel problem split across ``n`` agents.

    The stacked methods below evaluate every agent's oracle at its own row
    of ``x`` and ``y``. Families with cheap batched formulas override them.
    """

    family = "generic"

    def __init__(self, d1: int, d2: int, locals: Sequence[LocalObjectivePair], constants: ProblemConstants):
        if len(locals) == 0:
            raise ValueError("a problem needs at least one agent")
        self.d1 = int(d1)
        self.d2 = int(d2)
        self.locals = list(locals)
        self.constants = constants

    @property
    def n(self) -> int:
        return len(self.locals)

    def _rows(self, x, y):
        x = np.asarray(x, dtype=float).reshape(self.n, self.d1)
        y = np.asarray(y, dtype=float).reshape(self.n, self.d2)
        return x, y

    def f_values(self, x, y) -> np.ndarray:
        x, y = self._rows(x, y)
        return np.array([loc.f_val(x[i], y[i]) for i, loc in enumerate(self.locals)])

    def g_values(self, x, y) -> np.ndarray:
        x, y = self._rows(x, y)
        return np.array([loc.g_val(x[i], y[i]) for i, loc in enumerate(self.locals)])

    def grad_f_x(self, x, y) -> np.ndarray:
        x, y = self._rows(x, y)
        return np.array([loc.grad_f_x(x[i], y[i]) for i, loc in enumerate(self.locals)]).reshape(self.n, self.d1)

    def grad_f_y(self, x, y) -> np.ndarray:
        x, y = self._rows(x, y)
        return np.array([loc.grad_f_y(x[i], y[i]) for i, loc in enumerate(self.locals)]).reshape(self.n, self.d2)

    def grad_g_y(self, x, y) -> np.ndarray:
        x, y = self._rows(x, y)
        return np.array([loc.grad_g_y(x[i], y[i]) for i, loc in enumerate(self.locals)]).reshape(self.n, self.d2)

    def jac_g_xy(self, x, y) -> np.ndarray:
        x, y = self._rows(x, y)
        return np.array([loc.jac_g_xy(x[i], y[i]) for i, loc in enumerate(self.locals)]).reshape(
            self.n, self.d1, self.d2
        )

    def hess_g_yy(self, x, y) -> np.ndarray:
        x, y = self._rows(x, y)
        return np.array([loc.hess_g_yy(x[i], y[i]) for i, loc in enumerate(self.locals)]).reshape(
            self.n, self.d2, self.d2
        )

    def fingerprint(self) -> str:
        """Stable identifier used to cache expensive reference solves."""
        return f"{self.family}-{id(self)}"


# --------------------------------------------------------------------------
# quadratic family

class QuadBilevel(BilevelProblem):
    """``g_i = 1/2 |y - A_i x - b_i|^2``, ``f_i = 1/2 |y - c_i|^2 + reg/2 |x|^2``.

    The lower-level solution is ``y*(x) = A_bar x + b_bar`` and the reduced
    outer objective is a strongly convex quadratic when ``reg > 0``.
    """

    family = "quad"

    def __init__(self, A, b, c, reg, box=None):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.reg = float(reg)
        n, d2, d1 = self.A.shape
        locals_ = [self._local(i) for i in range(n)]
        constants = ProblemConstants(
            mu_g=1.0,
            L_g=1.0,
            C_gyy=1.0,
            C_gxy=float(max(np.linalg.norm(self.A[i], 2) for i in range(n))),
            L_fx=self.reg,
            L_fy=1.0,
            L_gxy=0.0,
            L_gyy=0.0,
            Lt_fy=0.0,
            Lt_gxy=0.0,
            Lt_gyy=0.0,
            mu_f=self.reg,
        )
        if box is not None:
            # gradient bounds hold on the box |x|_inf, |y|_inf <= box
            constants.C_fx = self.reg * box * np.sqrt(d1)
            constants.C_fy = float(box * np.sqrt(d2) + max(np.linalg.norm(ci) for ci in self.c))
        super().__init__(d1, d2, locals_, constants)
        self.A_bar = self.A.mean(axis=0)
        self.b_bar = self.b.mean(axis=0)
        self.c_bar = self.c.mean(axis=0)

    def _local(self, i):
        A, b, c, reg = self.A[i], self.b[i], self.c[i], self.reg
        d2 = A.shape[0]
        eye = np.eye(d2)
        return LocalObjectivePair(
            f_val=lambda x, y: 0.5 * float((y - c) @ (y - c)) + 0.5 * reg * float(x @ x),
            grad_f_x=lambda x, y: reg * np.asarray(x, dtype=float),
            grad_f_y=lambda x, y: np.asarray(y, dtype=float) - c,
            g_val=lambda x, y: 0.5 * float(np.sum((y - A @ x - b) ** 2)),
            grad_g_y=lambda x, y: np.asarray(y, dtype=float) - A @ x - b,
            jac_g_xy=lambda x, y: -A.T.copy(),
            hess_g_yy=lambda x, y: eye.copy(),
        )

    # batched overrides
    def f_values(self, x, y):
        x, y = self._rows(x, y)
        return 0.5 * np.sum((y - self.c) ** 2, axis=1) + 0.5 * self.reg * np.sum(x * x, axis=1)

    def g_values(self, x, y):
        x, y = self._rows(x, y)
        r = y - np.einsum("nij,nj->ni", self.A, x) - self.b
        return 0.5 * np.sum(r * r, axis=1)

    def grad_f_x(self, x, y):
        x, _ = self._rows(x, y)
        return self.reg * x

    def grad_f_y(self, x, y):
        _, y = self._rows(x, y)
        return y - self.c

    def grad_g_y(self, x, y):
        x, y = self._rows(x, y)
        return y - np.einsum("nij,nj->ni", self.A, x) - self.b

    def jac_g_xy(self, x, y):
        return -np.transpose(self.A, (0, 2, 1)).copy()

    def hess_g_yy(self, x, y):
        return np.broadcast_to(np.eye(self.d2), (self.n, self.d2, self.d2)).copy()

    # closed forms
    def y_star(self, x) -> np.ndarray:
        """Lower-level solution for a common upper-level point ``x``."""
        return self.A_bar @ np.asarray(x, dtype=float) + self.b_bar

    def outer_objective(self, x) -> float:
        """``(1/n) sum_i f_i(x, y*(x))``."""
        x = np.asarray(x, dtype=float)
        r = self.y_star(x)[None, :] - self.c
        return float(0.5 * np.mean(np.sum(r * r, axis=1)) + 0.5 * self.reg * x @ x)

    def outer_gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.A_bar.T @ (self.y_star(x) - self.c_bar) + self.reg * x

    @property
    def x_star(self) -> np.ndarray:
        lhs = self.A_bar.T @ self.A_bar + self.reg * np.eye(self.d1)
        return np.linalg.solve(lhs, self.A_bar.T @ (self.c_bar - self.b_bar))

    @property
    def f_star(self) -> float:
        return self.outer_objective(self.x_star)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.A, self.b, self.c, np.array([self.reg])):
            h.update(np.ascontiguousarray(arr).tobytes())
        return "quad-" + h.hexdigest()[:16]


def quad_bilevel(A, b, c, reg: float = 0.0, box: Optional[float] = None) -> QuadBilevel:
    """Build the quadratic family from per-agent ``A_i`` (d2 x d1), ``b_i``, ``c_i``.

    The outer gradients are unbounded on the whole space, so ``C_fx`` and
    ``C_fy`` stay unknown unless ``box`` declares a bound on
    ``|x|_inf`` and ``|y|_inf`` over which they are evaluated.
    """
    A = [np.atleast_2d(np.asarray(a, dtype=float)) for a in A]
    if not A:
        raise ValueError("need at least one agent")
    d2, d1 = A[0].shape
    if any(a.shape != (d2, d1) for a in A):
        raise ValueError("all A_i must share the same (d2, d1) shape")
    b = [np.asarray(v, dtype=float).reshape(-1) for v in b]
    c = [np.asarray(v, dtype=float).reshape(-1) for v in c]
    if len(b) != len(A) or len(c) != len(A):
        raise ValueError(f"got {len(A)} A_i but {len(b)} b_i and {len(c)} c_i")
    if any(v.shape != (d2,) for v in b + c):
        raise ValueError(f"b_i and c_i must have length d2={d2}")
    if reg < 0:
        raise ValueError(f"reg must be nonnegative, got {reg}")
    if box is not None and box <= 0:
        raise ValueError(f"box must be positive, got {box}")
    return QuadBilevel(np.stack(A), np.stack(b), np.stack(c), reg, box)


def random_quad_bilevel(n: int, d1: int, d2: int, reg: float = 1.0, seed=None, scale: float = 1.0,
                        box: Optional[float] = None, heterogeneity: Optional[float] = None) -> QuadBilevel:
    """Random instance with Gaussian ``A_i``, ``b_i``, ``c_i``.

    By default every agent draws independently. With ``heterogeneity=h``
    the agents share one draw and add ``h`` times an independent one, so
    ``h = 0`` gives identical agents.
    """
    rng = np.random.default_rng(seed)
    norm = scale / np.sqrt(max(d1, d2))
    if heterogeneity is None:
        A = norm * rng.standard_normal((n, d2, d1))
        b = rng.standard_normal((n, d2))
        c = rng.standard_normal((n, d2))
    else:
        h = float(heterogeneity)
        A = norm * (rng.standard_normal((1, d2, d1)) + h * rng.standard_normal((n, d2, d1)))
        b = rng.standard_normal((1, d2)) + h * rng.standard_normal((n, d2))
        c = rng.standard_normal((1, d2)) + h * rng.standard_normal((n, d2))
    return quad_bilevel(list(A), list(b), list(c), reg, box)


# --------------------------------------------------------------------------
# hyperparameter-optimization family

@dataclass
class AgentData:
    z_train: np.ndarray
    b_train: np.ndarray
    z_val: np.ndarray
    b_val: np.ndarray
    z_test: Optional[np.ndarray] = None
    b_test: Optional[np.ndarray] = None

    @property
    def n_features(self) -> int:
        return self.z_train.shape[1]


class _Loss:
    """Mean loss over a sample set, as a function of model parameters ``y``."""

    def __init__(self, z, b):
        self.z = np.asarray(z, dtype=float)
        self.b = np.asarray(b)
        self.m = self.z.shape[0]


class _Linear(_Loss):
    def value(self, y):
        r = self.z @ y - self.b
        return float(r @ r) / self.m

    def grad(self, y):
        return 2.0 * self.z.T @ (self.z @ y - self.b) / self.m

    def hess(self, y):
        return 2.0 * self.z.T @ self.z / self.m


class _Logistic(_Loss):
    def value(self, y):
        return float(np.mean(np.logaddexp(0.0, -self.b * (self.z @ y))))

    def grad(self, y):
        s = self.b * (self.z @ y)
        return -self.z.T @ (self.b * expit(-s)) / self.m

    def hess(self, y):
        s = self.z @ y
        wts = expit(s) * expit(-s)
        return (self.z.T * wts) @ self.z / self.m


class _SquaredHinge(_Loss):
    def value(self, y):
        r = np.maximum(0.0, 1.0 - self.b * (self.z @ y))
        return float(r @ r) / self.m

    def grad(self, y):
        r = np.maximum(0.0, 1.0 - self.b * (self.z @ y))
        return -2.0 * self.z.T @ (self.b * r) / self.m

    def hess(self, y):
        active = (1.0 - self.b * (self.z @ y)) > 0.0
        za = self.z[active]
        return 2.0 * za.T @ za / self.m


class _Softmax(_Loss):
    """Multinomial logistic loss; ``y`` stacks per-class weights and a bias."""

    def __init__(self, z, b, n_classes):
        super().__init__(z, b)
        self.C = n_classes
        self.zt = np.hstack([self.z, np.ones((self.m, 1))])
        self.onehot = np.eye(n_classes)[self.b.astype(int)]

    def _probs(self, y):
        logits = self.zt @ y.reshape(self.C, -1).T
        return logits, np.exp(logits - logsumexp(logits, axis=1, keepdims=True))

    def value(self, y):
        logits, _ = self._probs(y)
        return float(np.mean(logsumexp(logits, axis=1) - np.sum(logits * self.onehot, axis=1)))

    def grad(self, y):
        _, p = self._probs(y)
        return ((p - self.onehot).T @ self.zt / self.m).reshape(-1)

    def hess(self, y):
        _, p = self._probs(y)
        k = self.zt.shape[1]
        h = np.zeros((self.C * k, self.C * k))
        for s in range(self.m):
            cov = np.diag(p[s]) - np.outer(p[s], p[s])
            h += np.kron(cov, np.outer(self.zt[s], self.zt[s]))
        return h / self.m


def _make_loss(loss, z, b, n_classes):
    if loss == "linear":
        return _Linear(z, b)
    if loss == "logistic":
        return _Logistic(z, b)
    if loss == "smoothed_svm":
        return _SquaredHinge(z, b)
    return _Softmax(z, b, n_classes)


class HOProblem(BilevelProblem):
    """Hyperparameter optimization with an exponential per-coordinate penalty.

    Inner: ``g_i(x, y) = loss(y; train_i) + y^T exp(x) + ridge/2 |y|^2``.
    Outer: ``f_i(x, y) = loss(y; val_i)``, independent of ``x``.
    """

    family = "ho"

    def __init__(self, loss, data, ridge, x_max, n_classes):
        self.loss = loss
        self.data = list(data)
        self.ridge = float(ridge)
        self.x_max = float(x_max)
        self.n_classes = n_classes
        self.train = [_make_loss(loss, a.z_train, a.b_train, n_classes) for a in self.data]
        self.val = [_make_loss(loss, a.z_val, a.b_val, n_classes) for a in self.data]
        d = self.data[0].n_features
        d2 = d if loss != "softmax" else n_classes * (d + 1)
        locals_ = [self._local(tr, va, d2) for tr, va in zip(self.train, self.val)]
        super().__init__(d2, d2, locals_, self._constants(d2))

    def _local(self, tr, va, d2):
        ridge = self.ridge
        eye = np.eye(d2)
        return LocalObjectivePair(
            f_val=lambda x, y: va.value(y),
            grad_f_x=lambda x, y: np.zeros(d2),
            grad_f_y=lambda x, y: va.grad(y),
            g_val=lambda x, y: tr.value(y) + float(y @ np.exp(x)) + 0.5 * ridge * float(y @ y),
            grad_g_y=lambda x, y: tr.grad(y) + np.exp(x) + ridge * y,
            jac_g_xy=lambda x, y: np.diag(np.exp(x)),
            hess_g_yy=lambda x, y: tr.hess(y) + ridge * eye,
        )

    def _constants(self, d2):
        ridge = self.ridge
        zs_tr = [a.z_train for a in self.data]
        zs_va = [a.z_val for a in self.data]

        def gram_eigs(zs):
            return [np.linalg.eigvalsh(z.T @ z / z.shape[0]) for z in zs]

        def max_sq_norm(zs, bias=False):
            return max(float(np.max(np.sum(z * z, axis=1))) + (1.0 if bias else 0.0) for z in zs)

        L_gyy = None
        C_fy = None
        if self.loss == "linear":
            eig_tr = gram_eigs(zs_tr)
            mu = 2.0 * min(e[0] for e in eig_tr) + ridge
            top = 2.0 * max(e[-1] for e in eig_tr) + ridge
            L_fy = 2.0 * max(e[-1] for e in gram_eigs(zs_va))
            L_gyy = 0.0
        elif self.loss == "logistic":
            mu = ridge
            top = 0.25 * max_sq_norm(zs_tr) + ridge
            L_fy = 0.25 * max_sq_norm(zs_va)
            # |sigma''| <= 1 / (6 sqrt 3)
            L_gyy = max_sq_norm(zs_tr) ** 1.5 / (6.0 * math.sqrt(3.0))
            C_fy = math.sqrt(max_sq_norm(zs_va))
        elif self.loss == "smoothed_svm":
            mu = ridge
            top = 2.0 * max(e[-1] for e in gram_eigs(zs_tr)) + ridge
            L_fy = 2.0 * max(e[-1] for e in gram_eigs(zs_va))
        else:
            mu = ridge
            top = 0.5 * max_sq_norm(zs_tr, bias=True) + ridge
            L_fy = 0.5 * max_sq_norm(zs_va, bias=True)
            C_fy = math.sqrt(2.0 * max_sq_norm(zs_va, bias=True))
        e_max = math.exp(self.x_max)
        return ProblemConstants(
            mu_g=max(mu, 0.0),
            L_g=top,
            C_gyy=top,
            C_gxy=e_max,
            C_fx=0.0,
            C_fy=C_fy,
            L_fx=0.0,
            L_fy=L_fy,
            L_gxy=0.0,
            L_gyy=L_gyy,
            Lt_fy=0.0,
            Lt_gxy=e_max,
            Lt_gyy=0.0,
        )

    def train_cost(self, y) -> float:
        """Average training loss over agents, each at its own ``y_i``."""
        y = np.asarray(y, dtype=float).reshape(self.n, self.d2)
        return float(np.mean([tr.value(y[i]) for i, tr in enumerate(self.train)]))

    def test_mse(self, y) -> float:
        """Mean squared prediction error of each agent's model on its test set."""
        y = np.asarray(y, dtype=float).reshape(self.n, self.d2)
        errs = []
        for i, a in enumerate(self.data):
            if a.z_test is None:
                raise ValueError("dataset carries no test split")
            r = a.z_test @ y[i] - a.b_test
            errs.append(r * r)
        return float(np.mean(np.concatenate(errs)))

    def fingerprint(self) -> str:
        h = hashlib.sha256(f"{self.loss}|{self.ridge}|{self.x_max}".encode())
        for a in self.data:
            for arr in (a.z_train, a.b_train, a.z_val, a.b_val):
                h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        return "ho-" + h.hexdigest()[:16]


def ho_problem(loss: str, data: Sequence[AgentData], ridge: float = 0.0, x_max: float = 1.0, d1: Optional[int] = None) -> HOProblem:
    """Decentralized hyperparameter optimization over per-agent datasets.

    Parameters
    ----------
    loss : {"linear", "logistic", "smoothed_svm", "softmax"}
        Training and validation loss. The nonsmooth hinge is not offered;
        ``smoothed_svm`` is the squared hinge ``max(0, 1 - b y^T z)^2``.
    data : sequence of AgentData
        One entry per agent.
    ridge : float
        Extra ``ridge/2 |y|^2`` in the inner objective. The exponential
        penalty is linear in ``y`` and adds no curvature, so losses without
        full-rank curvature need ``ridge > 0`` to be strongly convex.
    x_max : float
        Assumed upper bound on the hyperparameters; fixes the declared
        bound ``exp(x_max)`` on the mixed second derivative.
    d1 : int, optional
        Requested hyperparameter dimension. Must equal the model
        dimension, since the penalty pairs ``exp(x)`` with ``y``.
    """
    if loss in ("svm", "hinge"):
        raise ValueError("the hinge loss is nonsmooth and has no Hessian; use loss='smoothed_svm'")
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}; choose from {LOSSES}")
    data = list(data)
    if not data:
        raise ValueError("need at least one agent dataset")
    d = data[0].n_features
    n_classes = None
    for k, a in enumerate(data):
        for name in ("z_train", "z_val"):
            z = getattr(a, name)
            if z.ndim != 2 or z.shape[0] == 0:
                raise ValueError(f"agent {k}: {name} must be a nonempty 2-D array")
            if z.shape[1] != d:
                raise ValueError(f"agent {k}: {name} has {z.shape[1]} features, expected {d}")
        if len(a.b_train) != len(a.z_train) or len(a.b_val) != len(a.z_val):
            raise ValueError(f"agent {k}: label count does not match sample count")
        labels = np.concatenate([np.asarray(a.b_train), np.asarray(a.b_val)])
        if loss in ("logistic", "smoothed_svm") and not np.all(np.isin(labels, (-1, 1))):
            raise ValueError(f"agent {k}: {loss} labels must be -1 or +1")
        if loss == "softmax" and (np.any(labels < 0) or np.any(labels != np.round(labels))):
            raise ValueError(f"agent {k}: softmax labels must be class indices 0..C-1")
    if loss == "softmax":
        n_classes = int(max(np.max(np.concatenate([a.b_train, a.b_val])) for a in data)) + 1
    d2 = d if loss != "softmax" else n_classes * (d + 1)
    if d1 is not None and d1 != d2:
        raise ValueError(f"the exp(x) penalty pairs x with y, so d1 must equal d2={d2}; got d1={d1}")
    if ridge < 0:
        raise ValueError(f"ridge must be nonnegative, got {ridge}")
    return HOProblem(loss, data, ridge, x_max, n_classes)


def synthetic_regression_data(
    n: int,
    d: int,
    noise: float,
    samples_per_agent: int,
    seed,
    test_samples: Optional[int] = None,
):
    """Gaussian linear-regression data split across agents.

    The signal ``y_true`` and every feature vector are standard normal;
    responses are ``z^T y_true + noise * eps`` with standard normal
    ``eps``. Each agent receives ``samples_per_agent`` training and as
    many validation samples, plus ``test_samples`` (default the same)
    held-out test samples.

    Returns
    -------
    data : list of AgentData
    y_true : ndarray of shape (d,)
    """
    if n < 1 or d < 1 or samples_per_agent < 1:
        raise ValueError("n, d and samples_per_agent must be positive")
    if noise < 0:
        raise ValueError(f"noise must be nonnegative, got {noise}")
    m_test = samples_per_agent if test_samples is None else int(test_samples)
    rng = np.random.default_rng(seed)
    y_true = rng.standard_normal(d)

    def draw(m):
        z = rng.standard_normal((m, d))
        return z, z @ y_true + noise * rng.standard_normal(m)

    data = []
    for _ in range(n):
        zt, bt = draw(samples_per_agent)
        zv, bv = draw(samples_per_agent)
        zs, bs = draw(m_test)
        data.append(AgentData(zt, bt, zv, bv, zs, bs))
    return data, y_true


# --------------------------------------------------------------------------
# csv format: agent, split, z0..z{d-1}, <label>

def write_dataset_csv(data: Sequence[AgentData], path, label: str = "label"):
    d = data[0].n_features
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["agent", "split"] + [f"z{j}" for j in range(d)] + [label])
        for k, a in enumerate(data):
            for split, z, b in (("train", a.z_train, a.b_train), ("val", a.z_val, a.b_val), ("test", a.z_test, a.b_test)):
                if z is None:
                    continue
                for row, lab in zip(z, b):
                    writer.writerow([k, split] + [repr(float(v)) for v in row] + [repr(float(lab))])


def read_dataset_csv(path, label: str = "label") -> list[AgentData]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or label not in reader.fieldnames:
            raise ValueError(f"{path}: label column {label!r} not found")
        feats = sorted((c for c in reader.fieldnames if c.startswith("z") and c[1:].isdigit()), key=lambda c: int(c[1:]))
        if "agent" not in reader.fieldnames or "split" not in reader.fieldnames or not feats:
            raise ValueError(f"{path}: need columns agent, split, z0.. and {label!r}")
        rows: dict[int, dict[str, list]] = {}
        for rec in reader:
            k = int(rec["agent"])
            split = rec["split"]
            if split not in ("train", "val", "test"):
                raise ValueError(f"{path}: unknown split {split!r}")
            bucket = rows.setdefault(k, {"train": [], "val": [], "test": []})
            bucket[split].append([float(rec[c]) for c in feats] + [float(rec[label])])
    if sorted(rows) != list(range(len(rows))):
        raise ValueError(f"{path}: agent ids must be 0..n-1")
    out = []
    for k in range(len(rows)):
        parts = {s: np.array(v).reshape(-1, len(feats) + 1) for s, v in rows[k].items()}
        test = parts["test"]
        out.append(
            AgentData(
                parts["train"][:, :-1], parts["train"][:, -1],
                parts["val"][:, :-1], parts["val"][:, -1],
                test[:, :-1] if len(test) else None,
                test[:, -1] if len(test) else None,
            )
        )
    return out


# --------------------------------------------------------------------------
# empirical constant checks

@dataclass
class ConstantsReport:
    worst_ratio: dict[str, float] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        lines = [f"{'FAIL' if k in self.violations else 'ok  '}  {k}: worst observed/declared = {v:.6g}"
                 for k, v in sorted(self.worst_ratio.items())]
        return "\n".join(lines)


def verify_constants(p: BilevelProblem, trials: int = 100, seed=0, radius: float = 1.0,
                     rtol: float = 1e-8) -> ConstantsReport:
    """Probe declared constants at random points in ``[-radius, radius]^d``.

    A constant is violated when an observed value exceeds it by more than
    ``rtol`` relative (plus ``1e-12`` absolute, so that exact zeros survive
    rounding). Unknown constants are skipped.
    """
    rng = np.random.default_rng(seed)
    k = p.constants
    observed: dict[str, float] = {}

    def note(name, value):
        observed[name] = max(observed.get(name, 0.0), float(value))

    mu_seen = np.inf
    for _ in range(trials):
        i = int(rng.integers(p.n))
        loc = p.locals[i]
        x1, x2 = rng.uniform(-radius, radius, (2, p.d1))
        y1, y2 = rng.uniform(-radius, radius, (2, p.d2))
        dy = np.linalg.norm(y1 - y2)
        dx = np.linalg.norm(x1 - x2)
        hyy = loc.hess_g_yy(x1, y1)
        eig = np.linalg.eigvalsh((hyy + hyy.T) / 2.0)
        mu_seen = min(mu_seen, eig[0])
        note("C_gyy", eig[-1])
        note("C_gxy", np.linalg.norm(loc.jac_g_xy(x1, y1), 2))
        note("C_fx", np.linalg.norm(loc.grad_f_x(x1, y1)))
        note("C_fy", np.linalg.norm(loc.grad_f_y(x1, y1)))
        note("L_g", np.linalg.norm(loc.grad_g_y(x1, y1) - loc.grad_g_y(x1, y2)) / dy)
        note("L_fx", np.linalg.norm(loc.grad_f_x(x1, y1) - loc.grad_f_x(x1, y2)) / dy)
        note("L_fy", np.linalg.norm(loc.grad_f_y(x1, y1) - loc.grad_f_y(x1, y2)) / dy)
        note("L_gxy", np.linalg.norm(loc.jac_g_xy(x1, y1) - loc.jac_g_xy(x1, y2), 2) / dy)
        note("L_gyy", np.linalg.norm(hyy - loc.hess_g_yy(x1, y2), 2) / dy)
        note("Lt_fy", np.linalg.norm(loc.grad_f_y(x1, y1) - loc.grad_f_y(x2, y1)) / dx)
        note("Lt_gxy", np.linalg.norm(loc.jac_g_xy(x1, y1) - loc.jac_g_xy(x2, y1), 2) / dx)
        note("Lt_gyy", np.linalg.norm(hyy - loc.hess_g_yy(x2, y1), 2) / dx)

    report = ConstantsReport()
    for name, seen in observed.items():
        declared = getattr(k, name)
        if declared is None:
            continue
        report.worst_ratio[name] = seen / declared if declared > 0 else (0.0 if seen <= 1e-12 else np.inf)
        if seen > declared * (1.0 + rtol) + 1e-12:
            report.violations.append(name)
    if k.mu_g > 0:
        report.worst_ratio["mu_g"] = k.mu_g / mu_seen if mu_seen > 0 else np.inf
        if mu_seen < k.mu_g * (1.0 - rtol) - 1e-12:
            report.violations.append("mu_g")
    return report
