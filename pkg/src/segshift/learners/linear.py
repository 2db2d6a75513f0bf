"""Linear models fit by exact solve (squared loss) or Newton iterations.

The objective is the *sum* of weighted per-sample losses plus an L2 term
``(l2 / 2) * ||coef||^2``; the intercept is never penalized. Newton runs
until the gradient norm drops below 1e-8 or 100 iterations, with step
halving as a safeguard.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from . import losses
from .losses import LossKind

MAX_NEWTON_ITER = 100
GRAD_TOL = 1e-8


@dataclass
class LinearModel:
    coef: np.ndarray  # (d,) or (d, K)
    intercept: np.ndarray  # () scalar array or (K,)
    loss: LossKind
    l2: float

    def predict_margin(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.coef.shape[0]:
            raise ValueError(
                f"expected {self.coef.shape[0]} features, got {x.shape[1]}"
            )
        return x @ self.coef + self.intercept

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return losses.margin_to_proba(self.predict_margin(x), self.loss)

    def to_dict(self) -> dict:
        return {
            "coef": self.coef.tolist(),
            "intercept": self.intercept.tolist(),
            "loss": self.loss.name,
            "n_classes": self.loss.n_classes,
            "l2": self.l2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        loss = LossKind(d["loss"], d["n_classes"])
        return cls(
            coef=np.asarray(d["coef"], dtype=np.float64),
            intercept=np.asarray(d["intercept"], dtype=np.float64),
            loss=loss,
            l2=float(d["l2"]),
        )


def _solve_spd(a: np.ndarray, b: np.ndarray, l2: float) -> np.ndarray:
    try:
        return cho_solve(cho_factor(a), b)
    except LinAlgError:
        if l2 == 0.0:
            raise ValueError(
                "normal equations are singular; set l2 > 0 to regularize"
            ) from None
        raise


def _fit_squared(x, y, l2, w, fit_intercept):
    n, d = x.shape
    if fit_intercept:
        xa = np.hstack([x, np.ones((n, 1))])
    else:
        xa = x
    a = xa.T @ (xa * w[:, None])
    a[np.arange(d), np.arange(d)] += l2
    b = xa.T @ (w * y)
    sol = _solve_spd(a, b, l2)
    coef = sol[:d]
    intercept = sol[d] if fit_intercept else np.float64(0.0)
    return coef, np.asarray(intercept)


def _fit_logistic(x, y, l2, w, fit_intercept):
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))]) if fit_intercept else x
    p_tot = xa.shape[1]
    theta = np.zeros(p_tot)

    def objective(t):
        z = xa @ t
        return float(np.sum(w * losses.loss_values(losses.LOGISTIC, y, z))) + 0.5 * l2 * float(
            t[:d] @ t[:d]
        )

    obj = objective(theta)
    for _ in range(MAX_NEWTON_ITER):
        z = xa @ theta
        g, h = losses.grad_hess(losses.LOGISTIC, y, z)
        grad = xa.T @ (w * g)
        grad[:d] += l2 * theta[:d]
        if np.linalg.norm(grad) <= GRAD_TOL:
            break
        hess = xa.T @ (xa * (w * h)[:, None])
        hess[np.arange(d), np.arange(d)] += l2
        # tiny jitter keeps the factorization alive when h underflows
        hess[np.arange(p_tot), np.arange(p_tot)] += 1e-12
        step = _solve_spd(hess, grad, l2)
        scale = 1.0
        for _ in range(30):
            cand = theta - scale * step
            cand_obj = objective(cand)
            if cand_obj <= obj + 1e-12:
                theta, obj = cand, cand_obj
                break
            scale *= 0.5
        else:
            break
    coef = theta[:d]
    intercept = theta[d] if fit_intercept else np.float64(0.0)
    return coef, np.asarray(intercept)


def _fit_softmax(x, y, loss, l2, w, fit_intercept):
    n, d = x.shape
    k = loss.n_classes
    xa = np.hstack([x, np.ones((n, 1))]) if fit_intercept else x
    da = xa.shape[1]
    theta = np.zeros((da, k))
    yi = y.astype(np.intp)

    def objective(t):
        z = xa @ t
        pen = 0.5 * l2 * float(np.sum(t[:d] * t[:d]))
        return float(np.sum(w * losses.loss_values(loss, y, z))) + pen

    obj = objective(theta)
    for _ in range(MAX_NEWTON_ITER):
        z = xa @ theta
        p = losses.softmax_rows(z)
        g = p.copy()
        g[np.arange(n), yi] -= 1.0
        grad = xa.T @ (g * w[:, None])  # (da, k)
        grad[:d] += l2 * theta[:d]
        if np.linalg.norm(grad) <= GRAD_TOL:
            break
        # full hessian over flattened (da*k) parameters:
        # H[(a,i),(b,j)] = sum_n w x_a x_b (p_i delta_ij - p_i p_j)
        pw = p * w[:, None]
        hess4 = np.einsum("na,ni,nb,nj->aibj", xa, p, xa, -pw, optimize=True)
        block = np.einsum("na,nb,ni->abi", xa, xa, pw, optimize=True)
        for i in range(k):
            hess4[:, i, :, i] += block[:, :, i]
        hess = hess4.reshape(da * k, da * k)
        idx = np.arange(d * k)
        hess[idx, idx] += l2  # coef block comes first when reshaped row-major
        hess[np.arange(da * k), np.arange(da * k)] += 1e-10
        step = np.linalg.solve(hess, grad.reshape(-1)).reshape(da, k)
        scale = 1.0
        for _ in range(30):
            cand = theta - scale * step
            cand_obj = objective(cand)
            if cand_obj <= obj + 1e-12:
                theta, obj = cand, cand_obj
                break
            scale *= 0.5
        else:
            break
    coef = theta[:d]
    intercept = theta[d] if fit_intercept else np.zeros(k)
    return coef, np.asarray(intercept)


def fit_linear(
    x: np.ndarray,
    y: np.ndarray,
    loss: LossKind,
    l2: float = 0.0,
    sample_weight: np.ndarray | None = None,
    fit_intercept: bool = True,
) -> LinearModel:
    """Fit a linear model for the given loss.

    Squared loss is solved exactly; logistic and softmax use damped Newton
    iterations. ``sample_weight`` multiplies per-sample losses and must be
    nonnegative.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("x must be (n, d) with one label per row")
    if l2 < 0:
        raise ValueError("l2 must be >= 0")
    n = x.shape[0]
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError("sample_weight length mismatch")
    if np.any(w < 0):
        raise ValueError("sample weights must be nonnegative")

    if loss.name == "squared":
        coef, intercept = _fit_squared(x, y, l2, w, fit_intercept)
    elif loss.name == "logistic":
        coef, intercept = _fit_logistic(x, y, l2, w, fit_intercept)
    else:
        coef, intercept = _fit_softmax(x, y, loss, l2, w, fit_intercept)
    if not (np.all(np.isfinite(coef)) and np.all(np.isfinite(intercept))):
        raise ValueError("linear fit produced non-finite parameters")
    return LinearModel(coef=coef, intercept=intercept, loss=loss, l2=l2)
