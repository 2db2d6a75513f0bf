"""Loss functions on raw margins: values, gradients and hessians.

Margins are raw scores: a length-n vector for squared and logistic loss,
an (n, K) matrix of per-class logits for softmax. Gradients and hessians
are exact (the softmax hessian is the diagonal of the full hessian, which
is what per-class tree fitting consumes).
"""

from dataclasses import dataclass

import numpy as np

_CLIP = 1e-12


@dataclass(frozen=True)
class LossKind:
    """Which loss a learner optimizes; ``n_classes`` only set for softmax."""

    name: str  # "squared" | "logistic" | "softmax"
    n_classes: int = 0

    def __post_init__(self):
        if self.name not in ("squared", "logistic", "softmax"):
            raise ValueError(f"unknown loss {self.name!r}")
        if self.name == "softmax" and self.n_classes < 3:
            raise ValueError("softmax loss requires n_classes >= 3")

    @property
    def is_classification(self) -> bool:
        return self.name != "squared"

    @property
    def margin_width(self) -> int:
        """Number of margin columns (1 encoded as a flat vector)."""
        return self.n_classes if self.name == "softmax" else 1


SQUARED = LossKind("squared")
LOGISTIC = LossKind("logistic")


def softmax_loss(n_classes: int) -> LossKind:
    return LossKind("softmax", n_classes)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def loss_values(loss: LossKind, y: np.ndarray, margin: np.ndarray) -> np.ndarray:
    """Per-sample loss at the given margins."""
    if loss.name == "squared":
        d = margin - y
        return 0.5 * d * d
    if loss.name == "logistic":
        # log(1 + e^z) - y z, computed stably
        return np.logaddexp(0.0, margin) - y * margin
    lse = np.logaddexp.reduce(margin, axis=1)
    return lse - margin[np.arange(len(y)), y.astype(np.intp)]


def grad_hess(loss: LossKind, y: np.ndarray, margin: np.ndarray):
    """Gradient and hessian of the per-sample loss w.r.t. the margin.

    Shapes match the margin: (n,) for squared/logistic, (n, K) for softmax.
    """
    if loss.name == "squared":
        return margin - y, np.ones_like(margin)
    if loss.name == "logistic":
        p = sigmoid(margin)
        return p - y, p * (1.0 - p)
    p = softmax_rows(margin)
    g = p.copy()
    g[np.arange(len(y)), y.astype(np.intp)] -= 1.0
    return g, p * (1.0 - p)


def margin_to_proba(margin: np.ndarray, loss: LossKind) -> np.ndarray:
    """Map raw margins to probabilities (logistic/softmax only)."""
    if loss.name == "logistic":
        return sigmoid(margin)
    if loss.name == "softmax":
        return softmax_rows(margin)
    raise ValueError("margin_to_proba is undefined for squared loss")


def initial_margin(loss: LossKind, y: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Constant margin minimizing the weighted loss (zeros for softmax)."""
    if loss.name == "squared":
        return np.asarray([np.average(y, weights=weight)])
    if loss.name == "logistic":
        p = float(np.average(y, weights=weight))
        p = min(max(p, _CLIP), 1.0 - _CLIP)
        return np.asarray([np.log(p / (1.0 - p))])
    return np.zeros(loss.n_classes)
