"""Base learners: linear models and gradient boosted trees."""

from .gbt import GBTConfig, GBTModel, Tree, cluster_base_config, fit_gbt, refine_config
from .linear import LinearModel, fit_linear
from .losses import (
    LOGISTIC,
    SQUARED,
    LossKind,
    grad_hess,
    loss_values,
    margin_to_proba,
    softmax_loss,
)

__all__ = [
    "GBTConfig",
    "GBTModel",
    "Tree",
    "LinearModel",
    "LossKind",
    "SQUARED",
    "LOGISTIC",
    "softmax_loss",
    "fit_gbt",
    "fit_linear",
    "cluster_base_config",
    "refine_config",
    "grad_hess",
    "loss_values",
    "margin_to_proba",
]


def predict_margin(model, x, base_margin=None):
    """Raw score(s) from a fitted linear or boosted-tree model."""
    if isinstance(model, LinearModel):
        out = model.predict_margin(x)
        if base_margin is not None:
            out = out + base_margin
        return out
    return model.predict_margin(x, base_margin=base_margin)
