"""Training losses over per-point class distributions.

All losses take a one-hot target grid ``g`` and a predicted distribution grid
``p`` of identical shape (..., C), class axis last, class 0 = void. ``p`` rows
must sum to 1 (softmax output); ``g`` must be exactly one-hot.

The soft multi-class IoU treats each non-void class slice as a fuzzy set and
reweights points where a class is absent by 1/(C-1), so that classes compete
for space symmetrically and the binary case (C=2) degenerates to the plain
soft IoU of the foreground slice.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ContractError, DimensionError
from .tensor import Tensor

EPS_LOG = 1e-12
PROB_ROW_TOL = 1e-4


def _as_target(g, p: Tensor) -> tuple[np.ndarray, Tensor]:
    g_arr = g.data if isinstance(g, Tensor) else np.asarray(g)
    if g_arr.shape != p.data.shape:
        raise DimensionError(f"target shape {g_arr.shape} != prediction {p.data.shape}")
    if g_arr.ndim < 2 or g_arr.shape[-1] < 2:
        raise DimensionError("need class axis last with at least 2 classes")
    if not np.all((g_arr == 0) | (g_arr == 1)) or not np.all(g_arr.sum(axis=-1) == 1):
        raise ContractError("target grid is not one-hot")
    return g_arr, Tensor(g_arr, dtype=p.data.dtype)


def _check_distribution(p: Tensor) -> None:
    d = p.data
    if np.any(d < -1e-6) or np.any(d > 1 + 1e-6):
        raise ContractError("predicted probabilities outside [0,1]")
    if np.abs(d.sum(axis=-1) - 1).max() > PROB_ROW_TOL:
        raise ContractError("predicted rows do not sum to 1")


def soft_iou(g, p: Tensor) -> Tensor:
    """Weighted multi-class soft IoU in [0,1]; 1 when both grids are all-void.

    Per point i and non-void class c the overlap term is min(p_ic, g_ic) and
    the union term max(p_ic, g_ic), weighted 1 where g_ic = 1 and 1/(C-1)
    where g_ic = 0. Void (c = 0) is excluded. At min/max ties the gradient
    routes to p in the numerator and to g in the denominator.
    """
    g_arr, g_t = _as_target(g, p)
    _check_distribution(p)
    c = g_arr.shape[-1]
    w = np.where(g_arr == 1, 1.0, 1.0 / (c - 1)).astype(p.data.dtype)
    w[..., 0] = 0.0
    w_t = Tensor(w)
    num = ops.sum(ops.mul(ops.min_elem(p, g_t), w_t))
    den = ops.sum(ops.mul(ops.max_elem(p, g_t), w_t))
    if den.item() == 0.0:
        return Tensor(np.asarray(1.0, dtype=p.data.dtype))
    return ops.div(num, den)


def loss_iou(g, p: Tensor) -> Tensor:
    """1 - soft_iou."""
    return ops.add_scalar(ops.mul_scalar(soft_iou(g, p), -1.0), 1.0)


def loss_xent(g, p: Tensor, eps: float = EPS_LOG) -> Tensor:
    """Mean cross-entropy over points, void class included."""
    g_arr, g_t = _as_target(g, p)
    _check_distribution(p)
    n_points = g_arr.size // g_arr.shape[-1]
    picked = ops.mul(g_t, ops.log(ops.add_scalar(p, eps)))
    return ops.mul_scalar(ops.sum(picked), -1.0 / n_points)


def loss_focal(g, p: Tensor, gamma: float = 2.0, eps: float = EPS_LOG) -> Tensor:
    """Mean focal loss -(1-p_t)^gamma log(p_t), p_t = prob of the true class."""
    if gamma < 0:
        raise ContractError(f"gamma must be >= 0, got {gamma}")
    g_arr, g_t = _as_target(g, p)
    _check_distribution(p)
    pt = ops.sum(ops.mul(g_t, p), axis=p.data.ndim - 1)
    one_minus = ops.add_scalar(ops.mul_scalar(pt, -1.0), 1.0)
    weight = ops.pow_scalar(one_minus, gamma)
    log_pt = ops.log(ops.add_scalar(pt, eps))
    return ops.mul_scalar(ops.mean(ops.mul(weight, log_pt)), -1.0)


def loss_iou_xent(g, p: Tensor) -> Tensor:
    """Product (1 - soft_iou) * xent: scale-aware overlap times per-point fit."""
    return ops.mul(loss_iou(g, p), loss_xent(g, p))


LOSSES = {
    "iou": loss_iou,
    "xent": loss_xent,
    "focal": loss_focal,
    "iou-xent": loss_iou_xent,
}


def get_loss(name: str):
    if name not in LOSSES:
        raise ContractError(f"unknown loss {name!r}; choose from {sorted(LOSSES)}")
    return LOSSES[name]
