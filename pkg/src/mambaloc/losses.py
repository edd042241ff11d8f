"""Training objectives for per-pixel forgery probability maps.

All three losses take a probability map ``p`` (any shape, values in [0, 1])
and a binary ground-truth mask ``g`` of the same shape, and reduce to a
scalar. They are differentiable w.r.t. ``p`` through the tape.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

# probabilities are clamped to this interval before any log
P_EPS = 1e-7


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_pair(p: Tensor, g: Tensor):
    if p.shape != g.shape:
        raise ShapeError(f"loss: probability map {p.shape} vs mask {g.shape}")
    if p.data.min() < 0.0 or p.data.max() > 1.0:
        raise ValueError("loss: probabilities must lie in [0, 1]")
    if not np.all((g.data == 0.0) | (g.data == 1.0)):
        raise ValueError("loss: mask must be binary")


def dice_loss(p, g, smooth: float = 1.0) -> Tensor:
    """One minus the soft overlap ratio, 1 - (2|P∩G|+s)/(|P|+|G|+s).

    The smoothing term keeps the ratio defined when both maps are empty
    and pulls the loss slightly off its endpoints elsewhere.
    """
    p, g = _as_tensor(p), _as_tensor(g)
    _check_pair(p, g)
    inter = T.sum_(T.mul(p, g))
    mass = T.add(T.sum_(p), T.sum_(g))
    return T.sub(1.0, T.div(T.add(T.mul(inter, 2.0), smooth), T.add(mass, smooth)))


def focal_loss(p, g, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Cross-entropy with well-classified pixels down-weighted by (1-p_t)^gamma.

    p_t is the probability assigned to the true class; alpha weights the
    positive class and 1-alpha the negative class. gamma=0, alpha=0.5
    recovers half the plain binary cross-entropy. Mean over pixels.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"focal_loss: alpha must lie in [0, 1], got {alpha}")
    if gamma < 0.0:
        raise ValueError(f"focal_loss: gamma must be nonnegative, got {gamma}")
    p, g = _as_tensor(p), _as_tensor(g)
    _check_pair(p, g)
    p = T.clip(p, P_EPS, 1.0 - P_EPS)
    gd = g.data
    # p_t = p where the mask is 1, else 1-p; same selection for alpha_t
    sign = Tensor(2.0 * gd - 1.0)
    offset = Tensor(1.0 - gd)
    p_t = T.add(T.mul(p, sign), offset)
    alpha_t = Tensor(alpha * gd + (1.0 - alpha) * (1.0 - gd))
    weight = T.mul(alpha_t, T.power(T.sub(1.0, p_t), gamma)) if gamma else alpha_t
    return T.mul(T.mean(T.mul(weight, T.log(p_t))), -1.0)


def hybrid_loss(p, g, lambda_dice: float = 1.0, lambda_focal: float = 1.0,
                alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Weighted sum of dice_loss and focal_loss.

    Either weight may be zero to train on the other term alone.
    """
    if lambda_dice < 0.0 or lambda_focal < 0.0:
        raise ValueError("hybrid_loss: weights must be nonnegative")
    terms = []
    if lambda_dice:
        terms.append(T.mul(dice_loss(p, g), lambda_dice))
    if lambda_focal:
        terms.append(T.mul(focal_loss(p, g, alpha=alpha, gamma=gamma), lambda_focal))
    if not terms:
        return T.mul(T.sum_(_as_tensor(p)), 0.0)
    return terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
