"""Losses used by the Siamese and adversarial trainers."""
from __future__ import annotations

import enum

import numpy as np

PROB_CLAMP = 1e-7


class PairLabel(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


def contrastive_loss(dist, label, margin: float = 1.0):
    """Contrastive loss of an embedding distance and its derivative.

    Positive pairs pay 0.5 * d**2; negative pairs pay 0.5 * max(0, m - d)**2.
    Accepts scalars or arrays; ``label`` may be a ``PairLabel`` or a boolean
    array that is True for positive pairs.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    d = np.asarray(dist, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distance must be nonnegative")
    if isinstance(label, PairLabel):
        positive = np.full(d.shape, label is PairLabel.POSITIVE)
    else:
        positive = np.asarray(label, dtype=bool)
    hinge = np.maximum(0.0, margin - d)
    loss = np.where(positive, 0.5 * d * d, 0.5 * hinge * hinge)
    grad = np.where(positive, d, -hinge)
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def discriminator_objective(d_clean, d_noisy) -> float:
    """E[log D(z_clean)] + E[log(1 - D(z_noisy))]; at most 0, maximized by the discriminator."""
    dc = np.clip(np.asarray(d_clean, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    dn = np.clip(np.asarray(d_noisy, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    return float(np.mean(np.log(dc)) + np.mean(np.log(1.0 - dn)))


def mse(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    diff = np.asarray(pred) - np.asarray(target)
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size
