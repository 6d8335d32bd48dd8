"""Training losses.

The density loss is contrastive: push energy down on data, up on model
samples, with a squared-magnitude penalty on both so the energies stay in a
bounded band instead of drifting apart without limit:

    L_gen = mean(E(x+) - E(x-) + reg * (E(x+)^2 + E(x-)^2))

Joint training adds standard cross-entropy on a separate classifier batch,
which may be augmented while the density batch stays clean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, softmax_cross_entropy


@dataclass
class LossBreakdown:
    """Scalar diagnostics recorded for every step's log row."""

    gen_loss: float
    clf_loss: float | None
    e_pos_mean: float
    e_neg_mean: float
    e_pos_sq_mean: float
    e_neg_sq_mean: float
    clf_acc: float | None = None

    @property
    def total(self) -> float:
        return self.gen_loss + (self.clf_loss or 0.0)

    @property
    def gap(self) -> float:
        return abs(self.e_pos_mean - self.e_neg_mean)


def cd_l2_loss(e_pos: Tensor, e_neg: Tensor, reg_coeff: float) -> Tensor:
    """Contrastive loss with L2 energy regularization, averaged over rows."""
    if e_pos.data.shape != e_neg.data.shape:
        raise ConfigError(
            f"positive batch {e_pos.data.shape} and negative batch "
            f"{e_neg.data.shape} must match"
        )
    contrast = e_pos - e_neg
    if reg_coeff:
        contrast = contrast + reg_coeff * (e_pos.square() + e_neg.square())
    return contrast.mean()


def gen_loss(model, x_pos, x_neg, reg_coeff) -> tuple[Tensor, LossBreakdown]:
    """Unconditional objective on one clean batch and one sampled batch."""
    e_pos = model.energy(x_pos if isinstance(x_pos, Tensor) else Tensor(x_pos))
    e_neg = model.energy(x_neg if isinstance(x_neg, Tensor) else Tensor(x_neg))
    loss = cd_l2_loss(e_pos, e_neg, reg_coeff)
    stats = LossBreakdown(
        gen_loss=float(loss.data),
        clf_loss=None,
        e_pos_mean=float(e_pos.data.mean()),
        e_neg_mean=float(e_neg.data.mean()),
        e_pos_sq_mean=float((e_pos.data ** 2).mean()),
        e_neg_sq_mean=float((e_neg.data ** 2).mean()),
    )
    return loss, stats


def joint_loss(model, x_clf, y, x_gen_pos, x_gen_neg,
               reg_coeff) -> tuple[Tensor, LossBreakdown]:
    """Classifier cross-entropy plus the density loss, on separate batches."""
    density, stats = gen_loss(model, x_gen_pos, x_gen_neg, reg_coeff)
    y = np.asarray(y)
    logits = model.logits(x_clf if isinstance(x_clf, Tensor) else Tensor(x_clf))
    clf = softmax_cross_entropy(logits, y)
    stats.clf_loss = float(clf.data)
    stats.clf_acc = float((logits.data.argmax(axis=1) == y).mean())
    return density + clf, stats


def inject_noise(x: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Optional Gaussian smoothing of data inputs; off when sigma is zero."""
    if sigma < 0:
        raise ConfigError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return x
    return x + sigma * rng.standard_normal(x.shape)
