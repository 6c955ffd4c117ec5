"""Training objectives and their analytic gradients.

Notation: ``F`` is a (B, D) feature batch, ``W`` (C, D) and ``b`` (C,) the
linear classifier, ``y`` (B,) integer labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, NumericError, RangeError


@dataclass
class AugmentationContext:
    """Per-class augmentation shift and covariance, frozen for a stage.

    ``cov`` is (C, D) for diagonal covariances or (C, D, D) for full ones.
    """

    delta_mu: np.ndarray
    cov: np.ndarray
    lam: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise RangeError(f"augmentation strength must be >= 0, got {self.lam}")

    @classmethod
    def null(cls, num_classes, dim):
        return cls(np.zeros((num_classes, dim)), np.zeros((num_classes, dim)), 0.0)


@dataclass
class LossBreakdown:
    ptsfa: float
    ida_s: float
    ida_t: float
    total: float
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0


def lambda_schedule(epoch, total_epochs, lam0):
    """Linear ramp from 0 at epoch 0 to ``lam0`` at ``total_epochs``."""
    if not 0 <= epoch <= total_epochs:
        raise RangeError(f"epoch {epoch} outside [0, {total_epochs}]")
    return epoch / total_epochs * lam0


def _log_softmax(z):
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B = len(labels)
    if B == 0:
        raise EmptyInputError("cross-entropy of an empty batch")
    logp = _log_softmax(logits)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / B


# the warm-up objective is plain CE on source predictions
warmup_ce = cross_entropy


def _class_differences(W, y):
    # d[n, c] = w_c - w_{y_n}
    return W[None, :, :] - W[y][:, None, :]


def _quadratic(d, cov_y):
    if cov_y.ndim == 2:  # diagonal, (B, D)
        return np.einsum("ncd,nd->nc", d * d, cov_y), d * cov_y[:, None, :]
    Sd = np.einsum("nij,ncj->nci", cov_y, d)
    return np.einsum("nci,nci->nc", d, Sd), Sd


def ptsfa_logits(F, y, W, b, ctx):
    """Augmented logits for each sample of a batch.

    ``theta[n, c] = w_c.f_n + b_c + (w_c - w_y).dmu_y + lam/2 (w_c - w_y)' S_y (w_c - w_y)``
    where ``y = y_n``. Both correction terms vanish for ``c == y_n``. A single
    feature vector ``F`` of shape (D,) is accepted too.
    """
    F = np.asarray(F, dtype=np.float64)
    single = F.ndim == 1
    if single:
        F, y = F[None], np.atleast_1d(y)
    y = np.asarray(y, dtype=np.int64)
    d = _class_differences(W, y)
    q, _ = _quadratic(d, ctx.cov[y])
    theta = F @ W.T + b + np.einsum("ncd,nd->nc", d, ctx.delta_mu[y]) + 0.5 * ctx.lam * q
    return theta[0] if single else theta


def ptsfa_loss_and_grads(F, y, W, b, ctx):
    """Closed-form augmented cross-entropy and gradients w.r.t. W, b and F.

    The augmentation statistics in ``ctx`` are constants.
    """
    F = np.asarray(F, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise EmptyInputError("augmented loss of an empty batch")
    B = len(y)
    d = _class_differences(W, y)
    q, Sd = _quadratic(d, ctx.cov[y])
    dmu = ctx.delta_mu[y]
    theta = F @ W.T + b + np.einsum("ncd,nd->nc", d, dmu) + 0.5 * ctx.lam * q
    loss, g = cross_entropy(theta, y)

    grad_F = g @ W
    grad_b = g.sum(axis=0)
    grad_W = g.T @ F
    # correction terms depend on W only through w_c - w_y (zero when c == y)
    G = g[:, :, None] * (dmu[:, None, :] + ctx.lam * Sd)
    G[np.arange(B), y] = 0.0
    grad_W += G.sum(axis=0)
    np.subtract.at(grad_W, y, G.sum(axis=1))
    return loss, {"W": grad_W, "b": grad_b, "F": grad_F}


def ida_loss(F, labels, means, kappa, valid=None):
    """Temperature-scaled cosine contrast of features against class means.

    Classes with ``valid[c] == False`` drop out of every denominator, and
    samples labelled with them are skipped. Returns the mean over the
    remaining samples (0 when none remain) and the gradient w.r.t. ``F``.
    """
    if kappa <= 0:
        raise RangeError(f"temperature must be positive, got {kappa}")
    F = np.asarray(F, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    means = np.asarray(means, dtype=np.float64)
    C = means.shape[0]
    valid = np.ones(C, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise RangeError("no valid class means")
    grad = np.zeros_like(F)
    use = np.flatnonzero(valid[labels])
    if len(use) == 0:
        return 0.0, grad

    cls = np.flatnonzero(valid)
    mu = means[cls]
    mu_norm = np.linalg.norm(mu, axis=1)
    if np.any(mu_norm == 0):
        raise NumericError(f"mean of class {int(cls[np.argmax(mu_norm == 0)])} has zero norm")
    f = F[use]
    f_norm = np.linalg.norm(f, axis=1)
    if np.any(f_norm == 0):
        raise NumericError(f"feature of sample {int(use[np.argmax(f_norm == 0)])} has zero norm")

    mu_hat = mu / mu_norm[:, None]
    cos = (f @ mu_hat.T) / f_norm[:, None]
    pos = np.searchsorted(cls, labels[use])
    logp = _log_softmax(cos / kappa)
    rows = np.arange(len(use))
    n = len(use)
    loss = -logp[rows, pos].mean()

    gs = np.exp(logp)
    gs[rows, pos] -= 1.0
    gs /= kappa * n
    # d cos / d f = mu_hat / |f| - cos * f / |f|^2
    grad[use] = (gs @ mu_hat) / f_norm[:, None] - (gs * cos).sum(axis=1)[:, None] * f / (
        f_norm[:, None] ** 2
    )
    return float(loss), grad


def total_loss(ptsfa, ida_s, ida_t, alpha=1.0, beta=1.0, gamma=1.0):
    for name, v in (("ptsfa", ptsfa), ("ida_s", ida_s), ("ida_t", ida_t)):
        if not math.isfinite(v):
            raise NumericError(f"loss component {name} is not finite ({v})")
    total = alpha * ptsfa + beta * ida_s + gamma * ida_t
    return LossBreakdown(ptsfa, ida_s, ida_t, total, alpha, beta, gamma)
