"""Dense layer primitives, Adam and cosine annealing.

All arrays are float64. Layers follow the ``out = x @ W.T + b`` convention
with ``W`` shaped ``(out_features, in_features)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EmptyInputError, NumericError, RangeError


def _as_2d(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {x.shape}")
    return x


def affine_forward(x, W, b):
    """Compute ``x @ W.T + b`` for a batch ``x`` of shape (B, Din)."""
    x = _as_2d(x, "x")
    W = _as_2d(W, "W")
    b = np.asarray(b, dtype=np.float64)
    if x.shape[1] != W.shape[1]:
        raise DimensionError(f"x has {x.shape[1]} columns but W expects {W.shape[1]}")
    if b.shape != (W.shape[0],):
        raise DimensionError(f"b has shape {b.shape}, expected ({W.shape[0]},)")
    return x @ W.T + b


def affine_backward(grad_out, x, W):
    """Gradients of :func:`affine_forward`.

    Returns
    -------
    grad_x : ndarray (B, Din)
    grad_W : ndarray (Dout, Din)
    grad_b : ndarray (Dout,)
    """
    grad_out = _as_2d(grad_out, "grad_out")
    x = _as_2d(x, "x")
    W = _as_2d(W, "W")
    if grad_out.shape != (x.shape[0], W.shape[0]) or x.shape[1] != W.shape[1]:
        raise DimensionError(
            f"incompatible shapes grad_out={grad_out.shape}, x={x.shape}, W={W.shape}"
        )
    return grad_out @ W, grad_out.T @ x, grad_out.sum(axis=0)


def relu_forward(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(grad_out, pre_activation):
    # derivative at exactly 0 is taken as 0
    return np.where(np.asarray(pre_activation) > 0.0, grad_out, 0.0)


def maxpool_over_points(x):
    """Column-wise max over the point axis of an (m, D) matrix.

    Returns the pooled vector and, per column, the row index of the maximum
    (lowest row on ties).
    """
    x = _as_2d(x, "x")
    if x.shape[0] == 0:
        raise EmptyInputError("cannot max-pool an empty point set")
    idx = np.argmax(x, axis=0)
    return x[idx, np.arange(x.shape[1])], idx


def maxpool_backward(grad_out, argmax, num_points):
    """Scatter the pooled gradient back to the argmax row of each column."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    argmax = np.asarray(argmax)
    if grad_out.shape != argmax.shape:
        raise DimensionError("grad_out and argmax must have the same shape")
    grad = np.zeros((num_points, grad_out.shape[0]))
    grad[argmax, np.arange(grad_out.shape[0])] = grad_out
    return grad


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for :func:`adam_update`."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params, **kwargs):
        state = cls(**kwargs)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p, dtype=np.float64)
            state.v[name] = np.zeros_like(p, dtype=np.float64)
        return state


def adam_update(params, grads, state, lr):
    """One in-place Adam step with decoupled weight decay.

    Weight decay is applied as ``p -= lr * weight_decay * p`` before the
    moment update, so ``lr == 0`` leaves parameters and moments untouched
    (only the step counter advances).
    """
    if lr < 0:
        raise RangeError(f"learning rate must be non-negative, got {lr}")
    for name, g in grads.items():
        if name not in params:
            raise DimensionError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(
                f"gradient {name!r} has shape {g.shape}, parameter has {params[name].shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")

    state.step += 1
    if lr == 0:
        return params

    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def cosine_lr(epoch, total, lr0):
    """Cosine-annealed learning rate, ``lr0`` at epoch 0 and 0 at ``total``."""
    if total < 1:
        raise RangeError(f"total epochs must be >= 1, got {total}")
    if epoch < 0 or epoch > total:
        raise RangeError(f"epoch {epoch} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total))
