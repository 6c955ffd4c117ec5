"""Hot loops: the batched point-MLP encoder and the Monte-Carlo CE sweep.

Each kernel has a numba implementation (``*_nb``) and a numpy one (``*_np``).
The public names dispatch on :data:`ptsfa._accel.USE_NUMBA`.

Encoder: per point ``h1 = relu(W1 p + b1)``, ``h2 = W2 h1 + b2``, then the
feature is the column-wise max of ``h2`` over points. The argmax (lowest
point index on ties) is returned for the backward pass, which routes each
feature's gradient to that single point.
"""

import numpy as np

from . import numerics
from ._accel import USE_NUMBA, njit


@njit
def _encoder_forward_nb(points, W1, b1, W2T, b2):
    B, m, _ = points.shape
    H = W1.shape[0]
    D = W2T.shape[1]
    feats = np.empty((B, D))
    argmax = np.zeros((B, D), dtype=np.int64)
    acc = np.empty(D)
    for s in range(B):
        for d in range(D):
            feats[s, d] = -np.inf
        for i in range(m):
            x0 = points[s, i, 0]
            x1 = points[s, i, 1]
            x2 = points[s, i, 2]
            for d in range(D):
                acc[d] = b2[d]
            # axpy over output channels; inactive hidden units contribute nothing
            for j in range(H):
                h = W1[j, 0] * x0 + W1[j, 1] * x1 + W1[j, 2] * x2 + b1[j]
                if h > 0.0:
                    for d in range(D):
                        acc[d] += W2T[j, d] * h
            for d in range(D):
                a = acc[d]
                if a > feats[s, d]:
                    feats[s, d] = a
                    argmax[s, d] = i
    return feats, argmax


def encoder_forward_nb(points, W1, b1, W2, b2):
    return _encoder_forward_nb(points, W1, b1, np.ascontiguousarray(W2.T), b2)


@njit
def encoder_backward_nb(grad_feats, points, argmax, feats, W1, b1, W2):
    B, m, _ = points.shape
    H = W1.shape[0]
    D = W2.shape[0]
    gW1 = np.zeros(W1.shape)
    gb1 = np.zeros(H)
    gW2 = np.zeros(W2.shape)
    gb2 = np.zeros(D)
    g2 = np.zeros(D)
    h1 = np.empty(H)
    g1 = np.empty(H)
    seen = np.zeros(m, dtype=np.bool_)
    for s in range(B):
        seen[:] = False
        for d0 in range(D):
            i = argmax[s, d0]
            if seen[i]:
                continue
            seen[i] = True
            # gather every column whose max sits on point i
            for d in range(D):
                g2[d] = grad_feats[s, d] if argmax[s, d] == i else 0.0
            x0 = points[s, i, 0]
            x1 = points[s, i, 1]
            x2 = points[s, i, 2]
            for j in range(H):
                a = W1[j, 0] * x0 + W1[j, 1] * x1 + W1[j, 2] * x2 + b1[j]
                h1[j] = a if a > 0.0 else 0.0
            for d in range(D):
                if g2[d] != 0.0:
                    gb2[d] += g2[d]
                    for j in range(H):
                        gW2[d, j] += g2[d] * h1[j]
            for j in range(H):
                if h1[j] > 0.0:
                    a = 0.0
                    for d in range(D):
                        a += W2[d, j] * g2[d]
                    g1[j] = a
                else:
                    g1[j] = 0.0
            for j in range(H):
                if g1[j] != 0.0:
                    gb1[j] += g1[j]
                    gW1[j, 0] += g1[j] * x0
                    gW1[j, 1] += g1[j] * x1
                    gW1[j, 2] += g1[j] * x2
    return gW1, gb1, gW2, gb2


def encoder_forward_np(points, W1, b1, W2, b2):
    B, m, _ = points.shape
    flat = points.reshape(B * m, 3)
    h1 = numerics.relu_forward(numerics.affine_forward(flat, W1, b1))
    h2 = numerics.affine_forward(h1, W2, b2).reshape(B, m, -1)
    argmax = np.argmax(h2, axis=1)
    feats = np.take_along_axis(h2, argmax[:, None, :], axis=1)[:, 0, :]
    return feats, argmax


def encoder_backward_np(grad_feats, points, argmax, feats, W1, b1, W2):
    B, m, _ = points.shape
    D = W2.shape[0]
    flat = points.reshape(B * m, 3)
    pre1 = numerics.affine_forward(flat, W1, b1)
    h1 = numerics.relu_forward(pre1)
    g_h2 = np.zeros((B, m, D))
    np.put_along_axis(g_h2, argmax[:, None, :], grad_feats[:, None, :], axis=1)
    g_h2 = g_h2.reshape(B * m, D)
    g_h1, gW2, gb2 = numerics.affine_backward(g_h2, h1, W2)
    g_pre1 = numerics.relu_backward(g_h1, pre1)
    _, gW1, gb1 = numerics.affine_backward(g_pre1, flat, W1)
    return gW1, gb1, gW2, gb2


@njit
def mc_cross_entropy_nb(draws, W, b, y):
    M, D = draws.shape
    C = W.shape[0]
    out = np.empty(M)
    z = np.empty(C)
    for k in range(M):
        zmax = -np.inf
        for c in range(C):
            a = b[c]
            for d in range(D):
                a += W[c, d] * draws[k, d]
            z[c] = a
            if a > zmax:
                zmax = a
        s = 0.0
        for c in range(C):
            s += np.exp(z[c] - zmax)
        out[k] = np.log(s) + zmax - z[y]
    return out


def mc_cross_entropy_np(draws, W, b, y):
    z = draws @ W.T + b
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return lse - z[:, y]


def encoder_forward(points, W1, b1, W2, b2):
    """Batched encoder forward. ``points`` is (B, m, 3); returns (feats, argmax)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    if USE_NUMBA:
        return encoder_forward_nb(points, W1, b1, W2, b2)
    return encoder_forward_np(points, W1, b1, W2, b2)


def encoder_backward(grad_feats, points, argmax, feats, W1, b1, W2):
    """Parameter gradients of the encoder given d(loss)/d(feats)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    grad_feats = np.ascontiguousarray(grad_feats, dtype=np.float64)
    if USE_NUMBA:
        return encoder_backward_nb(grad_feats, points, argmax, feats, W1, b1, W2)
    return encoder_backward_np(grad_feats, points, argmax, feats, W1, b1, W2)


def mc_cross_entropy(draws, W, b, y):
    """Softmax cross-entropy of ``W @ draw + b`` against class ``y`` for each draw."""
    draws = np.ascontiguousarray(draws, dtype=np.float64)
    if USE_NUMBA:
        return mc_cross_entropy_nb(draws, np.ascontiguousarray(W), np.asarray(b, float), int(y))
    return mc_cross_entropy_np(draws, W, b, int(y))
