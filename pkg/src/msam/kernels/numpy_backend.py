"""Numpy implementations of the hot kernels.

This is the always-available fallback for `msam.kernels._compiled` and
the reference the compiled core is checked against. Row-wise kernels
take a 2-D (rows, cols) array and work along the last axis; callers
reshape. Everything preserves the input dtype (float32 or float64).
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def matmul2d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matmul over exactly matching leading dims, 3-D inputs."""
    return np.matmul(a, b)


def softmax2d(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax2d_grad(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def l2norm2d(x: np.ndarray, eps: float):
    """Returns (normalized rows, raw row norms)."""
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    y = x / np.maximum(n, np.asarray(eps, dtype=x.dtype))
    return y, n[:, 0]


def l2norm2d_grad(y: np.ndarray, norms: np.ndarray, eps: float, gy: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.maximum(norms, eps)
    proj = (y * gy).sum(axis=1, keepdims=True)
    gx_live = (gy - y * proj) * inv[:, None]
    gx_dead = gy * (1.0 / eps)
    gx = np.where((norms > eps)[:, None], gx_live, gx_dead)
    return gx.astype(y.dtype, copy=False)


def layernorm2d(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    """Per-row (x - mean)/sqrt(var + eps) * gamma + beta, 1/D variance.

    Returns (y, xhat, rstd) with xhat/rstd saved for the backward pass.
    """
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * rstd
    y = xhat * gamma + beta
    return y.astype(x.dtype, copy=False), xhat, rstd[:, 0]


def layernorm2d_grad(gamma: np.ndarray, xhat: np.ndarray, rstd: np.ndarray, gy: np.ndarray):
    """Returns (gx, ggamma, gbeta)."""
    gbeta = gy.sum(axis=0)
    ggamma = (gy * xhat).sum(axis=0)
    dxhat = gy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return gx.astype(gy.dtype, copy=False), ggamma, gbeta


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of -|x| only: stable at both tails.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid_grad(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return gy * y * (1.0 - y)


def softplus(x: np.ndarray) -> np.ndarray:
    return (np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))).astype(x.dtype, copy=False)


def softplus_grad(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return gy * sigmoid(x)


# Cross-modal contractions. These three run with einsum's fixed C loop
# (optimize=False) rather than BLAS: every output element accumulates in
# the same index order wherever it sits, which the pooling pipeline's
# exact batch-equivariance contract depends on.


def scores_bft(frames: np.ndarray, texts: np.ndarray) -> np.ndarray:
    """[B,F,D] x [T,D] -> [B,F,T] dot products over D."""
    return np.einsum("bfd,td->bft", frames, texts, optimize=False)


def agg_btd(weights: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """[B,F,T] x [B,F,D] -> [B,T,D] weighted frame sums over F."""
    return np.einsum("bft,bfd->btd", weights, frames, optimize=False)


def dot_bt(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """[B,T,D] x [T,D] -> [B,T] per-pair dot products over D."""
    return np.einsum("btd,td->bt", x, y, optimize=False)
