"""Vectorized numpy implementation of the cosine-geometry kernels.

Inputs are assumed validated (finite, nonzero rows, labels in range); see
``fedorgp.kernels`` for the checked wrappers.
"""
import numpy as np


def cosine_matrix(A, B):
    An = A / np.linalg.norm(A, axis=1, keepdims=True)
    Bn = B / np.linalg.norm(B, axis=1, keepdims=True)
    return An @ Bn.T


def or_loss_grad(A, labels, P, lam_s, gamma):
    n = A.shape[0]
    C = P.shape[0]
    An = A / np.linalg.norm(A, axis=1, keepdims=True)
    pnorm = np.linalg.norm(P, axis=1, keepdims=True)
    Pn = P / pnorm
    S = An @ Pn.T
    rows = np.arange(n)
    own = np.zeros((n, C), dtype=bool)
    own[rows, labels] = True
    s = S[rows, labels].sum() / n
    absS = np.where(own, 0.0, np.abs(S))
    d = absS.sum() / (n * (C - 1))
    loss = lam_s * (1.0 - s) + gamma * d
    G = np.where(own, -lam_s / n, gamma / (n * (C - 1)) * np.sign(S))
    dPn = G.T @ An
    radial = np.sum(dPn * Pn, axis=1, keepdims=True)
    grad_P = (dPn - radial * Pn) / pnorm
    return float(loss), float(s), float(d), grad_P


def alignment_grad(R, P, mask):
    keep = mask.astype(bool)
    losses = np.zeros(R.shape[0])
    grad = np.zeros_like(R)
    Rk = R[keep]
    rnorm = np.linalg.norm(Rk, axis=1, keepdims=True)
    Rn = Rk / rnorm
    c = np.sum(Rn * P[keep], axis=1)
    losses[keep] = 1.0 - c
    grad[keep] = -(P[keep] - c[:, None] * Rn) / rnorm
    return losses, grad
