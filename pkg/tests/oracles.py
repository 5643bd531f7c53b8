"""Brute-force reference implementations used as test oracles.

Everything here is written with explicit index loops over ``itertools.product``
and avoids the package's own kernels, so agreement is meaningful.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from dst2r.model import UnitRankComponent


def indices(shape):
    return itertools.product(*[range(d) for d in shape])


def outer(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    out = np.zeros(a.shape + b.shape)
    for i in indices(a.shape):
        for j in indices(b.shape):
            out[i + j] = a[i] * b[j]
    return out


def inner(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return sum(a[i] * b[i] for i in indices(a.shape))


def contracted(a, b, q):
    """Sum over the last ``q`` modes of ``a`` paired with the first ``q`` of ``b``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    keep_a, shared, keep_b = a.shape[:a.ndim - q], a.shape[a.ndim - q:], b.shape[q:]
    out = np.zeros(keep_a + keep_b)
    for i in indices(keep_a):
        for j in indices(keep_b):
            s = 0.0
            for k in indices(shared):
                s += a[i + k] * b[k + j]
            out[i + j] = s
    return out


def mode_n(t, v, n):
    t = np.asarray(t, float)
    rest = t.shape[:n] + t.shape[n + 1:]
    out = np.zeros(rest)
    for idx in indices(rest):
        s = 0.0
        for i in range(t.shape[n]):
            s += t[idx[:n] + (i,) + idx[n:]] * v[i]
        out[idx] = s
    return out


def matricize(t, n):
    """Index map j = sum_{l != n} i_l * prod_{m < l, m != n} d_m (0-based)."""
    t = np.asarray(t, float)
    shape = t.shape
    cols = int(np.prod([d for l, d in enumerate(shape) if l != n]))
    out = np.zeros((shape[n], cols))
    for idx in indices(shape):
        j, stride = 0, 1
        for l, d in enumerate(shape):
            if l == n:
                continue
            j += idx[l] * stride
            stride *= d
        out[idx[n], j] = t[idx]
    return out


def vec(t):
    """Column-major flatten: first index fastest."""
    t = np.asarray(t, float)
    out = np.zeros(t.size)
    for idx in indices(t.shape):
        pos, stride = 0, 1
        for l, d in enumerate(t.shape):
            pos += idx[l] * stride
            stride *= d
        out[pos] = t[idx]
    return out


def compose(factors, w=1.0):
    out = np.asarray(factors[0], float)
    for f in factors[1:]:
        out = outer(out, f)
    return w * out


def dense_predict(x, B, p):
    return contracted(x, B, p)


def standardize(X, Y):
    """Per-entry centering and unit sd scaling of X (zero sd left unscaled); Y centered."""
    M = X.shape[0]
    Xs = np.zeros_like(X)
    for idx in indices(X.shape[1:]):
        col = [X[(m,) + idx] for m in range(M)]
        mu = sum(col) / M
        sd = (sum((c - mu) ** 2 for c in col) / M) ** 0.5
        sd = sd if sd > 0 else 1.0
        for m in range(M):
            Xs[(m,) + idx] = (X[(m,) + idx] - mu) / sd
    Yc = Y - Y.mean(axis=0)
    return Xs, Yc


def lambda0(X, Y):
    """max |X^T Y| / M by double loop over predictor and response entries."""
    M = X.shape[0]
    best = 0.0
    for i in indices(X.shape[1:]):
        for j in indices(Y.shape[1:]):
            s = 0.0
            for m in range(M):
                s += X[(m,) + i] * Y[(m,) + j]
            best = max(best, abs(s) / M)
    return best


def dense_objective(X, Y, B, p, alpha, lam):
    """(J, L, R) for a dense coefficient tensor ``B`` on stacked data."""
    M = X.shape[0]
    xf = X.reshape(M, -1)
    bf = B.reshape(xf.shape[1], -1)
    resid = Y.reshape(M, -1) - xf @ bf
    L = float(np.sum(resid ** 2)) / M + alpha * float(np.sum(B ** 2))
    R = float(np.sum(np.abs(B)))
    return L + lam * R, L, R


def random_instance(rng, pshape, qshape, M, zero_frac=0.3):
    X = rng.standard_normal((M,) + tuple(pshape))
    Y = rng.standard_normal((M,) + tuple(qshape))

    def factor(d):
        v = rng.standard_normal(d)
        v[rng.random(d) < zero_frac] = 0.0
        if np.count_nonzero(v) < 2:
            v[:2] = rng.standard_normal(2) if d > 1 else 1.0
        return v / np.abs(v).sum()

    comp = UnitRankComponent(tuple(factor(d) for d in pshape), tuple(factor(d) for d in qshape),
                             float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.5, 2.0)))
    return X, Y, comp


def unit_betas(comp):
    betas, mu = [], comp.w_p * comp.w_q
    for f in comp.factors:
        n = np.abs(f.beta).sum()
        betas.append(f.beta / n)
        mu *= n
    return betas, mu


def exhaustive_select(X, Y, comp, modes, eps, alpha, lam, direction):
    """Brute-force J over every single-coordinate move of the given modes.

    Moves that grow |beta_hat[i]| by eps are forward candidates; moves that
    shrink it (clipped at zero, never emptying a factor) are backward ones.
    Returns (mode, index) of the minimal J with ties to the lowest mode/index.
    """
    p = comp.p
    betas, mu = unit_betas(comp)
    best, best_j = None, math.inf
    for k in modes:
        bh = mu * betas[k]
        for i in range(bh.size):
            if direction == "forward":
                deltas = [eps] if bh[i] > 0 else [-eps] if bh[i] < 0 else [eps, -eps]
            else:
                if bh[i] == 0:
                    continue
                if np.count_nonzero(bh) == 1 and abs(bh[i]) <= eps:
                    continue
                deltas = [-np.sign(bh[i]) * min(eps, abs(bh[i]))]
            for d in deltas:
                nb = bh.copy()
                nb[i] += d
                factors = [nb if l == k else betas[l] for l in range(len(betas))]
                B = compose(factors)
                J, _, _ = dense_objective(X, Y, B, p, alpha, lam)
                if J < best_j:
                    best, best_j = (k, i), J
    return best
