"""Compiled inner loops for the per-cluster score computations.

numba is optional: when it is missing the callers fall back to the
equivalent vectorized numpy implementation.  Both paths implement the
same formulas; the kernel exists because the campaign evaluates scores
hundreds of thousands of times on small arrays where dispatch overhead
dominates.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a soft dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return deco


@njit(cache=True)
def _cluster_terms_jit(Y, X, bases, beta, dispersion, clamp, want_derivs):
    n, m, d = X.shape
    L = bases.shape[0]
    Ld = L * d
    scores = np.zeros((n, Ld))
    dn = n if want_derivs else 0
    dscores = np.zeros((dn, Ld, d))

    mu = np.empty(m)
    u = np.empty(m)
    ps = np.empty(m)
    g = np.empty(m)
    halfc = np.empty(m)
    uM = np.empty((L, m))
    Xi = np.empty((m, d))
    gx = np.empty((m, d))
    V = np.empty((m, d))
    row = np.empty(d)

    for i in range(n):
        for j in range(m):
            for a in range(d):
                Xi[j, a] = X[i, j, a]
        for j in range(m):
            eta = 0.0
            for a in range(d):
                eta += Xi[j, a] * beta[a]
            if eta > clamp:
                eta = clamp
            elif eta < -clamp:
                eta = -clamp
            mj = 1.0 / (1.0 + np.exp(-eta))
            vj = mj * (1.0 - mj)
            sj = np.sqrt(dispersion * vj)
            mu[j] = mj
            u[j] = (Y[i, j] - mj) / sj
            ps[j] = vj / sj

        for l in range(L):
            for j in range(m):
                acc = 0.0
                for k in range(m):
                    acc += bases[l, j, k] * u[k]
                uM[l, j] = acc
            base = l * d
            for a in range(d):
                row[a] = 0.0
            for j in range(m):
                pj = ps[j] * uM[l, j]
                for a in range(d):
                    row[a] += pj * Xi[j, a]
            for a in range(d):
                scores[i, base + a] = row[a]

        if want_derivs:
            for j in range(m):
                one2 = 1.0 - 2.0 * mu[j]
                g[j] = -ps[j] - 0.5 * u[j] * one2
                halfc[j] = 0.5 * ps[j] * one2
                for b in range(d):
                    gx[j, b] = g[j] * Xi[j, b]
            for l in range(L):
                base = l * d
                # V = diag(c) X + diag(ps) M_l gx, with c_j = halfc_j uM_lj
                for j in range(m):
                    cj = halfc[j] * uM[l, j]
                    for b in range(d):
                        acc = 0.0
                        for k in range(m):
                            acc += bases[l, j, k] * gx[k, b]
                        V[j, b] = cj * Xi[j, b] + ps[j] * acc
                # dscores block = Xi' V
                for a in range(d):
                    for b in range(d):
                        row[b] = 0.0
                    for j in range(m):
                        xa = Xi[j, a]
                        for b in range(d):
                            row[b] += xa * V[j, b]
                    for b in range(d):
                        dscores[i, base + a, b] = row[b]
    return scores, dscores


def cluster_terms(Y, X, bases, beta, dispersion, clamp, want_derivs):
    Y = np.ascontiguousarray(Y)
    X = np.ascontiguousarray(X)
    bases = np.ascontiguousarray(bases)
    beta = np.ascontiguousarray(beta)
    return _cluster_terms_jit(Y, X, bases, beta, float(dispersion), float(clamp),
                              want_derivs)
