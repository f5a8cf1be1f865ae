"""Pure-numpy adaptive Gauss-Hermite kernel (fallback for ``_aghq``).

Works on rows sorted by cluster, with ``ptr[j]:ptr[j+1]`` delimiting cluster
``j``.  All clusters are processed at once with segment reductions.  The
signature and outputs match the compiled kernel exactly.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

MAX_NEWTON = 100
MAX_HALVING = 40


def _eval(family, extra, y, v, order):
    """Per-row (core loglik, d1, d2, d3) at linear predictor ``v``."""
    if family == 0:
        p = expit(v)
        core = y * v - np.logaddexp(0.0, v)
        q = p * (1.0 - p)
        return core, y - p, -q, -q * (1.0 - 2.0 * p)
    if family == 1:
        mu = np.exp(v)
        return y * v - mu, y - mu, -mu, -mu
    if family == 2:
        t = extra
        mu = np.exp(v)
        tm = t + mu
        core = y * v - (t + y) * np.logaddexp(np.log(t), v)
        d2 = -(y + t) * t * mu / tm ** 2
        d3 = None if order < 3 else -(y + t) * t * mu * (t - mu) / tm ** 3
        return core, t * (y - mu) / tm, d2, d3
    r = y - v
    return -0.5 * r * r / extra, r / extra, np.full_like(v, -1.0 / extra), np.zeros_like(v)


def _seg(values, ptr):
    """Segment sums over rows (axis 0), one segment per cluster."""
    return np.add.reduceat(values, ptr[:-1], axis=0)


def cluster_aghq(eta, y, w, lconst, kconst, family, extra, ptr, tau2, nodes, logw,
                 b_start, want_grad, want_kappa):
    """Per-cluster adaptive Gauss-Hermite log marginal likelihood.

    Parameters
    ----------
    eta, y, w, lconst : ndarray (N,)
        Fixed-part linear predictor (offset included), response, weights and
        the eta-free part of each row's log-density.
    kconst : ndarray (N,)
        ``digamma(y+theta) - digamma(theta) + log(theta) + 1`` (negative
        binomial only; ignored otherwise).
    family : int
        0 bernoulli, 1 poisson, 2 negative binomial, 3 gaussian.
    extra : float
        theta (negative binomial) or sigma2 (gaussian).
    ptr : ndarray (J+1,) of int64
    tau2 : float
        Random-intercept variance, > 0.
    nodes, logw : ndarray (Q,)
        Hermite nodes and ``log(weight) + node**2``.
    b_start : ndarray (J,)
        Starting values for the posterior modes.

    Returns
    -------
    status : int
        -1 on success, otherwise the index of the first cluster whose mode
        search failed.
    loglik, mode, scale : ndarray (J,)
    row_coef : ndarray (N,) or None
        ``X.T @ row_coef`` is the gradient with respect to the coefficients.
    grad_rho, grad_kappa : ndarray (J,) or None
        Gradient contributions for ``log(tau2)`` and ``log(theta)``.
    """
    eta = np.asarray(eta, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    ptr = np.asarray(ptr, dtype=np.int64)
    J = len(ptr) - 1
    sizes = np.diff(ptr)
    cl = np.repeat(np.arange(J), sizes)
    inv_t = 1.0 / tau2

    # damped Newton for every cluster's posterior mode
    b = np.array(b_start, dtype=float, copy=True)
    core, d1, d2, _ = _eval(family, extra, y, eta + b[cl], 2)
    f = _seg(w * core, ptr) - 0.5 * b * b * inv_t
    g = _seg(w * d1, ptr) - b * inv_t
    hh = _seg(w * d2, ptr) - inv_t
    active = np.ones(J, dtype=bool)
    status = -1
    for _ in range(MAX_NEWTON):
        step = np.where(active, -g / hh, 0.0)
        for _ in range(MAX_HALVING):
            b_new = b + step
            core, d1, d2, _ = _eval(family, extra, y, eta + b_new[cl], 2)
            f_new = _seg(w * core, ptr) - 0.5 * b_new * b_new * inv_t
            worse = active & (f_new < f - 1e-12 * np.abs(f)) & (np.abs(step) > 0)
            if not worse.any():
                break
            step = np.where(worse, 0.5 * step, step)
        else:
            status = int(np.flatnonzero(worse)[0])
            break
        b = b_new
        f = f_new
        g = _seg(w * d1, ptr) - b * inv_t
        hh = _seg(w * d2, ptr) - inv_t
        active = active & ~(np.abs(step) <= 1e-12 * np.maximum(1.0, np.abs(b)))
        if not active.any():
            break
    else:
        status = int(np.flatnonzero(active)[0])
    bad = ~np.isfinite(b) | ~(hh < 0)
    if status < 0 and bad.any():
        status = int(np.flatnonzero(bad)[0])
    if status >= 0:
        return status, None, None, None, None, None, None

    v0 = eta + b[cl]
    _, _, d2, d3 = _eval(family, extra, y, v0, 3)
    H = -(_seg(w * d2, ptr) - inv_t)
    h3 = _seg(w * d3, ptr)
    sigma = 1.0 / np.sqrt(H)

    nodes = np.asarray(nodes, dtype=float)
    logw = np.asarray(logw, dtype=float)
    bk = b[:, None] + np.sqrt(2.0) * sigma[:, None] * nodes[None, :]      # (J, Q)
    V = eta[:, None] + bk[cl]                                            # (N, Q)
    core, d1, _, _ = _eval(family, extra, y[:, None], V, 1)
    fk = _seg(w[:, None] * core, ptr) - 0.5 * bk * bk * inv_t
    L = logw[None, :] + fk
    m = L.max(axis=1)
    e = np.exp(L - m[:, None])
    s = e.sum(axis=1)
    const = _seg(w * lconst, ptr)
    loglik = const + np.log(np.sqrt(2.0) * sigma) - 0.5 * np.log(2.0 * np.pi * tau2) + m + np.log(s)
    if not want_grad:
        return status, loglik, b, sigma, None, None, None

    p = e / s[:, None]
    gk = _seg(w[:, None] * d1, ptr) - bk * inv_t
    A = (p * gk).sum(axis=1)
    B = (p * gk * (np.sqrt(2.0) * nodes[None, :])).sum(axis=1)
    K = 0.5 * sigma ** 2 * (1.0 + B * sigma)

    a = w * d2 / H[cl]
    e_row = w * (p[cl] * d1).sum(axis=1)
    row_coef = a * (K * h3 + A)[cl] + K[cl] * w * d3 + e_row

    db_rho = b * inv_t / H
    dh2_rho = h3 * db_rho + inv_t
    grad_rho = K * dh2_rho - 0.5 + (p * bk * bk).sum(axis=1) * 0.5 * inv_t + A * db_rho

    grad_kappa = None
    if want_kappa and family == 2:
        t = extra
        mu0 = np.exp(v0)
        tm0 = t + mu0
        s1k = _seg(w * t * (y - mu0) * mu0 / tm0 ** 2, ptr)
        s2k = _seg(w * (-t * mu0 * (2.0 * t * mu0 + y * (mu0 - t)) / tm0 ** 3), ptr)
        muk = np.exp(V)
        lk = t * (np.asarray(kconst)[:, None] - np.logaddexp(np.log(t), V) - (t + y[:, None]) / (t + muk))
        fkk = _seg(w[:, None] * lk, ptr)
        db_k = s1k / H
        dh2_k = h3 * db_k + s2k
        grad_kappa = K * dh2_k + (p * fkk).sum(axis=1) + A * db_k
    return status, loglik, b, sigma, row_coef, grad_rho, grad_kappa
