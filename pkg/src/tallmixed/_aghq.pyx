# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled adaptive Gauss-Hermite kernel.

One pass per cluster over contiguous rows: damped Newton for the posterior
mode, then the quadrature sum and the exact gradient of the approximation.
Mirrors ``tallmixed._aghq_py.cluster_aghq``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, fabs, M_PI

cnp.import_array()

DEF MAX_NEWTON = 100
DEF MAX_HALVING = 40


cdef inline double logaddexp(double a, double b) noexcept nogil:
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


cdef inline void row_eval(int family, double extra, double logt, double y, double v,
                          double *core, double *d1, double *d2, double *d3) noexcept nogil:
    cdef double p, q, mu, tm, r, e
    if family == 0:
        # one exp and one log1p give both softplus(v) and expit(v)
        e = exp(-fabs(v))
        p = 1.0 / (1.0 + e) if v >= 0 else e / (1.0 + e)
        q = p * (1.0 - p)
        core[0] = y * v - ((v if v > 0 else 0.0) + log1p(e))
        d1[0] = y - p
        d2[0] = -q
        d3[0] = -q * (1.0 - 2.0 * p)
    elif family == 1:
        mu = exp(v)
        core[0] = y * v - mu
        d1[0] = y - mu
        d2[0] = -mu
        d3[0] = -mu
    elif family == 2:
        mu = exp(v)
        tm = extra + mu
        core[0] = y * v - (extra + y) * (log(tm) if v < 700.0 else logaddexp(logt, v))
        d1[0] = extra * (y - mu) / tm
        d2[0] = -(y + extra) * extra * mu / (tm * tm)
        d3[0] = -(y + extra) * extra * mu * (extra - mu) / (tm * tm * tm)
    else:
        r = y - v
        core[0] = -0.5 * r * r / extra
        d1[0] = r / extra
        d2[0] = -1.0 / extra
        d3[0] = 0.0


cdef int mode_search(const double[::1] eta, const double[::1] y, const double[::1] w,
                     int family, double extra, double logt, Py_ssize_t lo, Py_ssize_t hi,
                     double inv_t, double b0, double *out) noexcept nogil:
    """Damped Newton; fills out = [b, f, g, h2, h3]. Returns 0 on success."""
    cdef double b = b0, f = 0.0, g = 0.0, h2 = 0.0, h3 = 0.0
    cdef double bn, fn, gn, h2n, h3n, step
    cdef double core, d1, d2, d3
    cdef Py_ssize_t i
    cdef int it, k, done = 0
    for i in range(lo, hi):
        row_eval(family, extra, logt, y[i], eta[i] + b, &core, &d1, &d2, &d3)
        f += w[i] * core
        g += w[i] * d1
        h2 += w[i] * d2
        h3 += w[i] * d3
    f -= 0.5 * b * b * inv_t
    g -= b * inv_t
    h2 -= inv_t
    for it in range(MAX_NEWTON):
        if not (h2 < 0):
            return 1
        step = -g / h2
        for k in range(MAX_HALVING + 1):
            if k == MAX_HALVING:
                return 1
            bn = b + step
            fn = 0.0
            gn = 0.0
            h2n = 0.0
            h3n = 0.0
            for i in range(lo, hi):
                row_eval(family, extra, logt, y[i], eta[i] + bn, &core, &d1, &d2, &d3)
                fn += w[i] * core
                gn += w[i] * d1
                h2n += w[i] * d2
                h3n += w[i] * d3
            fn -= 0.5 * bn * bn * inv_t
            if fn >= f - 1e-12 * fabs(f) or step == 0.0:
                break
            step *= 0.5
        b = bn
        f = fn
        g = gn - bn * inv_t
        h2 = h2n - inv_t
        h3 = h3n
        if fabs(step) <= 1e-12 * (fabs(b) if fabs(b) > 1.0 else 1.0):
            done = 1
            break
    if not done or not (h2 < 0) or b != b:
        return 1
    out[0] = b
    out[1] = f
    out[2] = g
    out[3] = h2
    out[4] = h3
    return 0


def cluster_aghq(eta, y, w, lconst, kconst, int family, double extra, ptr, double tau2,
                 nodes, logw, b_start, bint want_grad, bint want_kappa):
    cdef const double[::1] eta_v = np.ascontiguousarray(eta, dtype=np.float64)
    cdef const double[::1] y_v = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] w_v = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[::1] lc_v = np.ascontiguousarray(lconst, dtype=np.float64)
    cdef const double[::1] kc_v = np.ascontiguousarray(kconst, dtype=np.float64)
    cdef const cnp.int64_t[::1] ptr_v = np.ascontiguousarray(ptr, dtype=np.int64)
    cdef const double[::1] x_v = np.ascontiguousarray(nodes, dtype=np.float64)
    cdef const double[::1] lw_v = np.ascontiguousarray(logw, dtype=np.float64)
    cdef const double[::1] b0_v = np.ascontiguousarray(b_start, dtype=np.float64)

    cdef Py_ssize_t J = ptr_v.shape[0] - 1
    cdef Py_ssize_t N = eta_v.shape[0]
    cdef Py_ssize_t Q = x_v.shape[0]
    cdef Py_ssize_t j, i, k, lo, hi, nmax = 0
    cdef bint kap = want_kappa and family == 2
    cdef double inv_t = 1.0 / tau2
    cdef double logt = log(extra) if family == 2 else 0.0
    cdef double sq2 = sqrt(2.0)
    cdef double half_log_2pi_t = 0.5 * log(2.0 * M_PI * tau2)

    for j in range(J):
        if ptr_v[j + 1] - ptr_v[j] > nmax:
            nmax = ptr_v[j + 1] - ptr_v[j]

    ll_a = np.empty(J)
    b_a = np.empty(J)
    s_a = np.empty(J)
    cdef double[::1] ll = ll_a
    cdef double[::1] bh = b_a
    cdef double[::1] sg = s_a
    cdef double[::1] rc
    cdef double[::1] gr
    cdef double[::1] gk
    rc_a = gr_a = gk_a = None
    if want_grad:
        rc_a = np.empty(N)
        gr_a = np.empty(J)
        rc = rc_a
        gr = gr_a
    if kap and want_grad:
        gk_a = np.empty(J)
        gk = gk_a
    cache_a = np.empty(nmax * Q if want_grad else 1)
    cdef double[::1] cache = cache_a
    lk_a = np.empty(Q)
    fk_a = np.empty(Q)
    gq_a = np.empty(Q)
    fkk_a = np.empty(Q)
    cdef double[::1] Lk = lk_a
    cdef double[::1] fk = fk_a
    cdef double[::1] gq = gq_a
    cdef double[::1] fkk = fkk_a

    cdef double res[5]
    cdef double bhat, H, sigma, h3, const_sum, bk, v, core, d1, d2, d3, m, s, p
    cdef double A, B, K, e_row, a_i, mu, tm, s1k, s2k, pb2, pfk
    cdef double db, dh2

    with nogil:
        for j in range(J):
            lo = ptr_v[j]
            hi = ptr_v[j + 1]
            if mode_search(eta_v, y_v, w_v, family, extra, logt, lo, hi, inv_t, b0_v[j], res):
                with gil:
                    return j, None, None, None, None, None, None
            bhat = res[0]
            H = -res[3]
            h3 = res[4]
            sigma = 1.0 / sqrt(H)
            const_sum = 0.0
            for i in range(lo, hi):
                const_sum += w_v[i] * lc_v[i]
            for k in range(Q):
                bk = bhat + sq2 * sigma * x_v[k]
                fk[k] = -0.5 * bk * bk * inv_t
                gq[k] = -bk * inv_t
                fkk[k] = 0.0
                for i in range(lo, hi):
                    v = eta_v[i] + bk
                    row_eval(family, extra, logt, y_v[i], v, &core, &d1, &d2, &d3)
                    fk[k] += w_v[i] * core
                    if want_grad:
                        gq[k] += w_v[i] * d1
                        cache[(i - lo) * Q + k] = d1
                        if kap:
                            mu = exp(v)
                            fkk[k] += w_v[i] * extra * (kc_v[i] - logaddexp(logt, v) - (extra + y_v[i]) / (extra + mu))
                Lk[k] = lw_v[k] + fk[k]
            m = Lk[0]
            for k in range(1, Q):
                if Lk[k] > m:
                    m = Lk[k]
            s = 0.0
            for k in range(Q):
                Lk[k] = exp(Lk[k] - m)
                s += Lk[k]
            ll[j] = const_sum + log(sq2 * sigma) - half_log_2pi_t + m + log(s)
            bh[j] = bhat
            sg[j] = sigma
            if not want_grad:
                continue

            A = 0.0
            B = 0.0
            pb2 = 0.0
            pfk = 0.0
            for k in range(Q):
                p = Lk[k] / s
                Lk[k] = p
                bk = bhat + sq2 * sigma * x_v[k]
                A += p * gq[k]
                B += p * gq[k] * sq2 * x_v[k]
                pb2 += p * bk * bk
                pfk += p * fkk[k]
            K = 0.5 * sigma * sigma * (1.0 + B * sigma)
            s1k = 0.0
            s2k = 0.0
            for i in range(lo, hi):
                v = eta_v[i] + bhat
                row_eval(family, extra, logt, y_v[i], v, &core, &d1, &d2, &d3)
                e_row = 0.0
                for k in range(Q):
                    e_row += Lk[k] * cache[(i - lo) * Q + k]
                a_i = w_v[i] * d2 / H
                rc[i] = a_i * (K * h3 + A) + K * w_v[i] * d3 + w_v[i] * e_row
                if kap:
                    mu = exp(v)
                    tm = extra + mu
                    s1k += w_v[i] * extra * (y_v[i] - mu) * mu / (tm * tm)
                    s2k += w_v[i] * (-extra * mu * (2.0 * extra * mu + y_v[i] * (mu - extra)) / (tm * tm * tm))
            db = bhat * inv_t / H
            dh2 = h3 * db + inv_t
            gr[j] = K * dh2 - 0.5 + 0.5 * pb2 * inv_t + A * db
            if kap:
                db = s1k / H
                dh2 = h3 * db + s2k
                gk[j] = K * dh2 + pfk + A * db

    return -1, ll_a, b_a, s_a, rc_a, gr_a, gk_a
