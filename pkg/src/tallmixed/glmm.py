"""Random-intercept GLMM by adaptive Gauss-Hermite quadrature.

The model is ``g(mu_ij) = x_ij beta + b_j`` with ``b_j ~ N(0, tau2)``.  Each
cluster's integral over ``b_j`` is approximated by Gauss-Hermite quadrature
centred at the posterior mode and scaled by the posterior curvature
(``quad_points=1`` is the Laplace approximation).  The compiled kernel
returns the approximation *and* its exact gradient, so the optimiser works
with a consistent objective/gradient pair.

Parameters are optimised on the scale ``(beta, log tau2[, log theta])``;
a log-variance below -30 maps to ``tau2 = 0`` exactly, where the marginal
likelihood reduces to the GLM likelihood.
"""

from __future__ import annotations

import logging
import time
import warnings
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from . import glm as _glm
from .families import NEGATIVE_BINOMIAL
from .kernels import get_kernel
from .model import GlmmSpec, model_matrix, offset_vector

log = logging.getLogger(__name__)

LOG_TAU2_FLOOR = -30.0
LOG_TAU2_CEIL = 12.0
DEFAULT_QUAD_POINTS = 15


class QuadratureError(RuntimeError):
    """Posterior-mode search failed for a cluster."""

    def __init__(self, cluster_label: str):
        self.cluster = cluster_label
        super().__init__(f"posterior mode search failed for cluster {cluster_label!r}")


@dataclass
class GlmmFit:
    names: list[str]
    beta: np.ndarray
    se: np.ndarray
    vcov: np.ndarray
    tau2: float
    theta_hat: float | None
    loglik: float
    eb_modes: np.ndarray
    cluster_labels: tuple[str, ...]
    converged: bool
    quad_points: int
    runtime_seconds: float
    family: str
    n_obs: float
    iterations: int = 0
    max_abs_grad: float = float("nan")
    weakly_identified: bool = False
    boundary: bool = False
    tau2_se: float | None = None
    trace: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "model": "glmm",
            "family": self.family,
            "names": list(self.names),
            "beta": self.beta.tolist(),
            "se": self.se.tolist(),
            "vcov": self.vcov.reshape(-1).tolist(),
            "tau2": self.tau2,
            "tau2_se": self.tau2_se,
            "theta": self.theta_hat,
            "loglik": self.loglik,
            "converged": self.converged,
            "boundary": self.boundary,
            "weakly_identified": self.weakly_identified,
            "iterations": self.iterations,
            "max_abs_grad": self.max_abs_grad,
            "quad_points": self.quad_points,
            "n_obs": self.n_obs,
            "runtime_seconds": self.runtime_seconds,
            "eb_modes": {lab: float(b) for lab, b in zip(self.cluster_labels, self.eb_modes)},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> GlmmFit:
        p = len(d["names"])
        labels = tuple(d["eb_modes"])
        return cls(list(d["names"]), np.asarray(d["beta"], float), np.asarray(d["se"], float),
                   np.asarray(d["vcov"], float).reshape(p, p), d["tau2"], d.get("theta"),
                   d["loglik"], np.array([d["eb_modes"][k] for k in labels]), labels,
                   d["converged"], d["quad_points"], d["runtime_seconds"], d["family"],
                   d["n_obs"], d.get("iterations", 0), d.get("max_abs_grad", float("nan")),
                   d.get("weakly_identified", False), d.get("boundary", False), d.get("tau2_se"))


def gauss_hermite(quad_points: int) -> tuple[np.ndarray, np.ndarray]:
    """Hermite nodes and ``log(weight) + node**2``."""
    if quad_points < 1:
        raise ValueError("quad_points must be >= 1")
    x, wq = np.polynomial.hermite.hermgauss(quad_points)
    return x, np.log(wq) + x * x


class MarginalLikelihood:
    """Objective ``(beta, log tau2[, log theta]) -> marginal loglik`` with gradient.

    Rows are sorted by cluster once; posterior modes are warm-started from
    the previous evaluation.
    """

    def __init__(self, spec: GlmmSpec, data, quad_points: int = DEFAULT_QUAD_POINTS,
                 estimate_theta: bool = False, backend: str | None = None):
        X, names = model_matrix(spec.glm, data)
        y = np.asarray(data.y, dtype=float)
        spec.family.check_response(y)
        codes = np.asarray(data.cluster)
        order = np.argsort(codes, kind="stable")
        self.spec = spec
        self.names = names
        self.order = order
        self.X = np.ascontiguousarray(X[order])
        self.y = y[order]
        self.w = np.asarray(data.weights, dtype=float)[order]
        self.off = offset_vector(spec.glm, data)[order]
        self.cluster_labels = tuple(data.cluster_labels)
        J = data.n_clusters
        self.ptr = np.searchsorted(codes[order], np.arange(J + 1)).astype(np.int64)
        self.J = J
        self.p = X.shape[1]
        self.quad_points = quad_points
        self.nodes, self.logw = gauss_hermite(quad_points)
        self.kernel = get_kernel(backend)
        self.family = spec.family
        self.estimate_theta = bool(estimate_theta and spec.family.name == NEGATIVE_BINOMIAL)
        self.modes = np.zeros(J)
        self.n_eval = 0
        self._const_cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def n_params(self) -> int:
        return self.p + 1 + int(self.estimate_theta)

    def pack(self, beta, tau2, theta=None) -> np.ndarray:
        rho = LOG_TAU2_FLOOR - 1.0 if tau2 <= 0 else np.log(tau2)
        x = list(np.asarray(beta, dtype=float)) + [rho]
        if self.estimate_theta:
            x.append(np.log(theta if theta is not None else self.family.theta))
        return np.array(x)

    def unpack(self, x):
        beta = np.asarray(x[: self.p], dtype=float)
        rho = float(x[self.p])
        tau2 = 0.0 if rho < LOG_TAU2_FLOOR else float(np.exp(rho))
        fam = self.family
        if self.estimate_theta:
            fam = fam.with_theta(float(np.exp(x[self.p + 1])))
        return beta, tau2, fam

    def _consts(self, fam):
        key = fam.theta if fam.name == NEGATIVE_BINOMIAL else 0.0
        hit = self._const_cache.get(key)
        if hit is None:
            lconst = fam.const(self.y)
            kconst = fam.theta_const(self.y) if fam.name == NEGATIVE_BINOMIAL else np.zeros(len(self.y))
            if len(self._const_cache) > 8:
                self._const_cache.clear()
            hit = self._const_cache[key] = (lconst, kconst)
        return hit

    def evaluate(self, x, want_grad: bool = True):
        """Marginal loglik and (optionally) its gradient in the packed scale."""
        beta, tau2, fam = self.unpack(x)
        self.n_eval += 1
        eta = self.X @ beta + self.off
        if tau2 == 0.0:
            ll = float(np.dot(self.w, fam.loglik_obs(self.y, eta)))
            if not want_grad:
                return ll, None
            g = np.zeros(self.n_params)
            g[: self.p] = self.X.T @ (self.w * fam.d1(self.y, eta))
            if self.estimate_theta:
                g[self.p + 1] = float(np.dot(self.w, fam.dkappa(self.y, eta)))
            return ll, g
        lconst, kconst = self._consts(fam)
        args = (eta, self.y, self.w, lconst, kconst, fam.code, fam.extra, self.ptr, tau2,
                self.nodes, self.logw)
        status, ll_j, modes, _, row_coef, g_rho, g_kap = self.kernel(
            *args, self.modes, want_grad, self.estimate_theta)
        if status >= 0:
            # retry from zero in case the warm start was poor
            status, ll_j, modes, _, row_coef, g_rho, g_kap = self.kernel(
                *args, np.zeros(self.J), want_grad, self.estimate_theta)
            if status >= 0:
                raise QuadratureError(self.cluster_labels[status])
        self.modes = modes
        ll = float(np.sum(ll_j))
        if not want_grad:
            return ll, None
        g = np.empty(self.n_params)
        g[: self.p] = self.X.T @ row_coef
        g[self.p] = float(np.sum(g_rho))
        if self.estimate_theta:
            g[self.p + 1] = float(np.sum(g_kap))
        return ll, g

    def eb_modes(self, x) -> np.ndarray:
        _, tau2, _ = self.unpack(x)
        if tau2 == 0.0:
            return np.zeros(self.J)
        self.evaluate(x, want_grad=False)
        return self.modes.copy()

    def boundary_score(self, beta, fam) -> tuple[float, float]:
        """Score and expected information for tau2 at tau2 = 0."""
        eta = self.X @ beta + self.off
        s1 = np.add.reduceat(self.w * fam.d1(self.y, eta), self.ptr[:-1])
        s2 = np.add.reduceat(self.w * fam.d2(self.y, eta), self.ptr[:-1])
        iw = np.add.reduceat(self.w * fam.info_weight(eta), self.ptr[:-1])
        return 0.5 * float(np.sum(s1 * s1 + s2)), 0.5 * float(np.sum(iw * iw))


def marginal_loglik(spec: GlmmSpec, beta, tau2: float, data, quad_points: int = DEFAULT_QUAD_POINTS,
                    backend: str | None = None) -> float:
    """Log marginal likelihood ``sum_j log int prod_i f(y_ij | x_ij beta + b)^w_ij phi(b; 0, tau2) db``."""
    if tau2 < 0:
        raise ValueError("tau2 must be non-negative")
    obj = MarginalLikelihood(spec, data, quad_points, backend=backend)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.shape[0] != obj.p:
        raise ValueError(f"beta has length {beta.shape[0]}, expected {obj.p}")
    return obj.evaluate(obj.pack(beta, tau2), want_grad=False)[0]


def numerical_hessian(fun, x: np.ndarray, free: np.ndarray | None = None, rel_step: float = 1e-4) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrised."""
    n = len(x)
    idx = np.arange(n) if free is None else np.flatnonzero(free)
    H = np.zeros((len(idx), len(idx)))
    for a, k in enumerate(idx):
        h = rel_step * max(1.0, abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        H[:, a] = (fun(xp)[idx] - fun(xm)[idx]) / (2.0 * h)
    return 0.5 * (H + H.T)


def _newton_polish(obj: MarginalLikelihood, x: np.ndarray, free: np.ndarray, bounds, trace: list,
                   tol: float, max_iter: int = 20):
    """Newton iterations with a finite-difference Hessian and backtracking."""
    ll, g = obj.evaluate(x)
    H = None
    for _ in range(max_iter):
        gf = g[free]
        if np.max(np.abs(gf), initial=0.0) < tol:
            break
        H = numerical_hessian(lambda z: obj.evaluate(z)[1], x, free)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", linalg.LinAlgWarning)
                step = -linalg.solve(H, gf, assume_a="sym")
        except (linalg.LinAlgError, linalg.LinAlgWarning):
            break
        if np.dot(step, gf) <= 0:
            # not an ascent direction: fall back to gradient ascent
            step = gf / max(1.0, np.max(np.abs(H)))
        t = 1.0
        improved = False
        while t > 1e-8:
            cand = x.copy()
            cand[free] += t * step
            for k in np.flatnonzero(free):
                lo, hi = bounds[k]
                cand[k] = min(max(cand[k], lo if lo is not None else -np.inf), hi if hi is not None else np.inf)
            ll_c, g_c = obj.evaluate(cand)
            if ll_c >= ll - 1e-12 * abs(ll):
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        x, ll, g = cand, ll_c, g_c
        trace.append(ll)
    return x, ll, g


def _glm_information(gfit) -> np.ndarray:
    """GLM expected information recovered from its covariance."""
    return linalg.inv(gfit.vcov)


def glmm_fit(spec: GlmmSpec, data, quad_points: int = DEFAULT_QUAD_POINTS,
             estimate_theta: bool = True, start=None, tol: float = 1e-8,
             max_iter: int = 500, backend: str | None = None) -> GlmmFit:
    """Maximum marginal-likelihood fit of the random-intercept GLMM.

    Parameters
    ----------
    spec : GlmmSpec
    data : Dataset or CollapsedDataset
        Weights in a collapsed table act as likelihood powers.
    quad_points : int
        Adaptive Gauss-Hermite nodes per cluster (1 = Laplace).
    estimate_theta : bool
        For the negative binomial, estimate the dispersion jointly.
    start : GlmmFit or GlmFit, optional
        Warm start (coefficients, tau2 and theta are reused).

    Returns
    -------
    GlmmFit
        Standard errors come from the inverse of a finite-difference Hessian
        of the marginal log-likelihood at the optimum.
    """
    t0 = time.perf_counter()
    obj = MarginalLikelihood(spec, data, quad_points, estimate_theta, backend)
    X_full, _ = model_matrix(spec.glm, data)
    _glm.check_rank(X_full, obj.names, np.asarray(data.weights, dtype=float))
    p = obj.p
    trace: list[float] = []

    # GLM at tau2 = 0: the boundary candidate and the default start
    glm_start = None if start is None else start.beta
    gfit = _glm.glm_fit(spec.glm, data, estimate_theta=obj.estimate_theta, start=glm_start)
    fam0 = spec.family.with_theta(gfit.theta_hat) if obj.estimate_theta else spec.family
    s0, i0 = obj.boundary_score(gfit.beta, fam0)

    if start is not None and getattr(start, "tau2", 0.0) > 0:
        tau_start = start.tau2
        beta_start = start.beta
        theta_start = start.theta_hat or (fam0.theta if obj.estimate_theta else None)
    else:
        tau_start = float(np.clip(s0 / i0 if i0 > 0 else 0.05, 1e-3, 10.0))
        beta_start = gfit.beta
        theta_start = gfit.theta_hat
    x0 = obj.pack(beta_start, tau_start, theta_start if obj.estimate_theta else None)
    bounds = [(None, None)] * p + [(LOG_TAU2_FLOOR, LOG_TAU2_CEIL)]
    if obj.estimate_theta:
        bounds.append(_glm.KAPPA_BOUNDS)

    # whiten beta with the GLM information so L-BFGS sees a well-scaled problem
    T = np.eye(len(x0))
    try:
        T[:p, :p] = linalg.solve_triangular(linalg.cholesky(_glm_information(gfit)), np.eye(p))
    except (linalg.LinAlgError, ValueError):
        pass
    zbounds = [(None, None)] * p + [(None if lo is None else lo - x0[k], None if hi is None else hi - x0[k])
                                    for k, (lo, hi) in enumerate(bounds[p:], start=p)]
    last = {}

    def negf(z):
        x = x0 + T @ z
        ll, g = obj.evaluate(x)
        last["ll"] = ll
        return -ll, -(T.T @ g)

    def callback(zk):
        trace.append(last["ll"])

    trace.append(obj.evaluate(x0, want_grad=False)[0])
    res = optimize.minimize(negf, np.zeros(len(x0)), jac=True, method="L-BFGS-B", bounds=zbounds,
                            callback=callback,
                            options={"maxiter": max_iter, "ftol": 1e-15, "gtol": 1e-10, "maxcor": 20})
    res.x = x0 + T @ res.x
    x = res.x.copy()
    iterations = int(res.nit)
    free = np.ones(len(x), dtype=bool)
    interior = x[p] > LOG_TAU2_FLOOR + 1e-6 and not (s0 <= 0 and np.exp(x[p]) < 1e-4)
    if interior:
        x, ll, g = _newton_polish(obj, x, free, bounds, trace, tol)
        interior = x[p] > LOG_TAU2_FLOOR + 1e-6 and np.exp(x[p]) > 1e-10

    # boundary solution: tau2 = 0 exactly, parameters at the GLM optimum
    xb = obj.pack(gfit.beta, 0.0, gfit.theta_hat if obj.estimate_theta else None)
    llb, gb = obj.evaluate(xb)
    boundary = (not interior) or (s0 <= 0 and llb >= obj.evaluate(x, want_grad=False)[0] - 1e-9)
    if boundary:
        x = xb
        free = np.ones(len(x), dtype=bool)
        free[p] = False
        x, ll, g = _newton_polish(obj, x, free, bounds, trace, tol)
    ll, g = obj.evaluate(x)
    gfree = g[free]
    max_grad = float(np.max(np.abs(gfree), initial=0.0))

    H = numerical_hessian(lambda z: obj.evaluate(z)[1], x, free)
    try:
        cov_free = linalg.inv(-H)
        cov_free = 0.5 * (cov_free + cov_free.T)
        pos_def = bool(np.all(linalg.eigvalsh(-H) > 0))
    except linalg.LinAlgError:
        cov_free = np.full_like(H, np.nan)
        pos_def = False
    vcov = cov_free[:p, :p]
    se = np.sqrt(np.clip(np.diag(vcov), 0, None))
    beta, tau2, fam = obj.unpack(x)
    tau2_se = None
    if not boundary:
        tau2_se = float(tau2 * np.sqrt(max(cov_free[p, p], 0.0)))
    converged = bool(max_grad < max(1e-6, tol) and pos_def and np.all(np.isfinite(se)))
    if not converged:
        log.warning("GLMM fit did not converge: max |grad| = %.3g, Hessian pd = %s", max_grad, pos_def)
    return GlmmFit(
        names=obj.names, beta=beta, se=se, vcov=vcov, tau2=tau2,
        theta_hat=fam.theta if obj.estimate_theta else (spec.family.theta if fam.name == NEGATIVE_BINOMIAL else None),
        loglik=ll, eb_modes=obj.eb_modes(x), cluster_labels=obj.cluster_labels,
        converged=converged, quad_points=quad_points, runtime_seconds=time.perf_counter() - t0,
        family=fam.name, n_obs=float(obj.w.sum()), iterations=iterations, max_abs_grad=max_grad,
        weakly_identified=obj.J < 2, boundary=boundary, tau2_se=tau2_se, trace=trace)


def fitted_values(fit: GlmmFit, spec: GlmmSpec, data, allow_unconverged: bool = False) -> dict[str, np.ndarray]:
    """Per-row fitted means ``inverse_link(x beta + b_j + offset)``.

    Clusters are matched to the fit's empirical-Bayes modes by label.
    """
    if not fit.converged and not allow_unconverged:
        raise ValueError("fit did not converge")
    X, _ = model_matrix(spec.glm, data)
    lookup = dict(zip(fit.cluster_labels, fit.eb_modes))
    labels = [data.cluster_labels[c] for c in data.cluster]
    unknown = sorted({lab for lab in set(labels) if lab not in lookup})
    if unknown:
        raise KeyError(f"clusters not in the fit: {unknown[:5]}")
    b = np.array([lookup[lab] for lab in labels])
    eta = X @ fit.beta + offset_vector(spec.glm, data) + b
    fam = spec.family if fit.theta_hat is None else spec.family.with_theta(fit.theta_hat) \
        if spec.family.name == NEGATIVE_BINOMIAL else spec.family
    return {"row": np.arange(data.n_rows), "cluster": np.array(labels, dtype=object),
            "linear_predictor": eta, "fitted": fam.inverse_link(eta)}
