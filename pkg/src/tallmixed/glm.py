"""Weighted GLM engine: likelihood, score, information and IRLS fitting.

Weights are likelihood powers, so a collapsed table with multiplicities
reproduces the full-data likelihood, score and information exactly.
"""

from __future__ import annotations

import time
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import polygamma

from .data import SchemaError
from .families import NEGATIVE_BINOMIAL, Family
from .model import GlmSpec, design_row, model_matrix, offset_vector

SEPARATION_BOUND = 20.0
KAPPA_BOUNDS = (-12.0, 20.0)


class RankDeficientError(ValueError):
    """The design matrix does not have full column rank."""

    def __init__(self, collinear: Sequence[str]):
        self.collinear = list(collinear)
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(self.collinear)}")


@dataclass
class GlmFit:
    names: list[str]
    beta: np.ndarray
    vcov: np.ndarray
    se: np.ndarray
    loglik: float
    theta_hat: float | None
    converged: bool
    iterations: int
    runtime_seconds: float
    family: str
    n_obs: float
    separation: bool = False
    max_abs_score: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": "glm",
            "family": self.family,
            "names": list(self.names),
            "beta": self.beta.tolist(),
            "se": self.se.tolist(),
            "vcov": self.vcov.reshape(-1).tolist(),
            "loglik": self.loglik,
            "theta": self.theta_hat,
            "converged": self.converged,
            "separation": self.separation,
            "iterations": self.iterations,
            "n_obs": self.n_obs,
            "runtime_seconds": self.runtime_seconds,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> GlmFit:
        p = len(d["names"])
        return cls(list(d["names"]), np.asarray(d["beta"], float),
                   np.asarray(d["vcov"], float).reshape(p, p), np.asarray(d["se"], float),
                   d["loglik"], d.get("theta"), d["converged"], d["iterations"],
                   d["runtime_seconds"], d["family"], d["n_obs"], d.get("separation", False))


@dataclass(frozen=True)
class Prepared:
    X: np.ndarray
    names: list[str]
    y: np.ndarray
    w: np.ndarray
    offset: np.ndarray


def prepare(spec: GlmSpec, data) -> Prepared:
    X, names = model_matrix(spec, data)
    y = np.asarray(data.y, dtype=float)
    spec.family.check_response(y)
    return Prepared(X, names, y, np.asarray(data.weights, dtype=float), offset_vector(spec, data))


def _check_beta(beta, X) -> np.ndarray:
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.shape[0] != X.shape[1]:
        raise SchemaError(f"beta has length {beta.shape[0]}, design matrix has {X.shape[1]} columns")
    return beta


def loglik(spec: GlmSpec, beta, data) -> float:
    """Weighted log-likelihood ``sum_m w_m * l_m(beta)``."""
    p = prepare(spec, data)
    beta = _check_beta(beta, p.X)
    eta = p.X @ beta + p.offset
    return float(np.dot(p.w, spec.family.loglik_obs(p.y, eta)))


def score(spec: GlmSpec, beta, data) -> np.ndarray:
    p = prepare(spec, data)
    beta = _check_beta(beta, p.X)
    eta = p.X @ beta + p.offset
    return p.X.T @ (p.w * spec.family.d1(p.y, eta))


def fisher_information(spec: GlmSpec, beta, data) -> np.ndarray:
    """Expected information ``sum_m w_m v_m x_m x_m^T``."""
    p = prepare(spec, data)
    beta = _check_beta(beta, p.X)
    eta = p.X @ beta + p.offset
    return _weighted_gram(p.X, p.w * spec.family.info_weight(eta))


def _weighted_gram(X, v) -> np.ndarray:
    info = X.T @ (X * v[:, None])
    return 0.5 * (info + info.T)


def unit_information(spec: GlmSpec, beta, design: Mapping[str, float],
                     kinds: Mapping | None = None) -> np.ndarray:
    """Expected information of a single observation at ``design`` (exposure 1)."""
    x = design_row(spec, design, kinds)
    beta = _check_beta(beta, x[None, :])
    v = float(spec.family.info_weight(np.array([x @ beta]))[0])
    return v * np.outer(x, x)


def check_rank(X: np.ndarray, names: Sequence[str], w: np.ndarray | None = None, tol: float = 1e-9) -> None:
    """Raise :class:`RankDeficientError` naming the columns that are linear
    combinations of earlier ones."""
    if w is not None:
        X = X[w > 0]
    n, p = X.shape
    if p == 0:
        return
    if n < p:
        raise RankDeficientError(names[n:])
    scale = np.sqrt((X * X).sum(axis=0))
    scale[scale == 0] = 1.0
    _, R, piv = linalg.qr(X / scale, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > tol * max(d[0], 1e-300)))
    if rank < p:
        raise RankDeficientError([names[i] for i in sorted(piv[rank:])])


def _start(spec: GlmSpec, p: Prepared) -> np.ndarray:
    beta = np.zeros(p.X.shape[1])
    if spec.intercept:
        fam = spec.family
        expo = np.exp(p.offset)
        m = np.dot(p.w, p.y) / np.dot(p.w, expo)
        if fam.name == "bernoulli":
            m = min(max(m, 1e-4), 1 - 1e-4)
        elif fam.name != "gaussian":
            m = max(m, 1e-4)
        beta[0] = float(fam.link_fun(np.array([m]))[0])
    return beta


def _irls(fam: Family, p: Prepared, beta: np.ndarray, tol: float, max_iter: int):
    """Fisher scoring with step halving; returns (beta, ll, info, grad, iters, converged, separated)."""
    X, y, w, off = p.X, p.y, p.w, p.offset
    eta = X @ beta + off
    ll = float(np.dot(w, fam.loglik_obs(y, eta)))
    separated = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = X.T @ (w * fam.d1(y, eta))
        info = _weighted_gram(X, w * fam.info_weight(eta))
        if np.max(np.abs(grad), initial=0.0) < tol:
            return beta, ll, info, grad, it - 1, True, False
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", linalg.LinAlgWarning)
                step = linalg.solve(info, grad, assume_a="pos")
        except (linalg.LinAlgError, linalg.LinAlgWarning, ValueError):
            step = linalg.lstsq(info, grad)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = X @ cand + off
            ll_c = float(np.dot(w, fam.loglik_obs(y, eta_c)))
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
            if t < 1e-10:
                break
        if t < 1e-10:
            # no ascent possible: numerical optimum
            break
        delta = np.max(np.abs(cand - beta), initial=0.0)
        beta, eta, ll = cand, eta_c, ll_c
        if np.max(np.abs(beta), initial=0.0) > 1.5 * SEPARATION_BOUND and fam.name != "gaussian":
            separated = True
            break
        if delta < 1e-14 * max(1.0, np.max(np.abs(beta), initial=0.0)):
            break
    grad = X.T @ (w * fam.d1(y, eta))
    info = _weighted_gram(X, w * fam.info_weight(eta))
    conv = bool(np.max(np.abs(grad), initial=0.0) < tol)
    return beta, ll, info, grad, it, conv, separated


def _update_kappa(fam: Family, p: Prepared, eta: np.ndarray, kappa: float) -> float:
    """Newton ascent on log(theta) with beta held fixed."""
    y, w = p.y, p.w

    def value(k):
        return float(np.dot(w, fam.with_theta(np.exp(k)).loglik_obs(y, eta)))

    lo, hi = KAPPA_BOUNDS
    f = value(kappa)
    for _ in range(100):
        t = np.exp(kappa)
        ft = fam.with_theta(t)
        mu = np.exp(eta)
        d_theta = ft.dkappa(y, eta) / t
        d2_theta = (polygamma(1, y + t) - polygamma(1, t) + 1.0 / t - 1.0 / (t + mu)
                    - (mu - y) / (t + mu) ** 2)
        g = float(np.dot(w, t * d_theta))
        h = float(np.dot(w, t * d_theta + t * t * d2_theta))
        step = -g / h if h < 0 else np.sign(g) * 1.0
        step = float(np.clip(step, -5.0, 5.0))
        while True:
            cand = float(np.clip(kappa + step, lo, hi))
            fc = value(cand)
            if fc >= f - 1e-12 * abs(f) or abs(step) < 1e-14:
                break
            step *= 0.5
        done = abs(cand - kappa) < 1e-12
        kappa, f = cand, fc
        if done:
            break
    return kappa


def glm_fit(spec: GlmSpec, data, estimate_theta: bool = False, tol: float = 1e-8,
            max_iter: int = 100, start=None) -> GlmFit:
    """Weighted maximum-likelihood fit by IRLS.

    For the negative binomial with ``estimate_theta``, IRLS for the
    coefficients alternates with a Newton update of ``log(theta)`` until
    both change by less than 1e-8.  ``vcov`` is the inverse expected
    information at the optimum.  Separation (some ``|beta| > 20``) gives a
    result with ``converged=False`` and ``separation=True``.
    """
    t0 = time.perf_counter()
    return fit_prepared(spec, prepare(spec, data), estimate_theta, tol, max_iter, start, t0)


def fit_prepared(spec: GlmSpec, p: Prepared, estimate_theta: bool = False, tol: float = 1e-8,
                 max_iter: int = 100, start=None, t0: float | None = None) -> GlmFit:
    """:func:`glm_fit` on an already built design (for example a centred one)."""
    t0 = time.perf_counter() if t0 is None else t0
    check_rank(p.X, p.names, p.w)
    fam = spec.family
    beta = _start(spec, p) if start is None else np.asarray(start, dtype=float).copy()
    iters = 0
    theta = fam.theta if fam.name == NEGATIVE_BINOMIAL else None
    if fam.name == NEGATIVE_BINOMIAL and estimate_theta:
        kappa = float(np.log(fam.theta))
        conv = False
        sep = False
        for outer in range(max_iter):
            ft = fam.with_theta(np.exp(kappa))
            new_beta, ll, info, grad, it, conv_b, sep = _irls(ft, p, beta, tol, max_iter)
            iters += it
            if sep:
                beta = new_beta
                break
            new_kappa = _update_kappa(ft, p, p.X @ new_beta + p.offset, kappa)
            db = np.max(np.abs(new_beta - beta), initial=0.0)
            dk = abs(new_kappa - kappa)
            beta, kappa = new_beta, new_kappa
            if db < 1e-8 and dk < 1e-8:
                ft = fam.with_theta(np.exp(kappa))
                beta, ll, info, grad, it, conv, sep = _irls(ft, p, beta, tol, max_iter)
                iters += it
                break
        fam = fam.with_theta(np.exp(kappa))
        theta = float(np.exp(kappa))
        if not sep:
            beta, ll, info, grad, _, conv, sep = _irls(fam, p, beta, tol, 5)
    else:
        beta, ll, info, grad, iters, conv, sep = _irls(fam, p, beta, tol, max_iter)
    if fam.name != "gaussian" and np.max(np.abs(beta), initial=0.0) > SEPARATION_BOUND:
        sep = True
    if sep:
        conv = False
    try:
        vcov = linalg.inv(info)
        vcov = 0.5 * (vcov + vcov.T)
    except linalg.LinAlgError:
        vcov = np.full_like(info, np.nan)
    with np.errstate(invalid="ignore"):
        se = np.sqrt(np.diag(vcov))
    return GlmFit(p.names, beta, vcov, se, ll, theta, conv, iters, time.perf_counter() - t0,
                  fam.name, float(p.w.sum()), sep, float(np.max(np.abs(grad), initial=0.0)))
