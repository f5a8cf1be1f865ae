"""Exponential-family building blocks on the linear-predictor scale.

Every family is parameterised by its canonical link (logit, log, log,
identity); the negative binomial uses the log link, which is not canonical
for it.  All per-observation functions take the full linear predictor
``eta`` (offset already included) and return arrays of the same shape.

Derivatives are with respect to ``eta``.  ``d3`` is needed by the exact
gradient of the adaptive quadrature approximation in :mod:`tallmixed.glmm`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, expit, gammaln

BERNOULLI = "bernoulli"
POISSON = "poisson"
NEGATIVE_BINOMIAL = "negative_binomial"
GAUSSIAN = "gaussian"

# integer codes shared with the compiled kernel
FAMILY_CODES = {BERNOULLI: 0, POISSON: 1, NEGATIVE_BINOMIAL: 2, GAUSSIAN: 3}
LINKS = {BERNOULLI: "logit", POISSON: "log", NEGATIVE_BINOMIAL: "log", GAUSSIAN: "identity"}


@dataclass(frozen=True)
class Family:
    """A response distribution with its link.

    Parameters
    ----------
    name : str
        One of ``bernoulli``, ``poisson``, ``negative_binomial``, ``gaussian``.
    theta : float, optional
        Negative-binomial dispersion (variance ``mu + mu**2 / theta``).
    sigma2 : float, optional
        Gaussian residual variance.
    """

    name: str
    theta: float | None = None
    sigma2: float | None = None

    def __post_init__(self):
        if self.name not in FAMILY_CODES:
            raise ValueError(f"unknown family {self.name!r}")
        if self.name == NEGATIVE_BINOMIAL:
            if self.theta is None or not self.theta > 0:
                raise ValueError("negative_binomial requires theta > 0")
        if self.name == GAUSSIAN:
            if self.sigma2 is None or not self.sigma2 > 0:
                raise ValueError("gaussian requires sigma2 > 0")

    @classmethod
    def bernoulli(cls) -> Family:
        return cls(BERNOULLI)

    @classmethod
    def poisson(cls) -> Family:
        return cls(POISSON)

    @classmethod
    def negative_binomial(cls, theta: float = 1.0) -> Family:
        return cls(NEGATIVE_BINOMIAL, theta=float(theta))

    @classmethod
    def gaussian(cls, sigma2: float = 1.0) -> Family:
        return cls(GAUSSIAN, sigma2=float(sigma2))

    @property
    def link(self) -> str:
        return LINKS[self.name]

    @property
    def code(self) -> int:
        return FAMILY_CODES[self.name]

    @property
    def extra(self) -> float:
        """Scalar family parameter passed to the kernels (theta or sigma2)."""
        if self.name == NEGATIVE_BINOMIAL:
            return float(self.theta)
        if self.name == GAUSSIAN:
            return float(self.sigma2)
        return 0.0

    def with_theta(self, theta: float) -> Family:
        return Family(self.name, theta=float(theta), sigma2=self.sigma2)

    # ------------------------------------------------------------------ #
    # mean and link
    # ------------------------------------------------------------------ #

    def inverse_link(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.name == BERNOULLI:
            return expit(eta)
        if self.name == GAUSSIAN:
            return eta.copy()
        return np.exp(eta)

    def link_fun(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.name == BERNOULLI:
            return np.log(mu / (1.0 - mu))
        if self.name == GAUSSIAN:
            return mu.copy()
        return np.log(mu)

    def check_response(self, y: np.ndarray) -> None:
        if self.name == BERNOULLI and not np.all((y == 0) | (y == 1)):
            raise ValueError("bernoulli response must be 0/1")
        if self.name in (POISSON, NEGATIVE_BINOMIAL):
            if np.any(y < 0) or np.any(y != np.floor(y)):
                raise ValueError(f"{self.name} response must be non-negative integers")

    # ------------------------------------------------------------------ #
    # per-observation log-likelihood and eta-derivatives
    # ------------------------------------------------------------------ #

    def const(self, y):
        """Part of the log-density that does not depend on ``eta``."""
        y = np.asarray(y, dtype=float)
        if self.name == BERNOULLI:
            return np.zeros_like(y)
        if self.name == POISSON:
            return -gammaln(y + 1.0)
        if self.name == NEGATIVE_BINOMIAL:
            t = self.theta
            return gammaln(y + t) - gammaln(t) - gammaln(y + 1.0) + t * np.log(t)
        return np.full_like(y, -0.5 * np.log(2.0 * np.pi * self.sigma2))

    def loglik_obs(self, y, eta):
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        return self.const(y) + self._core(y, eta)

    def _core(self, y, eta):
        if self.name == BERNOULLI:
            return y * eta - np.logaddexp(0.0, eta)
        if self.name == POISSON:
            return y * eta - np.exp(eta)
        if self.name == NEGATIVE_BINOMIAL:
            t = self.theta
            return y * eta - (t + y) * np.logaddexp(np.log(t), eta)
        return -0.5 * (y - eta) ** 2 / self.sigma2

    def d1(self, y, eta):
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if self.name == BERNOULLI:
            return y - expit(eta)
        if self.name == POISSON:
            return y - np.exp(eta)
        if self.name == NEGATIVE_BINOMIAL:
            t = self.theta
            mu = np.exp(eta)
            return t * (y - mu) / (t + mu)
        return (y - eta) / self.sigma2

    def d2(self, y, eta):
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if self.name == BERNOULLI:
            p = expit(eta)
            return -p * (1.0 - p)
        if self.name == POISSON:
            return -np.exp(eta)
        if self.name == NEGATIVE_BINOMIAL:
            t = self.theta
            mu = np.exp(eta)
            return -(y + t) * t * mu / (t + mu) ** 2
        return np.full(np.broadcast(y, eta).shape, -1.0 / self.sigma2)

    def d3(self, y, eta):
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if self.name == BERNOULLI:
            p = expit(eta)
            return -p * (1.0 - p) * (1.0 - 2.0 * p)
        if self.name == POISSON:
            return -np.exp(eta)
        if self.name == NEGATIVE_BINOMIAL:
            t = self.theta
            mu = np.exp(eta)
            return -(y + t) * t * mu * (t - mu) / (t + mu) ** 3
        return np.zeros(np.broadcast(y, eta).shape)

    def info_weight(self, eta):
        """Expected information per unit weight, ``(dmu/deta)**2 / Var(y)``."""
        eta = np.asarray(eta, dtype=float)
        if self.name == BERNOULLI:
            p = expit(eta)
            return p * (1.0 - p)
        if self.name == POISSON:
            return np.exp(eta)
        if self.name == NEGATIVE_BINOMIAL:
            mu = np.exp(eta)
            return self.theta * mu / (self.theta + mu)
        return np.full(eta.shape, 1.0 / self.sigma2)

    # ------------------------------------------------------------------ #
    # negative-binomial derivatives in kappa = log(theta)
    # ------------------------------------------------------------------ #

    def theta_const(self, y):
        """``digamma(y + theta) - digamma(theta) + log(theta) + 1``, eta-free."""
        t = self.theta
        y = np.asarray(y, dtype=float)
        return digamma(y + t) - digamma(t) + np.log(t) + 1.0

    def dkappa(self, y, eta):
        """d loglik / d log(theta)."""
        t = self.theta
        y = np.asarray(y, dtype=float)
        mu = np.exp(eta)
        return t * (self.theta_const(y) - np.logaddexp(np.log(t), eta) - (t + y) / (t + mu))

    def d1_kappa(self, y, eta):
        t = self.theta
        mu = np.exp(eta)
        return t * (y - mu) * mu / (t + mu) ** 2

    def d2_kappa(self, y, eta):
        t = self.theta
        mu = np.exp(eta)
        return -t * mu * (2.0 * t * mu + y * (mu - t)) / (t + mu) ** 3


def parse_family(text: str) -> Family:
    """Parse ``bernoulli``, ``poisson``, ``negative_binomial[:theta]``, ``gaussian[:sigma2]``."""
    name, _, arg = text.strip().partition(":")
    aliases = {"binomial": BERNOULLI, "logistic": BERNOULLI, "negbin": NEGATIVE_BINOMIAL,
               "nb": NEGATIVE_BINOMIAL, "normal": GAUSSIAN}
    name = aliases.get(name, name)
    if name == NEGATIVE_BINOMIAL:
        return Family.negative_binomial(float(arg) if arg else 1.0)
    if name == GAUSSIAN:
        return Family.gaussian(float(arg) if arg else 1.0)
    return Family(name)
