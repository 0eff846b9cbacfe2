"""Reparameterised samplers and KL divergences.

Gaussian (location-scale), Kumaraswamy (inverse CDF, as a Beta surrogate) and
binary Concrete (relaxed Bernoulli). Scales are always softplus of an
unconstrained raw parameter. All samplers are deterministic functions of
(params, noise); noise is drawn by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ibpcl import autodiff as ad
from ibpcl import special
from ibpcl.autodiff import Tensor

U_EPS = 1e-8
KUMA_SERIES_TERMS = 11


def clamp_uniform(u):
    return np.clip(np.asarray(u, dtype=np.float64), U_EPS, 1.0 - U_EPS)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class GaussianParams:
    mu: Tensor
    raw_sigma: Tensor

    @property
    def sigma(self) -> Tensor:
        return ad.softplus(self.raw_sigma)


@dataclass
class KumaraswamyParams:
    raw_a: Tensor
    raw_b: Tensor

    @property
    def a(self) -> Tensor:
        return ad.softplus(self.raw_a)

    @property
    def b(self) -> Tensor:
        return ad.softplus(self.raw_b)


@dataclass
class ConcreteParams:
    logits: Tensor
    temperature: float

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


# --- Gaussian ---------------------------------------------------------------------

def gaussian_sample(p: GaussianParams, eps) -> Tensor:
    mu = ad.as_tensor(p.mu)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mu.shape:
        raise ad.ShapeError("gaussian_sample", mu.shape, eps.shape)
    return mu + p.sigma * ad.constant(eps)


def gaussian_kl(q: GaussianParams, p_mean, p_var) -> Tensor:
    """KL(q || N(p_mean, p_var)) summed over all elements."""
    p_mean = np.asarray(p_mean, dtype=np.float64)
    p_var = np.asarray(p_var, dtype=np.float64)
    mu = ad.as_tensor(q.mu)
    if p_mean.shape != mu.shape or p_var.shape != mu.shape:
        raise ad.ShapeError("gaussian_kl", mu.shape, p_mean.shape, p_var.shape)
    if np.any(p_var <= 0):
        raise ValueError("gaussian_kl: prior variance must be positive")
    sigma = q.sigma
    diff = mu - ad.constant(p_mean)
    terms = (0.5 * np.log(p_var)) - ad.log(sigma) + (sigma * sigma + diff * diff) / ad.constant(2.0 * p_var) - 0.5
    return ad.sum(terms)


def gaussian_kl_np(mu, sigma, p_mean, p_var) -> float:
    return float(np.sum(0.5 * np.log(p_var) - np.log(sigma)
                        + (sigma ** 2 + (mu - p_mean) ** 2) / (2 * p_var) - 0.5))


# --- Kumaraswamy ------------------------------------------------------------------

def kumaraswamy_log_sample(p: KumaraswamyParams, u) -> Tensor:
    """log nu for nu = (1 - u^(1/b))^(1/a), computed in log space."""
    u = clamp_uniform(u)
    if u.shape != ad.as_tensor(p.raw_a).shape:
        raise ad.ShapeError("kumaraswamy_sample", ad.as_tensor(p.raw_a).shape, u.shape)
    log_u_pow = ad.constant(np.log(u)) / p.b
    return ad.log1mexp(log_u_pow) / p.a


def kumaraswamy_sample(p: KumaraswamyParams, u) -> Tensor:
    return ad.exp(kumaraswamy_log_sample(p, u))


def kumaraswamy_mean(a, b):
    """E[nu] = b * B(1 + 1/a, b), numpy only."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return b * np.exp(special.betaln(1.0 + 1.0 / a, b))


def kumaraswamy_beta_kl(q: KumaraswamyParams, prior_alpha: float, prior_beta: float,
                        terms: int = KUMA_SERIES_TERMS) -> Tensor:
    """KL(Kumaraswamy(a, b) || Beta(alpha, beta)) summed over sticks.

    The infinite series is truncated after ``terms`` terms; it vanishes when
    ``prior_beta == 1``.
    """
    if not (prior_alpha > 0 and prior_beta > 0):
        raise ValueError("kumaraswamy_beta_kl: prior parameters must be positive")
    a, b = q.a, q.b
    if np.any(a.data <= 0) or np.any(b.data <= 0):
        raise ValueError("kumaraswamy_beta_kl: posterior parameters must be positive")
    log_beta_prior = float(special.betaln(prior_alpha, prior_beta))
    kl = ((a - prior_alpha) / a) * (-special.EULER_GAMMA - ad.digamma(b) - 1.0 / b)
    kl = kl + ad.log(a * b) + log_beta_prior - (b - 1.0) / b
    if prior_beta != 1.0:
        ab = a * b
        lg_b = ad.lgamma(b)
        series = None
        for m in range(1, terms + 1):
            m_over_a = float(m) / a
            log_beta_m = ad.lgamma(m_over_a) + lg_b - ad.lgamma(m_over_a + b)
            term = ad.exp(log_beta_m) / (ab + float(m))
            series = term if series is None else series + term
        kl = kl + (prior_beta - 1.0) * b * series
    return ad.sum(kl)


def kumaraswamy_log_pdf(x, a, b):
    x = np.asarray(x, dtype=np.float64)
    return np.log(a) + np.log(b) + (a - 1) * np.log(x) + (b - 1) * np.log1p(-x ** a)


# --- binary Concrete -----------------------------------------------------------------

def concrete_presigmoid(logit_alpha, temperature: float, u) -> Tensor:
    """Y = (log alpha + logit(u)) / temperature."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    logit_alpha = ad.as_tensor(logit_alpha)
    u = clamp_uniform(u)
    if u.shape != logit_alpha.shape:
        raise ad.ShapeError("concrete_sample", logit_alpha.shape, u.shape)
    return (logit_alpha + ad.constant(special.logit(u))) * (1.0 / temperature)


def concrete_sample(logit_alpha, temperature: float, u) -> Tensor:
    return ad.sigmoid(concrete_presigmoid(logit_alpha, temperature, u))


def concrete_log_density(y, logit_alpha, temperature: float) -> Tensor:
    """Elementwise log density of the pre-sigmoid variable Y."""
    y = ad.as_tensor(y)
    logit_alpha = ad.as_tensor(logit_alpha)
    s = logit_alpha - y * temperature
    return (np.log(temperature) + s) - 2.0 * ad.softplus(s)


def concrete_kl_mc(y, q_logits, p_logits, temperature: float) -> Tensor:
    """Single-sample estimate of KL(q || p) between binary Concrete densities, summed."""
    return ad.sum(concrete_log_density(y, q_logits, temperature)
                  - concrete_log_density(y, p_logits, temperature))


def bernoulli_kl(q: float, p: float) -> float:
    return q * np.log(q / p) + (1 - q) * np.log((1 - q) / (1 - p))
