"""Finite-difference checks of the autodiff primitives, the samplers and the two ELBOs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ibpcl import autodiff as ad
from ibpcl import dist, net
from ibpcl.ibp import FrozenNoise

PRIMITIVE_TOL = 1e-4
ELBO_TOL = 1e-3
# FD noise on a loss of magnitude ~1e2 is ~1e-9; entries below this are compared absolutely
ELBO_FLOOR = 1e-6


@dataclass
class Check:
    suite: str
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _check(fn: Callable[..., ad.Tensor], inputs: list[np.ndarray], h=1e-6, floor=1e-8) -> float:
    """Max relative error between reverse-mode and central-difference gradients of sum(w * fn)."""
    rng = np.random.default_rng(len(inputs))
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    out_shape = fn(*[ad.constant(x) for x in inputs]).shape
    w = rng.uniform(0.5, 1.5, out_shape)

    def scalar(*ts):
        out = fn(*ts)
        return ad.sum(out * w) if out.shape else out * float(w)

    leaves = [ad.Tensor(x.copy(), requires_grad=True) for x in inputs]
    grads = ad.grad(scalar(*leaves), leaves)
    worst = 0.0
    for i, x in enumerate(inputs):
        num = ad.numeric_grad(lambda: scalar(*[ad.constant(v) for v in inputs]).item(), x, h)
        worst = max(worst, ad.relative_error(grads[i], num, floor))
    return worst


def _primitive_cases(rng):
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    sym = lambda *s: rng.uniform(-2.0, 2.0, s)  # noqa: E731
    away = lambda *s: np.sign(sym(*s)) * rng.uniform(0.2, 2.0, s)  # noqa: E731
    distinct = np.arange(12.0).reshape(3, 4)
    distinct = rng.permuted(distinct, axis=0) / 4.0
    a, b = sym(3, 4), sym(3, 4)
    b = np.where(np.abs(a - b) < 0.1, b + 0.3, b)
    targets = rng.uniform(0, 1, (3, 4))
    return [
        ("add", lambda x, y: x + y, [sym(3, 4), sym(3, 4)]),
        ("sub", lambda x, y: x - y, [sym(3, 4), sym(3, 4)]),
        ("mul", lambda x, y: x * y, [sym(3, 4), sym(3, 4)]),
        ("div", lambda x, y: x / y, [sym(3, 4), pos(3, 4)]),
        ("scalar-broadcast", lambda x, y: x * y + y, [sym(3, 4), sym()]),
        ("maximum", ad.maximum, [a, b]),
        ("minimum", ad.minimum, [a, b]),
        ("matmul", lambda x, y: x @ y, [sym(3, 4), sym(4, 2)]),
        ("neg", lambda x: -x, [sym(5)]),
        ("power", lambda x: x ** 3.0, [pos(5)]),
        ("exp", ad.exp, [sym(5)]),
        ("log", ad.log, [pos(5)]),
        ("sigmoid", ad.sigmoid, [sym(5)]),
        ("softplus", ad.softplus, [sym(5)]),
        ("log_sigmoid", ad.log_sigmoid, [sym(5)]),
        ("relu", ad.relu, [away(5)]),
        ("log1mexp", ad.log1mexp, [-pos(5)]),
        ("clip", lambda x: ad.clip(x, -1.0, 1.0), [np.array([-1.7, -0.5, 0.3, 0.9, 1.6])]),
        ("lgamma", ad.lgamma, [pos(5)]),
        ("digamma", ad.digamma, [pos(5)]),
        ("sum-axis0", lambda x: ad.sum(x, axis=0), [sym(3, 4)]),
        ("sum-axis1", lambda x: ad.sum(x, axis=1), [sym(3, 4)]),
        ("mean", ad.mean, [sym(3, 4)]),
        ("cumsum", ad.cumsum, [sym(6)]),
        ("reshape", lambda x: ad.reshape(x, (4, 3)), [sym(3, 4)]),
        ("transpose", ad.transpose, [sym(3, 4)]),
        ("repeat_rows", lambda x: ad.repeat_rows(x, 3), [sym(4)]),
        ("colmax", ad.colmax, [distinct]),
        ("concat", lambda x, y: ad.concat([x, y], axis=1), [sym(3, 2), sym(3, 4)]),
        ("categorical_loglik", lambda x: ad.categorical_loglik(x, np.array([0, 2, 1])), [sym(3, 4)]),
        ("bernoulli_loglik", lambda x: ad.bernoulli_loglik(x, targets), [sym(3, 4)]),
    ]


def _sampler_cases(rng):
    u = rng.uniform(0.05, 0.95, 4)
    u2 = rng.uniform(0.05, 0.95, (2, 3))
    eps = rng.standard_normal((2, 3))
    pm, pv = rng.standard_normal((2, 3)), rng.uniform(0.2, 1.0, (2, 3))
    return [
        ("gaussian_sample", lambda m, r: dist.gaussian_sample(dist.GaussianParams(m, r), eps),
         [rng.standard_normal((2, 3)), rng.uniform(-2, 0, (2, 3))]),
        ("gaussian_kl", lambda m, r: dist.gaussian_kl(dist.GaussianParams(m, r), pm, pv),
         [rng.standard_normal((2, 3)), rng.uniform(-2, 0, (2, 3))]),
        ("kumaraswamy_log_sample", lambda ra, rb: dist.kumaraswamy_log_sample(dist.KumaraswamyParams(ra, rb), u),
         [rng.uniform(0, 2, 4), rng.uniform(-1, 1, 4)]),
        ("kumaraswamy_beta_kl(beta=1)",
         lambda ra, rb: dist.kumaraswamy_beta_kl(dist.KumaraswamyParams(ra, rb), 3.0, 1.0),
         [rng.uniform(0, 2, 4), rng.uniform(-1, 1, 4)]),
        ("kumaraswamy_beta_kl(beta=2)",
         lambda ra, rb: dist.kumaraswamy_beta_kl(dist.KumaraswamyParams(ra, rb), 3.0, 2.0),
         [rng.uniform(0, 2, 4), rng.uniform(-1, 1, 4)]),
        ("concrete_presigmoid", lambda la: dist.concrete_presigmoid(la, 0.7, u2), [rng.standard_normal((2, 3))]),
        ("concrete_log_density", lambda y, la: dist.concrete_log_density(y, la, 0.7),
         [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]),
    ]


def primitive_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = [Check("primitives", name, _check(fn, xs), PRIMITIVE_TOL) for name, fn, xs in _primitive_cases(rng)]
    out += [Check("samplers", name, _check(fn, xs), PRIMITIVE_TOL) for name, fn, xs in _sampler_cases(rng)]
    return out


def _elbo_check(model, loss_fn, suite: str, seed: int) -> list[Check]:
    """Gradient of a frozen-noise ELBO w.r.t. every trainable parameter array."""
    noise = FrozenNoise(np.random.default_rng(seed + 1), np.random.default_rng(seed + 2))
    params = model.named_params(0)
    names = sorted(params)
    binding = model.bind(0, names)
    loss = loss_fn(binding, noise)
    ad.backward(loss)
    analytic = binding.grads()

    def f():
        noise.rewind()
        return loss_fn(model.bind(0), noise).item()

    checks = []
    for name in names:
        num = ad.numeric_grad(f, params[name], h=1e-6)
        checks.append(Check(suite, name, ad.relative_error(analytic[name], num, ELBO_FLOOR), ELBO_TOL))
    return checks


class _Priors:
    def __init__(self, model, rng):
        self.gaussian, self.alpha = {}, {}
        for layer in model.all_layers():
            shape_w, shape_b = layer.params["mu"].shape, layer.params["bias_mu"].shape
            self.gaussian[layer.name] = {"mu": 0.1 * rng.standard_normal(shape_w),
                                         "var": rng.uniform(0.2, 0.5, shape_w),
                                         "bias_mu": np.zeros(shape_b), "bias_var": np.full(shape_b, 0.36)}
        for layer in model.ibp_layers:
            self.alpha[layer.name] = 4.0


def _randomise(model, rng):
    for layer in model.all_layers():
        p = layer.params
        p["mu"] = rng.normal(0, 0.8, p["mu"].shape)
        p["raw_sigma"] = rng.uniform(-3, -1, p["raw_sigma"].shape)
        p["bias_mu"] = rng.normal(0, 0.5, p["bias_mu"].shape)
        p["bias_raw_sigma"] = rng.uniform(-3, -1, p["bias_raw_sigma"].shape)
        if "rho" in p:
            p["rho"] = rng.normal(0, 1, p["rho"].shape)
            p["raw_a"] = rng.uniform(0.5, 2.0, p["raw_a"].shape)
            p["raw_b"] = rng.uniform(-0.5, 1.0, p["raw_b"].shape)


def supervised_elbo_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    model = net.SupervisedModel(2, [3], 4.0, rng)
    model.add_head(0, 2, rng)
    _randomise(model, rng)
    priors = _Priors(model, rng)
    X = rng.uniform(0, 1, (5, 2))
    y = np.array([0, 1, 1, 0, 1])

    def loss(binding, noise):
        return net.supervised_elbo(model, binding, X, y, 0, priors, S=2, temperature=0.8, n_data=20, noise=noise)

    return _elbo_check(model, loss, "supervised-elbo", seed)


def vae_elbo_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    model = net.VaeModel(4, [3], 2, 4.0, rng)
    model.add_head(0, None, rng)
    _randomise(model, rng)
    priors = _Priors(model, rng)
    X = rng.uniform(0, 1, (3, 4))

    def loss(binding, noise):
        return net.vae_elbo(model, binding, X, 0, priors, S=2, temperature=0.8, n_data=9, noise=noise)

    return _elbo_check(model, loss, "vae-elbo", seed)


def run_all(seed: int = 0) -> list[Check]:
    return primitive_checks(seed) + supervised_elbo_checks(seed) + vae_elbo_checks(seed)


def summarize(checks: list[Check]) -> dict[str, tuple[float, float]]:
    """Per suite: (max relative error, tolerance)."""
    out = {}
    for c in checks:
        err, _ = out.get(c.suite, (0.0, c.tol))
        out[c.suite] = (max(err, c.error), c.tol)
    return out
