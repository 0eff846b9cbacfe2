"""IBP-masked layers: W = B * V with a truncated stick-breaking prior on B.

Each hidden layer carries a Gaussian posterior over V (and its bias), a
Kumaraswamy posterior over the K sticks, and mask logits rho so that
``P(B[d, k] = 1 | nu) = sigmoid(rho[d, k] + logit(pi_k))``.
"""

from __future__ import annotations

import numpy as np

from ibpcl import autodiff as ad
from ibpcl import dist
from ibpcl import special
from ibpcl.autodiff import Tensor

LOG_NU_MIN = np.log(dist.U_EPS)
LOG_NU_MAX = np.log1p(-dist.U_EPS)
HARD_THRESHOLD = 0.5


class Noise:
    """Per-purpose noise streams: masks/sticks draw uniforms, weights draw normals."""

    def __init__(self, mask_rng: np.random.Generator, weight_rng: np.random.Generator):
        self.mask_rng = mask_rng
        self.weight_rng = weight_rng

    def uniform(self, shape) -> np.ndarray:
        return self.mask_rng.random(shape)

    def normal(self, shape) -> np.ndarray:
        return self.weight_rng.standard_normal(shape)


class FrozenNoise(Noise):
    """Records draws on the first pass; after :meth:`rewind` replays them in order."""

    def __init__(self, mask_rng, weight_rng):
        super().__init__(mask_rng, weight_rng)
        self._tape: list[np.ndarray] = []
        self._pos = None

    def rewind(self):
        self._pos = 0

    def _draw(self, kind, shape):
        if self._pos is None:
            arr = super().uniform(shape) if kind == "u" else super().normal(shape)
            self._tape.append(arr)
            return arr
        arr = self._tape[self._pos]
        self._pos += 1
        if arr.shape != tuple(np.atleast_1d(shape)) and arr.shape != shape:
            raise RuntimeError("FrozenNoise replay out of sync")
        return arr

    def uniform(self, shape):
        return self._draw("u", shape)

    def normal(self, shape):
        return self._draw("n", shape)


class MeanNoise(Noise):
    """Zero-variance noise: Gaussians sit at their means, uniforms at the median."""

    def __init__(self):
        super().__init__(None, None)

    def uniform(self, shape):
        return np.full(shape, 0.5)

    def normal(self, shape):
        return np.zeros(shape)


# --- stick breaking ------------------------------------------------------------

def stick_pis(nu) -> np.ndarray:
    """pi_k = prod_{i<=k} nu_i, accumulated in log space."""
    nu = np.clip(np.asarray(nu, dtype=np.float64), dist.U_EPS, 1.0 - dist.U_EPS)
    return np.exp(np.cumsum(np.log(nu)))


def stick_logit_pis(log_nu: Tensor) -> Tensor:
    log_nu = ad.clip(log_nu, LOG_NU_MIN, LOG_NU_MAX)
    log_pi = ad.cumsum(log_nu)
    return log_pi - ad.log1mexp(log_pi)


def harden(soft) -> np.ndarray:
    """Binary mask 1[soft > 0.5]; a tie at exactly 0.5 maps to 0."""
    return (np.asarray(soft) > HARD_THRESHOLD).astype(np.float64)


def union_masks(masks) -> np.ndarray:
    """Elementwise OR; narrower masks are zero-padded to the widest shape."""
    masks = [np.asarray(m) for m in masks]
    if not masks:
        raise ValueError("union_masks needs at least one mask")
    rows = max(m.shape[0] for m in masks)
    cols = max(m.shape[1] for m in masks)
    out = np.zeros((rows, cols))
    for m in masks:
        out[:m.shape[0], :m.shape[1]] = np.maximum(out[:m.shape[0], :m.shape[1]], m)
    return out


def pad_mask(mask, shape) -> np.ndarray:
    out = np.zeros(shape)
    out[:mask.shape[0], :mask.shape[1]] = mask
    return out


def empty_tail_count(mask) -> int:
    """Number of trailing all-zero columns: sum_j C_j with C_{K+1} = 1."""
    mask = np.asarray(mask)
    K = mask.shape[1]
    c_next = 1.0
    total = 0.0
    for j in range(K - 1, -1, -1):
        c_next = c_next * float(np.all(mask[:, j] == 0))
        total += c_next
    return int(total)


def expansion_size(mask, reserve: int) -> int:
    """G = reserve - sum_j C_j, clamped at 0 (layers never shrink)."""
    return max(0, int(reserve) - empty_tail_count(mask))


# --- layers ----------------------------------------------------------------------

class GaussianLayer:
    """Dense layer with a mean-field Gaussian posterior over weights and bias."""

    kind = "gaussian"

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 init_sigma: float = 0.01, init_std: float = 0.1):
        self.name = name
        self.init_sigma = init_sigma
        self.init_std = init_std
        self.params = {
            "mu": rng.normal(0.0, init_std, (d_in, d_out)),
            "raw_sigma": np.full((d_in, d_out), float(dist.softplus_inv(init_sigma))),
            "bias_mu": np.zeros(d_out),
            "bias_raw_sigma": np.full(d_out, float(dist.softplus_inv(init_sigma))),
        }

    @property
    def d_in(self) -> int:
        return self.params["mu"].shape[0]

    @property
    def d_out(self) -> int:
        return self.params["mu"].shape[1]

    def named_params(self):
        return {f"{self.name}.{k}": v for k, v in self.params.items()}

    def gaussian_names(self):
        return list(self.named_params())

    def forward(self, x: Tensor, p: dict, noise: Noise, deterministic: bool = False) -> Tensor:
        n = x.shape[0]
        if deterministic:
            W, b = p["mu"], p["bias_mu"]
        else:
            W = dist.gaussian_sample(dist.GaussianParams(p["mu"], p["raw_sigma"]), noise.normal(p["mu"].shape))
            b = dist.gaussian_sample(dist.GaussianParams(p["bias_mu"], p["bias_raw_sigma"]),
                                     noise.normal(p["bias_mu"].shape))
        return x @ W + ad.repeat_rows(b, n)

    def kl(self, p: dict, prior: dict) -> Tensor:
        return (dist.gaussian_kl(dist.GaussianParams(p["mu"], p["raw_sigma"]), prior["mu"], prior["var"])
                + dist.gaussian_kl(dist.GaussianParams(p["bias_mu"], p["bias_raw_sigma"]),
                                   prior["bias_mu"], prior["bias_var"]))

    def add_input_rows(self, n: int, rng: np.random.Generator):
        d_out = self.d_out
        self.params["mu"] = np.vstack([self.params["mu"], rng.normal(0.0, self.init_std, (n, d_out))])
        self.params["raw_sigma"] = np.vstack([
            self.params["raw_sigma"], np.full((n, d_out), float(dist.softplus_inv(self.init_sigma)))])


class IbpLayer(GaussianLayer):
    """Hidden layer with W = B * V; B has a truncated stick-breaking IBP prior."""

    kind = "ibp"
    STRUCTURE = ("raw_a", "raw_b", "rho")

    def __init__(self, name: str, d_in: int, k: int, alpha: float, rng: np.random.Generator,
                 init_sigma: float = 0.01, init_std: float = 0.1):
        if k <= 0:
            raise ValueError("truncation K must be positive")
        super().__init__(name, d_in, k, rng, init_sigma=init_sigma, init_std=init_std)
        self.alpha = float(alpha)
        self.params["raw_a"] = np.full(k, float(dist.softplus_inv(alpha)))
        self.params["raw_b"] = np.full(k, float(dist.softplus_inv(1.0)))
        self.params["rho"] = np.zeros((d_in, k))

    @property
    def K(self) -> int:
        return self.d_out

    def gaussian_names(self):
        return [f"{self.name}.{k}" for k in ("mu", "raw_sigma", "bias_mu", "bias_raw_sigma")]

    def structure_names(self):
        return [f"{self.name}.{k}" for k in self.STRUCTURE]

    def stick_ab(self):
        return np.logaddexp(0.0, self.params["raw_a"]), np.logaddexp(0.0, self.params["raw_b"])

    def posterior_theta(self) -> np.ndarray:
        """Mask probabilities theta at the posterior-mean sticks."""
        a, b = self.stick_ab()
        pi = stick_pis(dist.kumaraswamy_mean(a, b))
        return special.expit(self.params["rho"] + special.logit(pi)[None, :])

    def hard_mask(self) -> np.ndarray:
        # noise-free soft sample (u = 1/2) at the posterior-mean sticks, then threshold
        return harden(self.posterior_theta())

    def sample_hard_mask(self, rng: np.random.Generator, temperature: float) -> np.ndarray:
        a, b = self.stick_ab()
        u = dist.clamp_uniform(rng.random(self.K))
        nu = (1.0 - u ** (1.0 / b)) ** (1.0 / a)
        logits = self.params["rho"] + special.logit(stick_pis(nu))[None, :]
        y = (logits + special.logit(dist.clamp_uniform(rng.random(logits.shape)))) / temperature
        return harden(special.expit(y))

    def stochastic_forward(self, x: Tensor, p: dict, noise: Noise, temperature: float):
        """Returns (activation pre-nonlinearity, mask-KL sample, soft mask)."""
        if x.data.ndim != 2 or x.shape[1] != self.d_in:
            raise ad.ShapeError(f"{self.name}.forward", x.shape, p["mu"].shape)
        D, K = p["mu"].shape
        log_nu = dist.kumaraswamy_log_sample(dist.KumaraswamyParams(p["raw_a"], p["raw_b"]), noise.uniform(K))
        prior_logits = ad.repeat_rows(stick_logit_pis(log_nu), D)
        q_logits = p["rho"] + prior_logits
        y = dist.concrete_presigmoid(q_logits, temperature, noise.uniform((D, K)))
        soft = ad.sigmoid(y)
        kl_mask = dist.concrete_kl_mc(y, q_logits, prior_logits, temperature)
        act = self._masked_affine(x, p, soft, ad.colmax(soft), noise, deterministic=False)
        return act, kl_mask, soft

    def frozen_forward(self, x: Tensor, p: dict, mask: np.ndarray, noise: Noise, deterministic: bool = False):
        if x.data.ndim != 2 or x.shape[1] != self.d_in:
            raise ad.ShapeError(f"{self.name}.forward", x.shape, p["mu"].shape)
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != p["mu"].shape:
            raise ad.ShapeError(f"{self.name}.frozen_forward", mask.shape, p["mu"].shape)
        col_on = mask.max(axis=0) if mask.shape[0] else np.zeros(mask.shape[1])
        return self._masked_affine(x, p, ad.constant(mask), ad.constant(col_on), noise, deterministic)

    def _masked_affine(self, x, p, mask: Tensor, col_scale: Tensor, noise: Noise, deterministic: bool):
        if deterministic:
            V, b = p["mu"], p["bias_mu"]
        else:
            V = dist.gaussian_sample(dist.GaussianParams(p["mu"], p["raw_sigma"]), noise.normal(p["mu"].shape))
            b = dist.gaussian_sample(dist.GaussianParams(p["bias_mu"], p["bias_raw_sigma"]),
                                     noise.normal(p["bias_mu"].shape))
        return x @ (mask * V) + ad.repeat_rows(b * col_scale, x.shape[0])

    def stick_kl(self, p: dict, prior_alpha: float) -> Tensor:
        return dist.kumaraswamy_beta_kl(dist.KumaraswamyParams(p["raw_a"], p["raw_b"]), prior_alpha, 1.0)

    def expand(self, mask, reserve: int, rng: np.random.Generator) -> int:
        """Append fresh columns so that ``reserve`` trailing empty columns remain."""
        mask = np.asarray(mask)
        if mask.shape != self.params["mu"].shape:
            raise ad.ShapeError(f"{self.name}.expand", mask.shape, self.params["mu"].shape)
        g = expansion_size(mask, reserve)
        if g > 0:
            self.add_columns(g, rng)
        return g

    def add_columns(self, g: int, rng: np.random.Generator):
        D = self.d_in
        raw_sigma0 = float(dist.softplus_inv(self.init_sigma))
        P = self.params
        P["mu"] = np.hstack([P["mu"], rng.normal(0.0, self.init_std, (D, g))])
        P["raw_sigma"] = np.hstack([P["raw_sigma"], np.full((D, g), raw_sigma0)])
        P["bias_mu"] = np.concatenate([P["bias_mu"], np.zeros(g)])
        P["bias_raw_sigma"] = np.concatenate([P["bias_raw_sigma"], np.full(g, raw_sigma0)])
        P["raw_a"] = np.concatenate([P["raw_a"], np.full(g, float(dist.softplus_inv(self.alpha)))])
        P["raw_b"] = np.concatenate([P["raw_b"], np.full(g, float(dist.softplus_inv(1.0)))])
        P["rho"] = np.hstack([P["rho"], np.zeros((D, g))])

    def add_input_rows(self, n: int, rng: np.random.Generator):
        super().add_input_rows(n, rng)
        self.params["rho"] = np.vstack([self.params["rho"], np.zeros((n, self.K))])

    def reset_mask_logits(self):
        self.params["rho"] = np.zeros_like(self.params["rho"])


def layer_forward(x: Tensor, layer: IbpLayer, p: dict, noise: Noise, temperature: float = 1.0,
                  mask: np.ndarray | None = None, deterministic: bool = False):
    """Stochastic forward when ``mask`` is None, else frozen-mask forward."""
    if mask is None:
        act, _, _ = layer.stochastic_forward(x, p, noise, temperature)
        return act
    return layer.frozen_forward(x, p, mask, noise, deterministic)
