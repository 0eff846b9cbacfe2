"""Supervised multi-head IBP networks and IBP VAEs, with their ELBOs."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from ibpcl import autodiff as ad
from ibpcl import special
from ibpcl.autodiff import Tensor
from ibpcl.ibp import GaussianLayer, IbpLayer, MeanNoise, Noise


class Binding:
    """Leaf tensors for one graph build; names outside ``trainable`` are constants."""

    def __init__(self, named: dict, trainable: Iterable[str] = ()):
        trainable = set(trainable)
        self.trainable = trainable
        self.leaves = {n: Tensor(a, requires_grad=n in trainable) for n, a in named.items()}

    def layer(self, layer) -> dict:
        prefix = layer.name + "."
        return {n[len(prefix):]: t for n, t in self.leaves.items() if n.startswith(prefix)}

    def grads(self) -> dict:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self.leaves.items() if n in self.trainable}


def _check_task(model, task):
    if task not in model.heads:
        raise KeyError(f"unknown task id {task!r}")


class SupervisedModel:
    """Shared IBP-masked trunk with one Gaussian output head per task."""

    def __init__(self, d_in: int, hidden: list[int], alpha: float, rng: np.random.Generator,
                 init_sigma: float = 0.01, init_std: float = 0.1):
        self.init_sigma = init_sigma
        self.init_std = init_std
        self.hidden = []
        width = d_in
        for i, k in enumerate(hidden):
            self.hidden.append(IbpLayer(f"hidden.{i}", width, k, alpha, rng, init_sigma, init_std))
            width = k
        self.heads: dict[int, GaussianLayer] = {}

    @property
    def ibp_layers(self) -> list[IbpLayer]:
        return self.hidden

    def add_head(self, task: int, n_classes: int, rng: np.random.Generator) -> GaussianLayer:
        head = GaussianLayer(f"head.{task}", self.hidden[-1].K, n_classes, rng, self.init_sigma, self.init_std)
        self.heads[task] = head
        return head

    def task_layers(self, task: int) -> list:
        return [*self.hidden, self.heads[task]]

    def all_layers(self) -> list:
        return [*self.hidden, *self.heads.values()]

    def named_params(self, task: int | None = None) -> dict:
        layers = self.all_layers() if task is None else self.task_layers(task)
        out = {}
        for layer in layers:
            out.update(layer.named_params())
        return out

    def bind(self, task: int, trainable: Iterable[str] = ()) -> Binding:
        return Binding(self.named_params(task), trainable)

    def successor_of(self, layer):
        """Layers whose input width follows ``layer``'s output width."""
        i = self.hidden.index(layer)
        if i + 1 < len(self.hidden):
            return [self.hidden[i + 1]]
        return list(self.heads.values())


def _trunk(model_layers, h: Tensor, binding: Binding, noise: Noise, temperature: float,
           masks, deterministic: bool):
    """Run IBP layers with relu. Returns (h, summed mask-KL sample or None)."""
    kl_mask = None
    for i, layer in enumerate(model_layers):
        p = binding.layer(layer)
        if masks is None:
            act, klm, _ = layer.stochastic_forward(h, p, noise, temperature)
            kl_mask = klm if kl_mask is None else kl_mask + klm
        else:
            act = layer.frozen_forward(h, p, masks[i], noise, deterministic)
        h = ad.relu(act)
    return h, kl_mask


def gaussian_kl_terms(layers, binding: Binding, priors) -> Tensor:
    total = None
    for layer in layers:
        kl = layer.kl(binding.layer(layer), priors.gaussian[layer.name])
        total = kl if total is None else total + kl
    return total


def stick_kl_terms(layers, binding: Binding, priors) -> Tensor:
    total = None
    for layer in layers:
        kl = layer.stick_kl(binding.layer(layer), priors.alpha[layer.name])
        total = kl if total is None else total + kl
    return total


def supervised_elbo(model: SupervisedModel, binding: Binding, X, y, task: int, priors, S: int,
                    temperature: float, n_data: int, noise: Noise, masks=None,
                    likelihood_only: bool = False, deterministic: bool = False) -> Tensor:
    """Negative ELBO (the minimisation target) for one minibatch.

    ``masks=None`` samples relaxed masks and includes the mask and stick KLs;
    a list of binary masks freezes the structure and drops both. With
    ``likelihood_only`` every KL is dropped (maximum-likelihood training).
    """
    _check_task(model, task)
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if S < 1:
        raise ValueError("S must be >= 1")
    scale = n_data / X.shape[0]
    head = model.heads[task]
    x = ad.constant(X)
    per_sample = None
    for _ in range(S):
        h, kl_mask = _trunk(model.hidden, x, binding, noise, temperature, masks, deterministic)
        logits = head.forward(h, binding.layer(head), noise, deterministic)
        term = ad.categorical_loglik(logits, y) * scale
        if kl_mask is not None and not likelihood_only:
            term = term - kl_mask
        per_sample = term if per_sample is None else per_sample + term
    elbo = per_sample * (1.0 / S)
    if not likelihood_only:
        elbo = elbo - gaussian_kl_terms(model.task_layers(task), binding, priors)
        if masks is None:
            elbo = elbo - stick_kl_terms(model.hidden, binding, priors)
    return -elbo


def predict(model: SupervisedModel, X, task: int, masks, S_test: int = 100,
            rng: np.random.Generator | None = None, deterministic: bool = False) -> np.ndarray:
    """Class probabilities averaged over weight samples under frozen binary masks."""
    _check_task(model, task)
    binding = model.bind(task)
    noise = MeanNoise() if deterministic or rng is None else Noise(rng, rng)
    n_samples = 1 if deterministic or rng is None else S_test
    x = ad.constant(np.asarray(X, dtype=np.float64))
    head = model.heads[task]
    probs = 0.0
    for _ in range(n_samples):
        h, _ = _trunk(model.hidden, x, binding, noise, 1.0, masks, deterministic)
        logits = head.forward(h, binding.layer(head), noise, deterministic).data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = probs + e / e.sum(axis=1, keepdims=True)
    return probs / n_samples


def accuracy(probs: np.ndarray, y) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(y)))


# --- VAE ----------------------------------------------------------------------------

class VaeModel:
    """IBP-masked encoder and decoder shared by all tasks; per-task latent and output heads."""

    def __init__(self, d_in: int, encoder: list[int], latent: int, alpha: float, rng: np.random.Generator,
                 init_sigma: float = 0.01, init_std: float = 0.1, decoder: list[int] | None = None):
        self.d_in = d_in
        self.latent = latent
        self.init_sigma = init_sigma
        self.init_std = init_std
        decoder = list(reversed(encoder)) if decoder is None else decoder
        self.encoder, self.decoder = [], []
        width = d_in
        for i, k in enumerate(encoder):
            self.encoder.append(IbpLayer(f"enc.{i}", width, k, alpha, rng, init_sigma, init_std))
            width = k
        width = latent
        for i, k in enumerate(decoder):
            self.decoder.append(IbpLayer(f"dec.{i}", width, k, alpha, rng, init_sigma, init_std))
            width = k
        self.heads: dict[int, tuple[GaussianLayer, GaussianLayer, GaussianLayer]] = {}

    @property
    def ibp_layers(self) -> list[IbpLayer]:
        return [*self.encoder, *self.decoder]

    def add_head(self, task: int, n_classes: int | None, rng: np.random.Generator):
        enc_w = self.encoder[-1].K
        dec_w = self.decoder[-1].K
        s = self.init_sigma
        heads = (
            GaussianLayer(f"enc_mu.{task}", enc_w, self.latent, rng, s, self.init_std),
            GaussianLayer(f"enc_sigma.{task}", enc_w, self.latent, rng, s, self.init_std),
            GaussianLayer(f"out.{task}", dec_w, self.d_in, rng, s, self.init_std),
        )
        self.heads[task] = heads
        return heads

    def task_layers(self, task: int) -> list:
        return [*self.encoder, *self.decoder, *self.heads[task]]

    def all_layers(self) -> list:
        out = [*self.encoder, *self.decoder]
        for hs in self.heads.values():
            out.extend(hs)
        return out

    def named_params(self, task: int | None = None) -> dict:
        layers = self.all_layers() if task is None else self.task_layers(task)
        out = {}
        for layer in layers:
            out.update(layer.named_params())
        return out

    def bind(self, task: int, trainable: Iterable[str] = ()) -> Binding:
        return Binding(self.named_params(task), trainable)

    def successor_of(self, layer):
        for stack, heads_idx in ((self.encoder, (0, 1)), (self.decoder, (2,))):
            if layer in stack:
                i = stack.index(layer)
                if i + 1 < len(stack):
                    return [stack[i + 1]]
                return [hs[j] for hs in self.heads.values() for j in heads_idx]
        raise ValueError(f"{layer.name} is not an IBP layer of this model")


def latent_kl(mu_z: Tensor, sigma_z: Tensor) -> Tensor:
    """Sum of KL(N(mu, sigma^2) || N(0, 1)) over all entries."""
    return ad.sum((sigma_z * sigma_z + mu_z * mu_z - 1.0) * 0.5 - ad.log(sigma_z))


def _vae_pass(model: VaeModel, binding: Binding, x: Tensor, task: int, noise: Noise, temperature: float,
              masks, deterministic: bool):
    n_enc = len(model.encoder)
    enc_masks = None if masks is None else masks[:n_enc]
    dec_masks = None if masks is None else masks[n_enc:]
    mu_head, sig_head, out_head = model.heads[task]
    h, kl_enc = _trunk(model.encoder, x, binding, noise, temperature, enc_masks, deterministic)
    mu_z = mu_head.forward(h, binding.layer(mu_head), noise, deterministic)
    sigma_z = ad.softplus(sig_head.forward(h, binding.layer(sig_head), noise, deterministic))
    z = mu_z + sigma_z * ad.constant(noise.normal(mu_z.shape))
    g, kl_dec = _trunk(model.decoder, z, binding, noise, temperature, dec_masks, deterministic)
    logits = out_head.forward(g, binding.layer(out_head), noise, deterministic)
    kl_mask = None
    if kl_enc is not None:
        kl_mask = kl_enc + kl_dec
    return logits, mu_z, sigma_z, kl_mask


def _check_pixels(X):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if np.any(X < 0) or np.any(X > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def vae_elbo(model: VaeModel, binding: Binding, X, task: int, priors, S: int, temperature: float,
             n_data: int, noise: Noise, masks=None, likelihood_only: bool = False,
             deterministic: bool = False) -> Tensor:
    """Negative ELBO of the IBP VAE for one minibatch (minimisation target).

    Both per-example terms (reconstruction and latent KL) are rescaled by
    n_data / batch so the minibatch estimate targets the full-data bound.
    """
    _check_task(model, task)
    X = _check_pixels(X)
    if S < 1:
        raise ValueError("S must be >= 1")
    scale = n_data / X.shape[0]
    x = ad.constant(X)
    per_sample = None
    for _ in range(S):
        logits, mu_z, sigma_z, kl_mask = _vae_pass(model, binding, x, task, noise, temperature, masks,
                                                   deterministic)
        term = (ad.bernoulli_loglik(logits, X) - latent_kl(mu_z, sigma_z)) * scale
        if kl_mask is not None and not likelihood_only:
            term = term - kl_mask
        per_sample = term if per_sample is None else per_sample + term
    elbo = per_sample * (1.0 / S)
    if not likelihood_only:
        elbo = elbo - gaussian_kl_terms(model.task_layers(task), binding, priors)
        if masks is None:
            elbo = elbo - stick_kl_terms(model.ibp_layers, binding, priors)
    return -elbo


def vae_heldout_elbo(model: VaeModel, X, task: int, masks, S: int = 10,
                     rng: np.random.Generator | None = None) -> float:
    """Per-example ELBO on held-out data: posterior-mean weights, sampled latents."""
    _check_task(model, task)
    X = _check_pixels(X)
    rng = np.random.default_rng(0) if rng is None else rng
    binding = model.bind(task)
    x = ad.constant(X)
    mu_head, sig_head, out_head = model.heads[task]
    n_enc = len(model.encoder)
    mean = MeanNoise()
    h, _ = _trunk(model.encoder, x, binding, mean, 1.0, masks[:n_enc], True)
    mu_z = mu_head.forward(h, binding.layer(mu_head), mean, True).data
    sigma_z = np.logaddexp(0.0, sig_head.forward(h, binding.layer(sig_head), mean, True).data)
    kl = np.sum(0.5 * (sigma_z ** 2 + mu_z ** 2 - 1.0) - np.log(sigma_z), axis=1)
    rec = np.zeros(X.shape[0])
    for _ in range(S):
        z = mu_z + sigma_z * rng.standard_normal(mu_z.shape)
        g, _ = _trunk(model.decoder, ad.constant(z), binding, mean, 1.0, masks[n_enc:], True)
        logits = out_head.forward(g, binding.layer(out_head), mean, True).data
        rec += np.sum(X * logits - np.logaddexp(0.0, logits), axis=1)
    return float(np.mean(rec / S - kl))


def vae_generate(model: VaeModel, task: int, n: int, rng: np.random.Generator, masks) -> np.ndarray:
    """Pixel means sigmoid(decoder(z)) for z ~ N(0, I), under the task's frozen masks."""
    _check_task(model, task)
    binding = model.bind(task)
    z = rng.standard_normal((n, model.latent))
    mean = MeanNoise()
    g, _ = _trunk(model.decoder, ad.constant(z), binding, mean, 1.0, masks[len(model.encoder):], True)
    out_head = model.heads[task][2]
    return special.expit(out_head.forward(g, binding.layer(out_head), mean, True).data)
