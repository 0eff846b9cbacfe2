import numpy as np
import pytest

from ibpcl import autodiff as ad
from ibpcl import cl, data, dist, gradcheck, net
from ibpcl.ibp import FrozenNoise, MeanNoise, Noise
from ibpcl.optim import Adam


def priors_for(model, sigma0=0.6, alpha=4.0):
    store = cl.PriorStore(sigma0)
    for layer in model.all_layers():
        store.add_layer(layer, alpha if layer.kind == "ibp" else None)
    return store


def set_posterior_to_prior(model, sigma0=0.6):
    for layer in model.all_layers():
        for k in ("mu", "bias_mu"):
            layer.params[k][:] = 0.0
        for k in ("raw_sigma", "bias_raw_sigma"):
            layer.params[k][:] = dist.softplus_inv(sigma0)


def toy_separable(n=100, seed=0):
    d = data.make_synthetic("gauss-blobs", n // 2, 2, 2, separation=10.0, seed=seed)
    return d.inputs, d.labels


def test_unknown_task_and_bad_inputs():
    rng = np.random.default_rng(0)
    model = net.SupervisedModel(2, [3], 4.0, rng)
    model.add_head(0, 2, rng)
    pri = priors_for(model)
    noise = Noise(rng, rng)
    with pytest.raises(KeyError):
        net.supervised_elbo(model, model.bind(0), np.ones((2, 2)), [0, 1], 1, pri, 1, 1.0, 2, noise)
    with pytest.raises(ValueError):
        net.supervised_elbo(model, model.bind(0), np.ones((0, 2)), [], 0, pri, 1, 1.0, 2, noise)
    with pytest.raises(KeyError):
        net.predict(model, np.ones((1, 2)), 3, [np.ones((2, 3))])


def test_uniform_prediction_loss_is_n_log_classes():
    """q = p, zero head weights: the only non-vanishing terms are the likelihood and the mask KL."""
    rng = np.random.default_rng(0)
    model = net.SupervisedModel(2, [3], 4.0, rng)
    model.add_head(0, 3, rng)
    pri = priors_for(model)
    set_posterior_to_prior(model)
    head = model.heads[0]
    head.params["raw_sigma"][:] = dist.softplus_inv(1e-12)
    head.params["bias_raw_sigma"][:] = dist.softplus_inv(1e-12)
    pri.gaussian[head.name] = cl.posterior_as_prior(head)
    layer = model.hidden[0]
    layer.params["raw_a"][:] = dist.softplus_inv(4.0)
    layer.params["raw_b"][:] = dist.softplus_inv(1.0)
    X, y = rng.random((5, 2)), np.array([0, 1, 2, 0, 1])
    N = 50
    masks = [np.ones((2, 3))]
    loss = net.supervised_elbo(model, model.bind(0), X, y, 0, pri, 1, 1.0, N, Noise(rng, rng), masks=masks)
    assert loss.item() == pytest.approx(N * np.log(3), rel=1e-9)
    # with sampled masks the extra term is the mask-KL MC noise, whose mean is 0 when q = p (rho = 0)
    vals = [net.supervised_elbo(model, model.bind(0), X, y, 0, pri, 1, 1.0, N, Noise(rng, rng)).item()
            for _ in range(2000)]
    assert np.mean(vals) - N * np.log(3) == pytest.approx(0.0, abs=4 * np.std(vals) / np.sqrt(2000) + 1e-9)


def test_likelihood_scales_linearly_in_n():
    rng = np.random.default_rng(1)
    model = net.SupervisedModel(2, [3], 4.0, rng)
    model.add_head(0, 2, rng)
    pri = priors_for(model)
    X, y = rng.random((4, 2)), np.array([0, 1, 1, 0])
    noise = FrozenNoise(np.random.default_rng(2), np.random.default_rng(3))

    def lik(n):
        return net.supervised_elbo(model, model.bind(0), X, y, 0, pri, 2, 0.8, n, noise,
                                   likelihood_only=True).item()

    first = lik(10)
    noise.rewind()
    assert lik(20) == pytest.approx(2 * first, rel=1e-13)


def test_supervised_elbo_gradients_match_finite_differences():
    checks = gradcheck.supervised_elbo_checks(0)
    assert {c.name.split(".")[-1] for c in checks} >= {"mu", "raw_sigma", "rho", "raw_a", "raw_b", "bias_mu"}
    assert any(c.name.startswith("head.") for c in checks)
    assert max(c.error for c in checks) < 1e-3


def test_vae_elbo_gradients_match_finite_differences():
    assert max(c.error for c in gradcheck.vae_elbo_checks(0)) < 1e-3


def test_kl_terms_non_negative():
    rng = np.random.default_rng(4)
    model = net.SupervisedModel(3, [4], 4.0, rng)
    model.add_head(0, 2, rng)
    gradcheck._randomise(model, rng)
    pri = priors_for(model)
    b = model.bind(0)
    assert net.gaussian_kl_terms(model.task_layers(0), b, pri).item() >= 0
    assert net.stick_kl_terms(model.hidden, b, pri).item() >= 0


def test_mask_kl_mean_non_negative_when_q_differs():
    rng = np.random.default_rng(5)
    model = net.SupervisedModel(2, [3], 4.0, rng)
    layer = model.hidden[0]
    layer.params["rho"] = rng.normal(0, 1.5, (2, 3))
    p = {k: ad.constant(v) for k, v in layer.params.items()}
    noise = Noise(rng, rng)
    kls = [layer.stochastic_forward(ad.constant(np.ones((1, 2))), p, noise, 0.5)[1].item() for _ in range(10_000)]
    assert np.mean(kls) >= -0.01


def test_s10_vs_s100_agree():
    rng = np.random.default_rng(6)
    model = net.SupervisedModel(2, [4], 4.0, rng)
    model.add_head(0, 2, rng)
    pri = priors_for(model)
    X, y = toy_separable(20)
    noise = Noise(rng, rng)
    one = np.array([net.supervised_elbo(model, model.bind(0), X, y, 0, pri, 1, 0.8, 20, noise).item()
                    for _ in range(200)])
    s10 = net.supervised_elbo(model, model.bind(0), X, y, 0, pri, 10, 0.8, 20, noise).item()
    s100 = net.supervised_elbo(model, model.bind(0), X, y, 0, pri, 100, 0.8, 20, noise).item()
    spread = one.std() * np.sqrt(1 / 10 + 1 / 100)
    assert abs(s10 - s100) < 3 * spread


def _train_toy(steps=50, seed=0):
    rng = np.random.default_rng(seed)
    model = net.SupervisedModel(2, [8], 4.0, rng)
    model.add_head(0, 2, rng)
    pri = priors_for(model)
    X, y = toy_separable(100, seed)
    opt = Adam()
    noise = Noise(rng, rng)
    names = list(model.named_params(0))
    losses = []
    for _ in range(steps):
        b = model.bind(0, names)
        loss = net.supervised_elbo(model, b, X, y, 0, pri, 2, 0.8, len(X), noise)
        ad.backward(loss)
        opt.step(model.named_params(0), b.grads(), {n: 0.05 for n in names})
        losses.append(loss.item())
    return model, X, y, losses


def test_elbo_improves_on_separable_toy():
    model, X, y, losses = _train_toy()
    assert np.mean(losses[-5:]) < np.mean(losses[:5])
    masks = [model.hidden[0].hard_mask()]
    acc = net.accuracy(net.predict(model, X, 0, masks, 20, np.random.default_rng(1)), y)
    assert acc >= 0.95


def test_predict_rows_sum_to_one_and_mc_matches_mean():
    model, X, y, _ = _train_toy()
    masks = [model.hidden[0].hard_mask()]
    probs = net.predict(model, X, 0, masks, 100, np.random.default_rng(2))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    mean_acc = net.accuracy(net.predict(model, X, 0, masks, deterministic=True), y)
    assert abs(net.accuracy(probs, y) - mean_acc) <= 0.02


def test_zero_mask_prediction_depends_only_on_head_bias():
    rng = np.random.default_rng(0)
    model = net.SupervisedModel(3, [4], 4.0, rng)
    model.add_head(0, 3, rng)
    model.heads[0].params["bias_mu"] = np.array([0.0, 1.0, 0.0])
    probs = net.predict(model, rng.random((5, 3)), 0, [np.zeros((3, 4))], deterministic=True)
    expected = np.exp([0.0, 1.0, 0.0]) / np.exp([0.0, 1.0, 0.0]).sum()
    np.testing.assert_allclose(probs, np.tile(expected, (5, 1)), rtol=1e-12)


def test_head_isolation():
    """Training task 1 through the ELBO never touches head 0."""
    rng = np.random.default_rng(3)
    model = net.SupervisedModel(2, [4], 4.0, rng)
    model.add_head(0, 2, rng)
    model.add_head(1, 2, rng)
    pri = priors_for(model)
    before = {k: v.copy() for k, v in model.heads[0].params.items()}
    X, y = toy_separable(20)
    names = list(model.named_params(1))
    assert not any(n.startswith("head.0") for n in names)
    opt = Adam()
    for _ in range(5):
        b = model.bind(1, names)
        ad.backward(net.supervised_elbo(model, b, X, y, 1, pri, 1, 1.0, 20, Noise(rng, rng)))
        opt.step(model.named_params(1), b.grads(), {n: 0.01 for n in names})
    for k, v in before.items():
        assert model.heads[0].params[k].tobytes() == v.tobytes()


# --- VAE ----------------------------------------------------------------------------------

def small_vae(seed=0):
    rng = np.random.default_rng(seed)
    model = net.VaeModel(4, [3], 2, 4.0, rng)
    model.add_head(0, None, rng)
    return model, rng


def test_vae_rejects_bad_pixels():
    model, rng = small_vae()
    with pytest.raises(ValueError):
        net.vae_elbo(model, model.bind(0), np.full((2, 4), 1.5), 0, priors_for(model), 1, 1.0, 2, Noise(rng, rng))


def test_latent_kl_zero_at_standard_normal():
    assert net.latent_kl(ad.constant(np.zeros((3, 2))), ad.constant(np.ones((3, 2)))).item() == 0.0


def test_zero_logit_decoder_reconstruction():
    """Decoder logits 0 give log 2 nats per pixel; with a degenerate N(0, 1) latent the loss is N D log 2."""
    model, rng = small_vae()
    mu_head, sig_head, out_head = model.heads[0]
    for head in (mu_head, out_head):
        head.params["mu"][:] = 0.0
        head.params["bias_mu"][:] = 0.0
    sig_head.params["mu"][:] = 0.0
    sig_head.params["bias_mu"][:] = dist.softplus_inv(1.0)
    X = rng.random((3, 4))
    masks = [np.ones((4, 3)), np.ones((2, 3))]
    loss = net.vae_elbo(model, model.bind(0), X, 0, priors_for(model), 1, 1.0, 30, MeanNoise(), masks=masks,
                        likelihood_only=True, deterministic=True)
    assert loss.item() == pytest.approx(30 * 4 * np.log(2), rel=1e-12)


def test_vae_generate_range_and_determinism():
    model, _ = small_vae()
    masks = [np.ones((4, 3)), np.ones((2, 3))]
    a = net.vae_generate(model, 0, 5, np.random.default_rng(1), masks)
    b = net.vae_generate(model, 0, 5, np.random.default_rng(1), masks)
    assert a.shape == (5, 4) and np.all((a > 0) & (a < 1))
    assert a.tobytes() == b.tobytes()


def test_vae_trains_on_cluster_images():
    """Held-out ELBO improves (5-step moving average) and samples resemble the training mean."""
    rng = np.random.default_rng(0)
    full = data.make_synthetic("cluster-images", 120, 1, noise=0.05, seed=3)
    train, test = full.inputs[:100], full.inputs[100:]
    model = net.VaeModel(64, [32, 32], 8, 30.0, rng)
    model.add_head(0, None, rng)
    pri = priors_for(model, alpha=30.0)
    masks = [np.ones(layer.params["mu"].shape) for layer in model.ibp_layers]
    names = [n for layer in model.all_layers() for n in layer.gaussian_names()]
    opt = Adam()
    noise = Noise(rng, rng)
    heldout = []
    for step in range(200):
        idx = rng.choice(100, 10, replace=False)
        b = model.bind(0, names)
        ad.backward(net.vae_elbo(model, b, train[idx], 0, pri, 1, 1.0, 100, noise, masks=masks))
        opt.step(model.named_params(0), b.grads(), {n: 0.001 for n in names})
        # common random numbers: the held-out estimate uses the same latent draws every step
        heldout.append(net.vae_heldout_elbo(model, test, 0, masks, S=2, rng=np.random.default_rng(0)))
    ma = np.convolve(heldout, np.ones(5) / 5, mode="valid")
    assert ma[-1] > ma[0] + 5
    assert np.all(np.diff(ma[::20]) > 0)
    assert np.mean(np.diff(ma) > 0) >= 0.95
    gen = net.vae_generate(model, 0, 50, np.random.default_rng(9), masks)
    r = np.corrcoef(gen.mean(axis=0), train.mean(axis=0))[0, 1]
    assert r > 0.5
