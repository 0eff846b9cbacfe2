# %% [markdown]
# # Variational families
#
# Gaussian weights, Kumaraswamy sticks against a Beta prior, and binary Concrete
# masks. KLs are checked against numerical integration.

# %%
import numpy as np
from scipy import integrate, stats

from ibpcl import autodiff as ad
from ibpcl import dist

# %% [markdown]
# ## Kumaraswamy vs Beta
#
# The closed-form KL uses a truncated Taylor series for the cross term. Here it is
# against brute-force quadrature for a few shapes.

# %%
def kuma(a, b):
    return dist.KumaraswamyParams(ad.constant(dist.softplus_inv(np.array([a]))),
                                  ad.constant(dist.softplus_inv(np.array([b]))))


def quad_kl(a, b, alpha, beta):
    f = lambda x: np.exp(dist.kumaraswamy_log_pdf(x, a, b)) * (
        dist.kumaraswamy_log_pdf(x, a, b) - stats.beta.logpdf(x, alpha, beta))
    return integrate.quad(f, 0, 1, limit=200)[0]


for a, b, alpha, beta in [(3, 1, 2, 1), (2, 2, 5, 1), (2, 3, 5, 2)]:
    closed = dist.kumaraswamy_beta_kl(kuma(a, b), alpha, beta).item()
    print(f"Kuma({a},{b}) || Beta({alpha},{beta}): closed {closed:.5f}  quadrature {quad_kl(a, b, alpha, beta):.5f}")

# %% [markdown]
# ## Binary Concrete
#
# The pre-sigmoid density is a proper density at every temperature.

# %%
for la, lam in [(0.0, 1.0), (1.5, 0.3)]:
    f = lambda y: np.exp(dist.concrete_log_density(ad.constant(y), ad.constant(la), lam).item())
    print(la, lam, integrate.quad(f, -60, 60, points=[la / lam])[0])

# %% [markdown]
# The relaxed KL between two Concretes of equal temperature does not depend on the
# temperature: the substitution z = y * temperature removes it. It therefore does not
# approach the Bernoulli KL as the temperature falls.

# %%
rng = np.random.default_rng(0)
q, p = np.log(0.8 / 0.2), np.log(0.2 / 0.8)
n = 200_000
for lam in (2.0, 0.5, 0.1):
    y = dist.concrete_presigmoid(ad.constant(np.full(n, q)), lam, rng.random(n))
    est = dist.concrete_kl_mc(y, ad.constant(np.full(n, q)), ad.constant(np.full(n, p)), lam).item() / n
    print(f"temperature {lam}: MC KL {est:.4f}")
print("Bernoulli KL", dist.bernoulli_kl(0.8, 0.2))
