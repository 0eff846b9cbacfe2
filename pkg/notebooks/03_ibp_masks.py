# %% [markdown]
# # IBP masks and dynamic expansion
#
# Stick-breaking gives decreasing column probabilities, so a layer prefers to use
# its leftmost units. Columns that no task uses form an empty tail that the
# expansion rule tops up.

# %%
import numpy as np

from ibpcl import ibp

print(ibp.stick_pis([0.9, 0.8, 0.7, 0.5, 0.5]))

# %% [markdown]
# Posterior-mean hard mask of a freshly initialised layer (alpha = 5, 50 columns):
# only the leftmost columns clear 0.5.

# %%
rng = np.random.default_rng(0)
layer = ibp.IbpLayer("h", 8, 50, 5.0, rng)
B = layer.hard_mask()
print("active per column:", B.sum(0).astype(int))

# %% [markdown]
# Expansion size G = T - (empty tail). Three free columns are kept in reserve.

# %%
B = np.zeros((3, 6))
B[:, :4] = 1
print("empty tail", ibp.empty_tail_count(B), "-> G =", ibp.expansion_size(B, 3))
print("unused 50-column layer grows by", layer.expand(np.zeros((8, 50)), 3, rng))
print("fully used layer grows by", layer.expand(np.ones((8, 50)), 3, rng), "-> K =", layer.K)
