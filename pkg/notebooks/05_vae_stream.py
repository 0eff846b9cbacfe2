# %% [markdown]
# # Generative stream
#
# One synthetic 8x8 image cluster per task. The encoder and decoder trunks are
# shared and masked; each task owns its latent and output heads. After each task
# a PGM grid of samples is written, one row per task seen so far.

# %%
import tempfile
from pathlib import Path

import numpy as np

from ibpcl import runner
from ibpcl.config import load_config
from ibpcl.outputs import read_pgm

cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "desk_vae_clusters.yaml")
out = Path(tempfile.mkdtemp())
res = runner.run_experiment(cfg, out)

# %%
np.set_printoptions(precision=2, suppress=True)
print("held-out ELBO per example, row = after task i")
print(res.R.R)
grid = read_pgm(out / "samples" / "after_task_3.pgm")
print(grid.shape)
for row in grid[:8]:
    print("".join(" .:-=+*#%@"[int(v) * 10 // 256] for v in row))
