# %% [markdown]
# # Forgetting on split digits
#
# Five binary tasks (0/1, 2/3, ...) over the 8x8 digits. The IBP learner is
# compared with a maximum-likelihood network that shares its trunk across tasks.
# About 25 seconds.

# %%
import tempfile
from pathlib import Path

import numpy as np

from ibpcl import cl, runner
from ibpcl.config import load_config

cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "desk_split_digits.yaml")
out = Path(tempfile.mkdtemp())
results = {mode: runner.run_experiment(cfg.replace(mode=mode), out / mode) for mode in ("npbcl", "naive")}

# %%
np.set_printoptions(precision=3, suppress=True)
for mode, res in results.items():
    print(mode, cl.metrics(res.R))
    print(res.R.R)

# %% [markdown]
# Task masks overlap only partially, and under half of the first layer is active
# after the first task.

# %%
learner = results["npbcl"].learner
print("first-layer active after task 1:", learner.masks[0][0].mean())
for row in cl.structure_report([learner.masks[t] for t in range(5)])[:4]:
    print(row)
