# %% [markdown]
# # Checkpoints, resume and the CLI
#
# A run can stop after any task and be resumed from its checkpoint; the result
# is bitwise identical to an uninterrupted run because every random stream is
# saved with the model.

# %%
import subprocess
import sys
import tempfile
from pathlib import Path

from ibpcl import checkpoint, runner
from ibpcl.config import parse_config

cfg = parse_config("""
seed: 3
stream:
  source: synthetic
  kind: split
  pairs: [[0, 1], [2, 3], [4, 5]]
  synthetic: {kind: gauss-blobs, n_classes: 6, dim: 16, n_per_class: 200, test_per_class: 20, separation: 10.0}
model: {hidden: [64]}
train: {batch_size: 8, epochs: 2, finetune_epochs: 1}
""")
root = Path(tempfile.mkdtemp())
full = runner.run_experiment(cfg, root / "full")
runner.run_experiment(cfg, root / "part", stop_after=1)
resumed = runner.resume_experiment(root / "part" / "checkpoints" / "task_1.ckpt")
print("bitwise equal R:", full.R.R.tobytes() == resumed.R.R.tobytes())

# %%
arrays, meta = checkpoint.load(root / "full" / "checkpoints" / "task_3.ckpt")
print(len(arrays), "arrays;", sorted(meta)[:6])

# %% [markdown]
# The same operations from the shell.

# %%
out = subprocess.run([sys.executable, "-m", "ibpcl", "report", str(root / "full"), "--json"],
                     capture_output=True, text=True)
print(out.stdout[:400])
