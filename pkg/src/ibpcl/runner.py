"""Config-driven experiment runs: stream construction, the task loop with
per-task outputs and checkpoints, resume, and offline reports."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ibpcl import checkpoint, cl, net, outputs
from ibpcl.autodiff import NumericError
from ibpcl.config import ExperimentConfig, dump_config
from ibpcl.data import (Dataset, TaskStream, load_digits_8x8, load_mnist_8x8, load_idx_dataset, make_permuted_stream,
                        make_split_stream, make_synthetic, split_tasks_by_class, cap_per_class)

log = logging.getLogger(__name__)

CONFIG_ECHO = "config.resolved.yaml"
CHECKPOINT_DIR = "checkpoints"


def _base_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    s = cfg.stream
    if s.source == "digits":
        return load_digits_8x8(s.data_seed, s.train_cap, s.test_cap)
    if s.source == "idx":
        paths = (s.idx.train_images, s.idx.train_labels, s.idx.test_images, s.idx.test_labels)
        if not all(paths):
            raise ValueError("stream.idx needs train_images, train_labels, test_images and test_labels")
        if s.idx.downsample:
            return load_mnist_8x8(*paths, seed=s.data_seed, train_cap=s.train_cap, test_cap=s.test_cap)
        rng = np.random.default_rng(s.data_seed)
        train = load_idx_dataset(paths[0], paths[1])
        test = load_idx_dataset(paths[2], paths[3])
        return cap_per_class(train, s.train_cap, rng), cap_per_class(test, s.test_cap, rng)
    sy = s.synthetic
    full = make_synthetic(sy.kind, sy.n_per_class + sy.test_per_class, sy.n_classes, sy.dim, sy.separation,
                          sy.spread, sy.noise, seed=s.data_seed)
    train_idx, test_idx = [], []
    for c in range(sy.n_classes):
        idx = np.flatnonzero(full.labels == c)
        train_idx.append(idx[:sy.n_per_class])
        test_idx.append(idx[sy.n_per_class:])
    return full.subset(np.sort(np.concatenate(train_idx))), full.subset(np.sort(np.concatenate(test_idx)))


def build_stream(cfg: ExperimentConfig) -> TaskStream:
    train, test = _base_data(cfg)
    kind = cfg.stream.kind
    if kind == "split":
        return make_split_stream(train, test, cfg.stream.pairs)
    if kind == "permuted":
        return make_permuted_stream(train, test, cfg.stream.n_tasks, cfg.stream.data_seed)
    stream = split_tasks_by_class(train, test)
    if cfg.stream.classes:
        stream = TaskStream([stream[c] for c in cfg.stream.classes])
    return stream


@dataclass
class RunResult:
    out_dir: Path
    learner: cl.ContinualLearner
    R: cl.ResultMatrix
    summary: dict | None


class _Emitter:
    """Writes the per-task artifacts of one run directory."""

    def __init__(self, cfg: ExperimentConfig, out: Path, fresh: bool):
        self.cfg = cfg
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        (out / CONFIG_ECHO).write_text(dump_config(cfg))
        if cfg.problem == "vae":
            self.log = outputs.CsvLog(out / "elbo.csv", outputs.ELBO_COLUMNS, fresh)
        else:
            self.log = outputs.CsvLog(out / "metrics.csv", outputs.METRICS_COLUMNS, fresh)

    def task_done(self, learner: cl.ContinualLearner, t: int, row: list[float]):
        for j, v in enumerate(row):
            self.log.append(t + 1, j + 1, v, self.cfg.mode, self.cfg.seed)
        if self.cfg.problem == "vae":
            self._grid(learner, t)
        self.finalize(learner, t)
        checkpoint.save_learner(self.out / CHECKPOINT_DIR / f"task_{t + 1}.ckpt", learner)

    def _grid(self, learner, t):
        n = self.cfg.samples_per_task
        rng = np.random.default_rng([self.cfg.seed, t])
        side = int(round(np.sqrt(learner.d_in)))
        images = []
        for j in range(t + 1):
            px = net.vae_generate(learner.model, j, n, rng, learner.eval_masks(j))
            images.append(px.reshape(n, side, -1))
        outputs.emit_pgm(np.concatenate(images), t + 1, n, self.out / "samples" / f"after_task_{t + 1}.pgm")

    def finalize(self, learner, t):
        R = learner.R
        summary = None
        if self.cfg.problem == "supervised":
            sub = cl.ResultMatrix(t + 1)
            sub.R = R.R[:t + 1, :t + 1]
            summary = cl.metrics(sub)
        outputs.write_result_json(self.out / "R.json", R, "elbo" if self.cfg.problem == "vae" else "accuracy",
                                  self.cfg.mode, self.cfg.seed, summary)
        outputs.write_structure_csv(self.out / "structure.csv",
                                    cl.structure_report([learner.masks[s] for s in range(t + 1)]))
        return summary


def _loop(learner, stream, emitter, start, stop_after):
    last = len(stream) if stop_after is None else min(len(stream), stop_after)
    for t in range(start, last):
        try:
            # non-finite results raise NumericError at the op that made them, so numpy's warnings are noise
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                learner.train_task(t, stream[t])
                eval_model = learner.coreset_predict_pass() if learner.cfg.problem == "supervised" else learner.model
                row = learner.evaluate(stream, t, eval_model)
        except NumericError:
            checkpoint.save_learner(emitter.out / CHECKPOINT_DIR / "abort.ckpt", learner)
            raise
        log.info("after task %d: %s", t + 1, " ".join(f"{v:.4f}" for v in row))
        emitter.task_done(learner, t, row)


def run_experiment(cfg: ExperimentConfig, out_dir=None, stop_after: int | None = None) -> RunResult:
    out = Path(out_dir) if out_dir is not None else cfg.resolved_output_dir()
    stream = build_stream(cfg)
    learner = cl.ContinualLearner(cfg, stream[0].train.inputs.shape[1], len(stream))
    emitter = _Emitter(cfg, out, fresh=True)
    _loop(learner, stream, emitter, 0, stop_after)
    return RunResult(out, learner, learner.R, _summary(learner))


def resume_experiment(ckpt_path, out_dir=None) -> RunResult:
    ckpt_path = Path(ckpt_path)
    learner = checkpoint.load_learner(ckpt_path)
    cfg = learner.cfg
    out = Path(out_dir) if out_dir is not None else ckpt_path.parent.parent
    stream = build_stream(cfg)
    emitter = _Emitter(cfg, out, fresh=False)
    emitter.log.truncate_after(learner.tasks_done)
    _loop(learner, stream, emitter, learner.tasks_done, None)
    return RunResult(out, learner, learner.R, _summary(learner))


def _summary(learner):
    done = learner.tasks_done
    if learner.cfg.problem != "supervised" or done == 0:
        return None
    sub = cl.ResultMatrix(done)
    sub.R = learner.R.R[:done, :done]
    return cl.metrics(sub)


def latest_checkpoint(run_dir) -> Path | None:
    ckpts = sorted(Path(run_dir, CHECKPOINT_DIR).glob("task_*.ckpt"), key=lambda p: int(p.stem.split("_")[1]))
    return ckpts[-1] if ckpts else None


def report(run_dir) -> dict:
    """Recompute metrics from R.json and structure statistics from the last checkpoint's masks."""
    run_dir = Path(run_dir)
    payload = json.loads((run_dir / "R.json").read_text())
    R = cl.ResultMatrix.from_json(payload["R"])
    done = int(np.sum(~np.isnan(np.diag(R.R))))
    sub = cl.ResultMatrix(done)
    sub.R = R.R[:done, :done]
    out = {"kind": payload["kind"], "tasks": done}
    if payload["kind"] == "accuracy":
        out["metrics"] = cl.metrics(sub)
    else:
        out["metrics"] = {"final_elbo": [float(v) for v in sub.R[-1]]}
    ckpt = latest_checkpoint(run_dir)
    if ckpt is not None:
        arrays, meta = checkpoint.load(ckpt)
        masks = {}
        for key, arr in arrays.items():
            if key.startswith("mask/"):
                t, i = (int(s) for s in key.split("/")[1:])
                masks.setdefault(t, {})[i] = arr
        task_masks = [[masks[t][i] for i in sorted(masks[t])] for t in sorted(masks)]
        out["structure"] = cl.structure_report(task_masks)
    return out
