"""Continual-learning loop: masked training, selective finetuning, masked priors,
coresets, alpha adaptation, baselines and transfer metrics."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ibpcl import autodiff as ad
from ibpcl import net
from ibpcl.config import ExperimentConfig
from ibpcl.data import Task, TaskStream
from ibpcl.ibp import IbpLayer, Noise, expansion_size, pad_mask, union_masks
from ibpcl.optim import Adam

log = logging.getLogger(__name__)

MODES = ("npbcl", "vcl", "naive")
STREAM_NAMES = ("init", "mask-noise", "weight-noise", "data-order", "coreset", "eval")


class RngStreams:
    """Named generators spawned from one master seed."""

    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
        self.gens = {name: np.random.default_rng(s) for name, s in zip(STREAM_NAMES, children)}

    def __getitem__(self, name) -> np.random.Generator:
        return self.gens[name]

    def noise(self) -> Noise:
        return Noise(self.gens["mask-noise"], self.gens["weight-noise"])

    def state(self) -> dict:
        return {name: g.bit_generator.state for name, g in self.gens.items()}

    def set_state(self, state: dict):
        for name, st in state.items():
            self.gens[name].bit_generator.state = st


# --- priors -------------------------------------------------------------------------------

def initial_prior(shape_w, shape_b, sigma0: float) -> dict:
    return {"mu": np.zeros(shape_w), "var": np.full(shape_w, sigma0 ** 2),
            "bias_mu": np.zeros(shape_b), "bias_var": np.full(shape_b, sigma0 ** 2)}


def posterior_as_prior(layer) -> dict:
    P = layer.params
    return {"mu": P["mu"].copy(), "var": np.logaddexp(0.0, P["raw_sigma"]) ** 2,
            "bias_mu": P["bias_mu"].copy(), "bias_var": np.logaddexp(0.0, P["bias_raw_sigma"]) ** 2}


def masked_prior_update(q_prev: dict, union_mask, sigma0: float) -> dict:
    """Per weight: previous posterior where any earlier task used it, else N(0, sigma0^2).

    ``q_prev`` holds mu/var/bias_mu/bias_var; a bias follows its column, which
    counts as used when any entry of that column is set.
    """
    B = np.asarray(union_mask, dtype=bool)
    if B.shape != q_prev["mu"].shape:
        raise ad.ShapeError("masked_prior_update", B.shape, q_prev["mu"].shape)
    col = B.any(axis=0)
    v0 = sigma0 ** 2
    return {"mu": np.where(B, q_prev["mu"], 0.0), "var": np.where(B, q_prev["var"], v0),
            "bias_mu": np.where(col, q_prev["bias_mu"], 0.0), "bias_var": np.where(col, q_prev["bias_var"], v0)}


def alpha_update(alpha: float, a_values) -> float:
    """alpha <- max(alpha, max_k a_k)."""
    return max(float(alpha), float(np.max(a_values)))


@dataclass
class PriorStore:
    sigma0: float
    gaussian: dict = field(default_factory=dict)
    alpha: dict = field(default_factory=dict)

    def add_layer(self, layer, alpha: float | None = None):
        self.gaussian[layer.name] = initial_prior(layer.params["mu"].shape, layer.params["bias_mu"].shape,
                                                  self.sigma0)
        if alpha is not None:
            self.alpha[layer.name] = float(alpha)

    def pad(self, layer):
        """Grow a layer's prior to its current shape, filling new entries with p_0."""
        old = self.gaussian[layer.name]
        fresh = initial_prior(layer.params["mu"].shape, layer.params["bias_mu"].shape, self.sigma0)
        for key in fresh:
            fresh[key][tuple(slice(0, s) for s in old[key].shape)] = old[key]
        self.gaussian[layer.name] = fresh


# --- coresets -------------------------------------------------------------------------------

def k_center_greedy(X, size: int, first: int) -> np.ndarray:
    """Greedy farthest-point selection in Euclidean input space."""
    X = np.asarray(X, dtype=np.float64)
    chosen = [int(first)]
    dist = np.linalg.norm(X - X[first], axis=1)
    for _ in range(size - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(X - X[nxt], axis=1))
    return np.array(chosen, dtype=np.int64)


def coreset_select(X, method: str, size: int, rng: np.random.Generator):
    """Returns (selected indices, remaining indices)."""
    n = len(X)
    if size > n:
        raise ValueError(f"coreset size {size} exceeds {n} available examples")
    if size == 0 or method == "none":
        return np.array([], dtype=np.int64), np.arange(n)
    if method == "random":
        sel = rng.choice(n, size, replace=False)
    elif method == "kcenter":
        sel = k_center_greedy(X, size, int(rng.integers(n)))
    else:
        raise ValueError(f"unknown coreset method {method!r}")
    rest = np.setdiff1d(np.arange(n), sel)
    return np.asarray(sel, dtype=np.int64), rest


@dataclass
class Coreset:
    method: str = "none"
    size: int = 0
    inputs: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)

    def update(self, task_id: int, X, y, rng):
        """Select this task's coreset; returns the remaining training data."""
        sel, rest = coreset_select(X, self.method, self.size, rng)
        if sel.size:
            self.inputs[task_id] = X[sel]
            self.labels[task_id] = y[sel]
        return X[rest], y[rest]

    def __bool__(self):
        return bool(self.inputs)


# --- metrics --------------------------------------------------------------------------------

class ResultMatrix:
    """R[i, j]: test accuracy on task j after finishing task i (NaN if not evaluated)."""

    def __init__(self, n_tasks: int):
        self.R = np.full((n_tasks, n_tasks), np.nan)

    def __setitem__(self, ij, value):
        self.R[ij] = value

    def __getitem__(self, ij):
        return self.R[ij]

    @property
    def n(self) -> int:
        return self.R.shape[0]

    def to_json(self) -> list:
        return [[None if np.isnan(v) else float(v) for v in row] for row in self.R]

    @classmethod
    def from_json(cls, rows) -> "ResultMatrix":
        out = cls(len(rows))
        out.R = np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=float)
        return out


def metrics(R) -> dict:
    """ACC, FWT, BWT over a task-result matrix.

    ACC averages the i >= j entries over their own count; FWT is None unless
    every i < j entry is present.
    """
    R = np.asarray(R.R if isinstance(R, ResultMatrix) else R, dtype=float)
    n = R.shape[0]
    lower = np.tril_indices(n)
    if np.any(np.isnan(R[lower])):
        raise ValueError("result matrix is missing entries on or below the diagonal")
    acc = float(np.mean(R[lower]))
    pairs = n * (n - 1) / 2
    upper = np.triu_indices(n, 1)
    fwt = None
    if n > 1 and not np.any(np.isnan(R[upper])):
        fwt = float(np.sum(R[upper]) / pairs)
    bwt = 0.0
    if n > 1:
        bwt = float(sum(R[i, j] - R[j, j] for i in range(1, n) for j in range(i)) / pairs)
    return {"ACC": acc, "FWT": fwt, "BWT": bwt}


def final_accuracy(R) -> float:
    R = np.asarray(R.R if isinstance(R, ResultMatrix) else R)
    return float(np.mean(R[-1]))


def structure_report(task_masks: list[list[np.ndarray]]) -> list[dict]:
    """Per layer: pairwise IoU of task masks and cumulative filled fraction."""
    n_tasks = len(task_masks)
    if n_tasks == 0:
        raise ValueError("no task masks")
    out = []
    for layer in range(len(task_masks[0])):
        masks = [m[layer] for m in task_masks]
        shape = union_masks(masks).shape
        masks = [pad_mask(m, shape).astype(bool) for m in masks]
        sharing = np.zeros((n_tasks, n_tasks))
        for s in range(n_tasks):
            for t in range(n_tasks):
                union = np.logical_or(masks[s], masks[t]).sum()
                sharing[s, t] = np.logical_and(masks[s], masks[t]).sum() / union if union else 0.0
        filled, running = [], np.zeros(shape, dtype=bool)
        for m in masks:
            running |= m
            filled.append(float(running.sum() / running.size))
        out.append({"layer": layer, "sharing": sharing, "filled": filled,
                    "active": [float(m.mean()) for m in masks]})
    return out


# --- the learner ----------------------------------------------------------------------------

def temperature_schedule(start: float, end: float, steps: int) -> np.ndarray:
    if steps <= 1:
        return np.array([end])
    return start * (end / start) ** (np.arange(steps) / (steps - 1))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


class ContinualLearner:
    """Owns the model, priors, masks, optimizer and RNG streams of one run."""

    def __init__(self, cfg: ExperimentConfig, d_in: int, n_tasks: int):
        if cfg.mode not in MODES:
            raise ValueError(f"unknown mode {cfg.mode!r}")
        self.cfg = cfg
        self.d_in = d_in
        self.rngs = RngStreams(cfg.seed)
        m, tr = cfg.model, cfg.train
        init = self.rngs["init"]
        if cfg.problem == "supervised":
            widths = [m.initial_width] * len(m.hidden) if m.dynamic_expansion else list(m.hidden)
            self.model = net.SupervisedModel(d_in, widths, cfg.prior.alpha, init, tr.init_sigma, tr.init_std)
        elif cfg.problem == "vae":
            self.model = net.VaeModel(d_in, list(m.encoder), m.latent, cfg.prior.alpha, init,
                                      tr.init_sigma, tr.init_std)
        else:
            raise ValueError(f"unknown problem {cfg.problem!r}")
        self.priors = PriorStore(cfg.prior.sigma0)
        for layer in self.model.ibp_layers:
            self.priors.add_layer(layer, cfg.prior.alpha)
        self.optimizer = Adam()
        self.masks: dict[int, list[np.ndarray]] = {}
        self.coreset = Coreset(cfg.coreset.method, cfg.coreset.size if cfg.coreset.method != "none" else 0)
        self.R = ResultMatrix(n_tasks)
        self.tasks_done = 0
        self.n_classes: dict[int, int] = {}

    # structure ---------------------------------------------------------------------------

    @property
    def dense(self) -> bool:
        return self.cfg.mode in ("vcl", "naive")

    def dense_masks(self) -> list[np.ndarray]:
        return [np.ones(layer.params["mu"].shape) for layer in self.model.ibp_layers]

    def task_masks(self, task: int) -> list[np.ndarray]:
        """Stored masks of ``task``, zero-padded to the current layer shapes."""
        return [pad_mask(m, layer.params["mu"].shape)
                for m, layer in zip(self.masks[task], self.model.ibp_layers)]

    def union_mask(self, upto: int) -> list[np.ndarray]:
        out = []
        for i, layer in enumerate(self.model.ibp_layers):
            ms = [self.masks[t][i] for t in range(upto + 1) if t in self.masks]
            out.append(pad_mask(union_masks(ms), layer.params["mu"].shape))
        return out

    def _grow(self, layer: IbpLayer, g: int):
        init = self.rngs["init"]
        layer.add_columns(g, init)
        self.priors.pad(layer)
        for succ in self.model.successor_of(layer):
            succ.add_input_rows(g, init)
            if succ.name in self.priors.gaussian:
                self.priors.pad(succ)

    def expand(self, temperature: float) -> list[int]:
        """Grow every IBP layer so ``expansion_reserve`` trailing columns stay empty."""
        grown = []
        for layer in self.model.ibp_layers:
            B = layer.sample_hard_mask(self.rngs["mask-noise"], temperature)
            g = expansion_size(B, self.cfg.model.expansion_reserve)
            if g:
                self._grow(layer, g)
            grown.append(g)
        return grown

    # objectives --------------------------------------------------------------------------

    def _head_layers(self, task, model=None):
        h = (self.model if model is None else model).heads[task]
        return list(h) if isinstance(h, tuple) else [h]

    def _gaussian_names(self, task, means_only=False, model=None) -> list[str]:
        model = self.model if model is None else model
        names = []
        for layer in [*model.ibp_layers, *self._head_layers(task, model)]:
            for n in layer.gaussian_names():
                if means_only and "raw_sigma" in n:
                    continue
                names.append(n)
        return names

    def _structure_names(self) -> list[str]:
        return [n for layer in self.model.ibp_layers for n in layer.structure_names()]

    def _run_epochs(self, X, y, task, epochs, trainable, lr, masks, S, temperatures=None,
                    likelihood_only=False, deterministic=False, grad_masks=None,
                    model=None, priors=None, noise=None, order_rng=None, optimizer=None):
        """Minibatch Adam on the negative ELBO; ``lr`` maps a parameter name to its step size."""
        model = self.model if model is None else model
        priors = self.priors if priors is None else priors
        noise = self.rngs.noise() if noise is None else noise
        order_rng = self.rngs["data-order"] if order_rng is None else order_rng
        optimizer = self.optimizer if optimizer is None else optimizer
        elbo = net.vae_elbo if self.cfg.problem == "vae" else net.supervised_elbo
        n = len(X)
        step = 0
        for _ in range(epochs):
            for idx in _batches(n, self.cfg.train.batch_size, order_rng):
                temp = 1.0 if temperatures is None else temperatures[min(step, len(temperatures) - 1)]
                binding = model.bind(task, trainable)
                args = (X[idx],) if y is None else (X[idx], y[idx])
                loss = elbo(model, binding, *args, task, priors, S, temp, n, noise, masks,
                            likelihood_only, deterministic)
                ad.backward(loss)
                grads = binding.grads()
                optimizer.step(model.named_params(task), grads, {k: lr(k) for k in grads}, where=grad_masks)
                step += 1

    @staticmethod
    def _finetune_grad_masks(model, masks) -> dict:
        """Only weights the task's mask switches on may move; biases follow their column.

        Applied to the optimizer update itself, so moments left over from
        masked training cannot drift the switched-off weights.
        """
        out = {}
        for layer, B in zip(model.ibp_layers, masks):
            col = B.max(axis=0)
            out[f"{layer.name}.mu"] = B
            out[f"{layer.name}.raw_sigma"] = B
            out[f"{layer.name}.bias_mu"] = col
            out[f"{layer.name}.bias_raw_sigma"] = col
        return out

    # the task loop -----------------------------------------------------------------------

    def train_task(self, task_id: int, task: Task):
        cfg, tr = self.cfg, self.cfg.train
        X = task.train.inputs
        y = task.train.labels if cfg.problem == "supervised" else None
        if len(X) == 0:
            raise ValueError("empty task data")
        if self.coreset.size and cfg.problem == "supervised":
            X, y = self.coreset.update(task_id, X, y, self.rngs["coreset"])
        self.model.add_head(task_id, task.n_classes, self.rngs["init"])
        self.n_classes[task_id] = task.n_classes
        for head in self._head_layers(task_id):
            self.priors.add_layer(head)

        if cfg.mode == "naive":
            self._train_naive(task_id, X, y)
        elif cfg.mode == "vcl":
            self._train_vcl(task_id, X, y)
        else:
            self._train_npbcl(task_id, X, y)
        self.tasks_done = task_id + 1

    def _ml_warm_start(self, task_id, X, y):
        names = self._gaussian_names(task_id, means_only=True)
        self._run_epochs(X, y, task_id, self.cfg.train.ml_init_epochs, names, lambda n: self.cfg.train.lr,
                         self.dense_masks(), 1, likelihood_only=True, deterministic=True)

    def _train_naive(self, task_id, X, y):
        tr = self.cfg.train
        names = self._gaussian_names(task_id, means_only=True)
        self._run_epochs(X, y, task_id, tr.epochs + tr.finetune_epochs, names, lambda n: tr.lr,
                         self.dense_masks(), 1, likelihood_only=True, deterministic=True)
        self.masks[task_id] = self.dense_masks()

    def _train_vcl(self, task_id, X, y):
        tr = self.cfg.train
        if task_id == 0 and tr.ml_init_epochs:
            self._ml_warm_start(task_id, X, y)
        names = self._gaussian_names(task_id)
        self._run_epochs(X, y, task_id, tr.epochs, names, lambda n: tr.lr, self.dense_masks(), tr.s_train)
        self.masks[task_id] = self.dense_masks()
        self._update_priors(task_id)

    def _train_npbcl(self, task_id, X, y):
        tr = self.cfg.train
        for layer in self.model.ibp_layers:
            layer.reset_mask_logits()
        if task_id == 0 and tr.ml_init_epochs:
            self._ml_warm_start(task_id, X, y)
        n_batches = -(-len(X) // tr.batch_size)
        temps = temperature_schedule(tr.temperature_start, tr.temperature_end, tr.epochs * n_batches)

        def lr(name):
            return tr.lr_ibp if name.rsplit(".", 1)[1] in IbpLayer.STRUCTURE else tr.lr

        # one epoch at a time: expansion changes the parameter shapes between epochs
        for e in range(tr.epochs):
            epoch_temps = temps[e * n_batches:(e + 1) * n_batches]
            names = self._gaussian_names(task_id) + self._structure_names()
            self._run_epochs(X, y, task_id, 1, names, lr, None, tr.s_train, temperatures=epoch_temps)
            if self.cfg.model.dynamic_expansion:
                self.expand(epoch_temps[-1])
        self.masks[task_id] = [layer.hard_mask() for layer in self.model.ibp_layers]
        masks = self.task_masks(task_id)
        self._run_epochs(X, y, task_id, tr.finetune_epochs, self._gaussian_names(task_id),
                         lambda n: tr.lr_finetune, masks, tr.s_train,
                         grad_masks=self._finetune_grad_masks(self.model, masks))
        self._update_priors(task_id)
        for layer in self.model.ibp_layers:
            a, _ = layer.stick_ab()
            layer.alpha = self.priors.alpha[layer.name] = alpha_update(self.priors.alpha[layer.name], a)

    def _update_priors(self, task_id):
        union = self.union_mask(task_id)
        for layer, B in zip(self.model.ibp_layers, union):
            self.priors.gaussian[layer.name] = masked_prior_update(posterior_as_prior(layer), B, self.priors.sigma0)
        for head in self._head_layers(task_id):
            self.priors.gaussian[head.name] = posterior_as_prior(head)

    # prediction ----------------------------------------------------------------------------

    def eval_masks(self, task_id):
        return self.dense_masks() if self.dense else self.task_masks(task_id)

    def coreset_predict_pass(self):
        """Refine a clone on the coresets and return it; the learner itself is untouched.

        The clone's prior is the current posterior. Each stored task is
        trained under its own frozen mask, drawing all randomness from the
        coreset stream.
        """
        if not self.coreset or self.cfg.mode == "naive":
            return self.model
        tr, cs = self.cfg.train, self.cfg.coreset
        clone = copy.deepcopy(self.model)
        priors = PriorStore(self.priors.sigma0,
                            {layer.name: posterior_as_prior(layer) for layer in clone.all_layers()},
                            dict(self.priors.alpha))
        rng = self.rngs["coreset"]
        noise, opt = Noise(rng, rng), Adam()
        for _ in range(cs.epochs):
            for t in sorted(self.coreset.inputs):
                masks = self.eval_masks(t)
                self._run_epochs(self.coreset.inputs[t], self.coreset.labels[t], t, 1,
                                 self._gaussian_names(t, model=clone), lambda n: cs.lr, masks, tr.s_train,
                                 grad_masks=self._finetune_grad_masks(clone, masks),
                                 model=clone, priors=priors, noise=noise, order_rng=rng, optimizer=opt)
        return clone

    def evaluate(self, stream: TaskStream, after: int, model=None) -> list[float]:
        """Fill row ``after`` of R: accuracy, or held-out ELBO per example for the VAE."""
        model = self.model if model is None else model
        row = []
        for j in range(after + 1):
            test = stream[j].test
            if self.cfg.problem == "vae":
                score = net.vae_heldout_elbo(model, test.inputs, j, self.eval_masks(j), S=self.cfg.train.s_test,
                                             rng=self.rngs["eval"])
            else:
                probs = net.predict(model, test.inputs, j, self.eval_masks(j), self.cfg.train.s_test,
                                    rng=self.rngs["eval"], deterministic=self.cfg.mode == "naive")
                score = net.accuracy(probs, test.labels)
            self.R[after, j] = score
            row.append(score)
        return row


def run_stream(learner: ContinualLearner, stream: TaskStream, start: int = 0,
               on_task: Callable[[int, list[float]], None] | None = None) -> ResultMatrix:
    for t in range(start, len(stream)):
        learner.train_task(t, stream[t])
        eval_model = learner.coreset_predict_pass() if learner.cfg.problem == "supervised" else learner.model
        row = learner.evaluate(stream, t, eval_model)
        log.info("task %d done: %s", t + 1, " ".join(f"{v:.4f}" for v in row))
        if on_task is not None:
            on_task(t, row)
    return learner.R


def run_baseline(mode: str, stream: TaskStream, cfg: ExperimentConfig) -> ResultMatrix:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    cfg = cfg.replace(mode=mode)
    learner = ContinualLearner(cfg, stream[0].train.inputs.shape[1], len(stream))
    return run_stream(learner, stream)
