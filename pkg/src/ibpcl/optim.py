"""Adam over a dict of named numpy arrays."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam with per-parameter step counters.

    Moments are keyed by parameter name, so a parameter that is not stepped
    (a frozen head, a fixed mask) keeps both its value and its moments. When a
    parameter grows (dynamic expansion) its moments are zero-padded.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def _state(self, name: str, shape):
        m = self.m.get(name)
        if m is None:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
            self.t[name] = 0
        elif m.shape != shape:
            for store in (self.m, self.v):
                old = store[name]
                grown = np.zeros(shape)
                grown[tuple(slice(0, s) for s in old.shape)] = old
                store[name] = grown
        return self.m[name], self.v[name]

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lrs: dict[str, float],
             where: dict[str, np.ndarray] | None = None):
        """Update ``params[name]`` in place for every name in ``grads``.

        ``where`` optionally maps a name to a 0/1 array: entries at 0 keep both
        their value and their moments, so stale momentum cannot move them.
        """
        for name, g in grads.items():
            p = params[name]
            m, v = self._state(name, p.shape)
            self.t[name] += 1
            t = self.t[name]
            new_m = self.beta1 * m + (1 - self.beta1) * g
            new_v = self.beta2 * v + (1 - self.beta2) * g * g
            step = lrs[name] * (new_m / (1 - self.beta1 ** t)) / (np.sqrt(new_v / (1 - self.beta2 ** t)) + self.eps)
            mask = None if where is None else where.get(name)
            if mask is None:
                m[...], v[...] = new_m, new_v
                p -= step
            else:
                on = np.broadcast_to(np.asarray(mask) != 0, p.shape)
                m[on], v[on] = new_m[on], new_v[on]
                p[on] -= step[on]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.m):
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
            out[f"t/{name}"] = np.array(self.t[name], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.m, self.v, self.t = {}, {}, {}
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            if kind == "m":
                self.m[name] = np.array(arr, dtype=np.float64)
            elif kind == "v":
                self.v[name] = np.array(arr, dtype=np.float64)
            else:
                self.t[name] = int(arr)
