"""Versioned checkpoint container and learner (de)serialisation.

Layout: 8-byte magic, 8-byte big-endian header length, a JSON header
(sorted keys, compact separators), then the raw little-endian array
payloads in header order. Equal states therefore encode to equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IBPCLCK1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])  # ascontiguousarray would promote 0-d to 1-d
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8")
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8")
        else:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": VERSION, "arrays": entries, "meta": meta},
                        sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack(">Q", len(header)) + header + b"".join(chunks)


def decode(blob: bytes):
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack(">Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        raw = blob[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{e['name']}: truncated payload")
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(tuple(e["shape"])).copy()
    return arrays, header["meta"]


def save(path, arrays, meta):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(arrays, meta))
    tmp.replace(path)


def load(path):
    return decode(Path(path).read_bytes())


# --- learner state ---------------------------------------------------------------------

def learner_state(learner) -> tuple[dict, dict]:
    from ibpcl.config import dump_config

    arrays = {}
    for layer in learner.model.all_layers():
        for k, v in layer.params.items():
            arrays[f"param/{layer.name}/{k}"] = v
    for t, masks in learner.masks.items():
        for i, m in enumerate(masks):
            arrays[f"mask/{t}/{i}"] = m
    for name, prior in learner.priors.gaussian.items():
        for k, v in prior.items():
            arrays[f"prior/{name}/{k}"] = v
    for k, v in learner.optimizer.state_arrays().items():
        arrays[f"adam/{k}"] = v
    for t in learner.coreset.inputs:
        arrays[f"coreset/{t}/x"] = learner.coreset.inputs[t]
        arrays[f"coreset/{t}/y"] = learner.coreset.labels[t]
    meta = {
        "config": dump_config(learner.cfg),
        "d_in": int(learner.d_in),
        "n_tasks": int(learner.R.n),
        "tasks_done": int(learner.tasks_done),
        "n_classes": {str(t): int(n) for t, n in learner.n_classes.items()},
        "layer_alpha": {layer.name: float(layer.alpha) for layer in learner.model.ibp_layers},
        "prior_alpha": {k: float(v) for k, v in learner.priors.alpha.items()},
        "R": learner.R.to_json(),
        "rng": learner.rngs.state(),
    }
    return arrays, meta


def restore_learner(arrays: dict, meta: dict):
    from ibpcl.cl import ContinualLearner, ResultMatrix
    from ibpcl.config import parse_config

    cfg = parse_config(meta["config"])
    learner = ContinualLearner(cfg, meta["d_in"], meta["n_tasks"])
    for t, n in sorted((int(t), n) for t, n in meta["n_classes"].items()):
        learner.model.add_head(t, n, np.random.default_rng(0))
        learner.n_classes[t] = n
    layers = {layer.name: layer for layer in learner.model.all_layers()}
    for key, arr in arrays.items():
        kind, rest = key.split("/", 1)
        if kind == "param":
            name, k = rest.rsplit("/", 1)
            layers[name].params[k] = arr
        elif kind == "mask":
            t, i = (int(s) for s in rest.split("/"))
            learner.masks.setdefault(t, {})[i] = arr
        elif kind == "prior":
            name, k = rest.rsplit("/", 1)
            learner.priors.gaussian.setdefault(name, {})[k] = arr
        elif kind == "coreset":
            t, k = rest.split("/")
            (learner.coreset.inputs if k == "x" else learner.coreset.labels)[int(t)] = arr
    learner.masks = {t: [m[i] for i in sorted(m)] for t, m in learner.masks.items()}
    learner.optimizer.load_state_arrays({k[5:]: v for k, v in arrays.items() if k.startswith("adam/")})
    for layer in learner.model.ibp_layers:
        layer.alpha = meta["layer_alpha"][layer.name]
    learner.priors.alpha = dict(meta["prior_alpha"])
    learner.R = ResultMatrix.from_json(meta["R"])
    learner.tasks_done = meta["tasks_done"]
    learner.rngs.set_state(meta["rng"])
    return learner


def save_learner(path, learner):
    save(path, *learner_state(learner))


def load_learner(path):
    return restore_learner(*load(path))
