"""Experiment configuration: YAML text -> validated, fully-defaulted dataclasses.

Every field has a default, so an empty file is a valid config. Unknown keys,
type mismatches and out-of-range values raise :class:`ConfigError` carrying
the offending line number.
"""

from __future__ import annotations

import dataclasses
import os
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

OUTPUT_ROOT_ENV = "IBPCL_OUTPUT_ROOT"


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _f(default, lo=None, hi=None, open_lo=False, choices=None):
    meta = {"lo": lo, "hi": hi, "open_lo": open_lo, "choices": choices}
    if isinstance(default, (list, tuple)) or dataclasses.is_dataclass(default):
        return field(default_factory=lambda: default, metadata=meta)
    return field(default=default, metadata=meta)


@dataclass(frozen=True)
class SyntheticConfig:
    kind: str = _f("gauss-blobs", choices=("gauss-blobs", "two-moons", "cluster-images"))
    n_classes: int = _f(10, lo=1)
    n_per_class: int = _f(100, lo=1)
    test_per_class: int = _f(50, lo=1)
    dim: int = _f(2, lo=1)
    separation: float = _f(4.0, lo=0.0)
    spread: float = _f(1.0, lo=0.0, open_lo=True)
    noise: float = _f(0.1, lo=0.0)


@dataclass(frozen=True)
class IdxConfig:
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    downsample: int = _f(8, lo=0)  # 0 keeps the native resolution


@dataclass(frozen=True)
class StreamConfig:
    source: str = _f("digits", choices=("digits", "idx", "synthetic"))
    kind: str = _f("split", choices=("split", "permuted", "by-class"))
    pairs: tuple = _f(((0, 1), (2, 3), (4, 5), (6, 7), (8, 9)))
    n_tasks: int = _f(5, lo=1)
    classes: tuple = _f(())  # by-class streams: which classes, empty = all
    train_cap: int = _f(500, lo=1)
    test_cap: int = _f(200, lo=1)
    data_seed: int = _f(0, lo=0)
    idx: IdxConfig = _f(IdxConfig())
    synthetic: SyntheticConfig = _f(SyntheticConfig())


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = _f((200,))
    encoder: tuple = _f((500, 500))
    latent: int = _f(100, lo=1)
    dynamic_expansion: bool = False
    initial_width: int = _f(50, lo=1)
    expansion_reserve: int = _f(10, lo=1)


@dataclass(frozen=True)
class PriorConfig:
    alpha: float = _f(30.0, lo=0.0, open_lo=True)
    sigma0: float = _f(0.6, lo=0.0, open_lo=True)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = _f(0.001, lo=0.0, open_lo=True)
    lr_ibp: float = _f(0.01, lo=0.0, open_lo=True)
    lr_finetune: float = _f(0.0001, lo=0.0, open_lo=True)
    temperature_start: float = _f(10.0, lo=0.0, open_lo=True)
    temperature_end: float = _f(0.25, lo=0.0, open_lo=True)
    epochs: int = _f(5, lo=1)
    finetune_epochs: int = _f(5, lo=0)
    ml_init_epochs: int = _f(1, lo=0)
    batch_size: int = _f(64, lo=1)
    s_train: int = _f(10, lo=1)
    s_test: int = _f(100, lo=1)
    init_sigma: float = _f(0.01, lo=0.0, open_lo=True)
    init_std: float = _f(0.1, lo=0.0)


@dataclass(frozen=True)
class CoresetConfig:
    method: str = _f("none", choices=("none", "random", "kcenter"))
    size: int = _f(50, lo=0)
    epochs: int = _f(5, lo=1)
    lr: float = _f(0.001, lo=0.0, open_lo=True)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = _f("npbcl", choices=("npbcl", "vcl", "naive"))
    problem: str = _f("supervised", choices=("supervised", "vae"))
    seed: int = _f(1, lo=0)
    output_dir: str = "runs/default"
    samples_per_task: int = _f(10, lo=1)  # VAE grid columns
    stream: StreamConfig = _f(StreamConfig())
    model: ModelConfig = _f(ModelConfig())
    prior: PriorConfig = _f(PriorConfig())
    train: TrainConfig = _f(TrainConfig())
    coreset: CoresetConfig = _f(CoresetConfig())

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def override(self, dotted: str, value) -> "ExperimentConfig":
        """Return a copy with ``a.b.c`` set to ``value`` (validated)."""
        return parse_config(dump_config(_override(self, dotted, value)))

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


def _override(obj, dotted, value):
    head, _, rest = dotted.partition(".")
    if head not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown key {head!r}")
    new = value if not rest else _override(getattr(obj, head), rest, value)
    return dataclasses.replace(obj, **{head: new})


# --- parsing ---------------------------------------------------------------------------

class Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot (``1e-3``)."""


Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                |\.[0-9_]+(?:[eE][-+][0-9]+)?
                |[-+]?\.(?:inf|Inf|INF)
                |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))

_loader = Loader("")


def _line(node) -> int:
    return node.start_mark.line + 1


def _scalar(node):
    return _loader.construct_object(node, deep=True)


def _typecheck(value, tp, name, node):
    line = _line(node)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}", line)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}", line)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}", line)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}", line)
        return value
    raise AssertionError(tp)


def _int_tuple(value, name, node, nested=False):
    line = _line(node)
    if not isinstance(value, list):
        raise ConfigError(f"{name}: expected a list, got {value!r}", line)
    out = []
    for item in value:
        if nested:
            out.append(_int_tuple(item, name, node))
        else:
            if isinstance(item, bool) or not isinstance(item, int) or item < 0:
                raise ConfigError(f"{name}: expected non-negative integers, got {item!r}", line)
            out.append(item)
    return tuple(out)


def _check_range(value, f, name, node):
    meta = f.metadata
    line = _line(node)
    if meta.get("choices") and value not in meta["choices"]:
        raise ConfigError(f"{name}: {value!r} is not one of {', '.join(meta['choices'])}", line)
    lo, hi = meta.get("lo"), meta.get("hi")
    if lo is not None and (value < lo or (meta.get("open_lo") and value == lo)):
        bound = ">" if meta.get("open_lo") else ">="
        raise ConfigError(f"{name}: out of range, must be {bound} {lo}, got {value!r}", line)
    if hi is not None and value > hi:
        raise ConfigError(f"{name}: out of range, must be <= {hi}, got {value!r}", line)


_TUPLE_FIELDS = {"pairs": True, "classes": False, "hidden": False, "encoder": False}


def _build(cls, node, prefix: str):
    if node is None or (isinstance(node, yaml.ScalarNode) and node.tag == "tag:yaml.org,2002:null"):
        return cls()
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping", _line(node))
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key_node, val_node in node.value:
        key = key_node.value
        name = f"{prefix}{key}"
        if key not in fields:
            raise ConfigError(f"unknown key {name!r}", _line(key_node))
        if key in kwargs:
            raise ConfigError(f"duplicate key {name!r}", _line(key_node))
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            kwargs[key] = _build(tp, val_node, name + ".")
            continue
        value = _scalar(val_node)
        if key in _TUPLE_FIELDS:
            value = _int_tuple(value, name, val_node, nested=_TUPLE_FIELDS[key])
            if key in ("hidden", "encoder") and (not value or min(value) < 1):
                raise ConfigError(f"{name}: out of range, widths must be >= 1", _line(val_node))
            if key == "pairs" and any(len(p) < 2 for p in value):
                raise ConfigError(f"{name}: each entry needs at least 2 classes", _line(val_node))
        else:
            value = _typecheck(value, tp, name, val_node)
            _check_range(value, fields[key], name, val_node)
        kwargs[key] = value
    return cls(**kwargs)


def parse_config(text: str) -> ExperimentConfig:
    try:
        root = yaml.compose(text, Loader=Loader)
    except yaml.MarkedYAMLError as e:
        line = e.problem_mark.line + 1 if e.problem_mark is not None else None
        raise ConfigError(f"malformed YAML: {e.problem}", line) from None
    cfg = _build(ExperimentConfig, root, "")
    if cfg.train.temperature_end > cfg.train.temperature_start:
        raise ConfigError("train.temperature_end: out of range, must not exceed temperature_start")
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def dump_config(cfg: ExperimentConfig) -> str:
    """Resolved config as YAML; ``parse_config(dump_config(c)) == c``."""
    return yaml.safe_dump(_plain(cfg), sort_keys=False, default_flow_style=None)
