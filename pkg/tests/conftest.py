import pytest

from ibpcl.config import parse_config
from ibpcl.runner import build_stream

TINY = """
seed: {seed}
mode: {mode}
stream:
  source: synthetic
  kind: split
  pairs: [[0, 1], [2, 3], [4, 5]]
  synthetic:
    kind: gauss-blobs
    n_classes: 6
    dim: 16
    n_per_class: 200
    test_per_class: 20
    separation: 10.0
model:
  hidden: [64]
train:
  batch_size: 8
  epochs: 3
  finetune_epochs: 1
  s_train: 2
  s_test: 5
"""


def tiny_config(mode="npbcl", seed=1, **overrides):
    cfg = parse_config(TINY.format(mode=mode, seed=seed))
    for key, value in overrides.items():
        cfg = cfg.override(key.replace("__", "."), value)
    return cfg


@pytest.fixture
def tiny():
    return tiny_config


@pytest.fixture
def tiny_stream():
    return build_stream(tiny_config())


# acceptance lines: recorded by tests/test_acceptance.py, echoed after the run
ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])


@pytest.fixture
def criterion(request, capsys):
    """``criterion(n, checks)`` records one PASS/FAIL line and fails the test on any failed check."""

    def record(n: int, checks: list[tuple[str, bool, str]]):
        ok = all(c[1] for c in checks)
        detail = "; ".join(f"{name}: {'ok' if good else 'FAILED'} ({info})" for name, good, info in checks)
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}"
        request.config.stash[ACCEPTANCE][n] = line
        with capsys.disabled():
            print("\n" + line)
        failed = [c[0] for c in checks if not c[1]]
        assert ok, f"criterion {n} failed: {', '.join(failed)}"

    return record
