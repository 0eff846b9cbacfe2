"""File emission: PGM sample grids, metrics/structure CSVs and R.json."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

SEPARATOR = 255

METRICS_COLUMNS = ("after_task", "eval_task", "accuracy", "mode", "seed")
ELBO_COLUMNS = ("after_task", "eval_task", "elbo", "mode", "seed")
STRUCTURE_COLUMNS = ("layer", "task_a", "task_b", "sharing", "filled")


def tile(images, rows: int, cols: int) -> np.ndarray:
    """Row-major tiling of (n, h, w) images with 1-pixel separators; empty cells stay 0."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise ValueError("images must be (n, h, w)")
    n, h, w = images.shape
    if n > rows * cols:
        raise ValueError(f"{n} images do not fit a {rows}x{cols} grid")
    if np.any(images < 0) or np.any(images > 1):
        raise ValueError("pixels must lie in [0, 1]")
    grid = np.full((rows * h + rows - 1, cols * w + cols - 1), SEPARATOR, dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            cell = np.rint(images[i] * 255).astype(np.uint8) if i < n else np.zeros((h, w), np.uint8)
            grid[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = cell
    return grid


def emit_pgm(images, rows: int, cols: int, path) -> Path:
    grid = tile(images, rows, cols)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode()
    path.write_bytes(header + grid.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    """Binary PGM -> uint8 array (height, width)."""
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos)
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end].decode())
        pos = end
    if tokens[0] != "P5" or tokens[3] != "255":
        raise ValueError("only 8-bit P5 files are supported")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(blob[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


class CsvLog:
    """Append-and-flush CSV so a crash leaves every finished row on disk."""

    def __init__(self, path, columns, fresh: bool = True):
        self.path = Path(path)
        self.columns = columns
        if fresh or not self.path.exists():
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(columns)

    def append(self, *row):
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(v) for v in row])

    def truncate_after(self, after_task: int):
        """Keep only rows whose first column is <= ``after_task``."""
        with self.path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= after_task]
        with self.path.open("w", newline="") as fh:
            csv.writer(fh).writerows(keep)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_structure_csv(path, report: list[dict]):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STRUCTURE_COLUMNS)
        for layer in report:
            n = len(layer["filled"])
            for a in range(n):
                for b in range(n):
                    w.writerow([layer["layer"], a + 1, b + 1, _fmt(layer["sharing"][a, b]),
                                _fmt(layer["filled"][a])])


def write_result_json(path, R, kind: str, mode: str, seed: int, summary: dict | None):
    payload = {"kind": kind, "mode": mode, "seed": seed, "R": R.to_json(), "metrics": summary}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
