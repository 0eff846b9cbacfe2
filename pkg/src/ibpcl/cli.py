"""Command line: ``ibpcl run|resume|report|gradcheck``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import yaml

from ibpcl import gradcheck, runner
from ibpcl.autodiff import NumericError
from ibpcl.checkpoint import CheckpointError
from ibpcl.config import ConfigError, Loader, load_config
from ibpcl.data import IdxFormatError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ibpcl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per task")
    sub = p.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="train a task stream from a YAML config")
    run.add_argument("config")
    run.add_argument("--out", help="run directory (default: output_dir from the config)")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config field, e.g. --set train.epochs=2")
    run.add_argument("--stop-after", type=int, help="stop after this many tasks (checkpoint kept)")

    res = sub.add_parser("resume", help="continue a run from a task checkpoint")
    res.add_argument("checkpoint")
    res.add_argument("--out", help="run directory (default: the checkpoint's run directory)")

    rep = sub.add_parser("report", help="recompute ACC/FWT/BWT and structure statistics of a run")
    rep.add_argument("run_dir")
    rep.add_argument("--json", action="store_true", help="print machine-readable JSON")

    gc = sub.add_parser("gradcheck", help="finite-difference checks of autodiff and both ELBOs")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--all", action="store_true", help="print every individual check")
    return p


def _apply_overrides(cfg, pairs):
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        cfg = cfg.override(key.strip(), yaml.load(raw, Loader=Loader))
    return cfg


def _print_summary(result):
    if result.summary is not None:
        s = result.summary
        fwt = "n/a" if s["FWT"] is None else f"{s['FWT']:.4f}"
        print(f"ACC {s['ACC']:.4f}  BWT {s['BWT']:+.4f}  FWT {fwt}")
    print(f"outputs in {result.out_dir}")


def _report(args) -> int:
    rep = runner.report(args.run_dir)
    if args.json:
        for layer in rep.get("structure", []):
            layer["sharing"] = layer["sharing"].tolist()
        print(json.dumps(rep, indent=2))
        return EXIT_OK
    print(f"{rep['tasks']} tasks ({rep['kind']})")
    for k, v in rep["metrics"].items():
        print(f"  {k}: {v}")
    for layer in rep.get("structure", []):
        filled = " ".join(f"{f:.3f}" for f in layer["filled"])
        active = " ".join(f"{a:.3f}" for a in layer["active"])
        print(f"  layer {layer['layer']}: active per task {active}; filled {filled}")
    return EXIT_OK


def _gradcheck(args) -> int:
    checks = gradcheck.run_all(args.seed)
    for c in checks:
        if args.all or not c.ok:
            print(f"  {'ok  ' if c.ok else 'FAIL'} {c.suite:16s} {c.name:32s} {c.error:.3e}")
    for suite, (err, tol) in gradcheck.summarize(checks).items():
        print(f"{suite:16s} max relative error {err:.3e} (tol {tol:g}) {'PASS' if err < tol else 'FAIL'}")
    return EXIT_OK if all(c.ok for c in checks) else EXIT_NUMERIC


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.verb == "run":
            cfg = _apply_overrides(load_config(args.config), args.set)
            _print_summary(runner.run_experiment(cfg, args.out, args.stop_after))
        elif args.verb == "resume":
            _print_summary(runner.resume_experiment(args.checkpoint, args.out))
        elif args.verb == "report":
            return _report(args)
        else:
            return _gradcheck(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, IdxFormatError, CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e} (state saved to checkpoints/abort.ckpt)", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK
