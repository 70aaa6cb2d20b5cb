"""Command-line driver.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error, 3 a diagnostic
tolerance was violated.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from deflect.config import ConfigErrors, load_config
from deflect.data import SyntheticTaskSpec, generate_dataset, write_dataset
from deflect.vit import ConfigError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_TOLERANCE = 0, 1, 2, 3
THREADS_ENV = "DEFLECT_THREADS"

log = logging.getLogger("deflect")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deflect", description="Multispectral adaptation of RGB vision transformers.")
    p.add_argument("--threads", type=int, default=None, help=f"cap BLAS worker threads (fallback: ${THREADS_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic multispectral dataset")
    g.add_argument("--spec", required=True, help="JSON file with synthetic task fields")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train one method as configured")
    t.add_argument("--config", required=True)

    e = sub.add_parser("eval", help="evaluate a saved adapter checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)

    d = sub.add_parser("diagnose", help="run a diagnostic suite")
    d.add_argument("--config", required=True)
    d.add_argument("--suite", required=True, choices=("algebra", "norms", "gradients", "budget"))
    d.add_argument("--checkpoint", default=None, help="trained checkpoint for the norms suite")
    return p


def resolve_threads(flag: int | None) -> int | None:
    if flag is not None:
        if flag < 1:
            raise UsageError("--threads must be >= 1")
        return flag
    env = os.environ.get(THREADS_ENV)
    if not env:
        return None
    try:
        n = int(env)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    return n


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _config(path):
    if not Path(path).exists():
        raise UsageError(f"{path}: no such file")
    return load_config(path)


def cmd_generate(args) -> int:
    raw = _read_json(args.spec)
    if not isinstance(raw, dict):
        raise UsageError(f"{args.spec}: expected a JSON object")
    try:
        spec = SyntheticTaskSpec(**raw)
    except TypeError as exc:
        raise UsageError(f"{args.spec}: {exc}") from None
    splits = generate_dataset(spec, args.seed)
    write_dataset(splits, args.out)
    print(json.dumps({name: len(s) for name, s in splits.items()}))
    return EXIT_OK


def cmd_train(args) -> int:
    from deflect.experiment import run_training

    summary = run_training(_config(args.config))
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    from deflect.experiment import run_eval

    if not Path(args.checkpoint).exists():
        raise UsageError(f"{args.checkpoint}: no such file")
    print(json.dumps(run_eval(_config(args.config), args.checkpoint), indent=2))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from deflect.diagnostics import run_suite
    from deflect.experiment import build_experiment, load_trained

    cfg = _config(args.config)
    model = data = reference = None
    if args.suite == "norms":
        if args.checkpoint:
            model, data = load_trained(cfg, args.checkpoint)
            reference = build_experiment(cfg, data)[0].frozen_encoder()
        else:
            model, data = build_experiment(cfg)
    result = run_suite(args.suite, cfg, model, data, reference)
    print("\n".join(result.lines))
    if result.violations:
        print(f"{args.suite}: {len(result.violations)} tolerance violation(s)", file=sys.stderr)
        for v in result.violations:
            print(f"  {v}", file=sys.stderr)
        return EXIT_TOLERANCE
    print(f"{args.suite}: all checks passed")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = resolve_threads(args.threads)
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except ConfigErrors as exc:
        print(f"config error ({len(exc.errors)}):", file=sys.stderr)
        for line in exc.errors:
            print(f"  {line}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
