"""Command line entry point ``stagewise-bench``.

Precedence: family defaults < config file < ``--set`` pairs < named flags.
The config file holds ``key = value`` lines; ``#`` starts a comment.
Problem parameters use a ``problem.`` prefix, e.g. ``problem.d = 10``.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

from .errors import ParameterError, StagewiseError
from .harness import ALGORITHMS, PROBLEM_DEFAULTS, ExperimentConfig, all_failed, run_experiment

EXIT_OK, EXIT_ALL_FAILED, EXIT_USAGE = 0, 1, 2

_CONFIG_KEYS = {f.name for f in fields(ExperimentConfig)}
_TUPLE_KEYS = {"stages", "drop_points"}


def parse_value(text: str) -> Any:
    """int, float, bool, None, comma list, or the stripped string."""
    text = text.strip()
    if "," in text:
        return tuple(parse_value(t) for t in text.split(",") if t.strip())
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def read_config_file(path) -> dict[str, Any]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stagewise-bench", description="Run stagewise optimization experiments.")
    p.add_argument("--config", help="key = value text file")
    p.add_argument("--algo", choices=list(ALGORITHMS), help="algorithm name")
    p.add_argument("--problem", choices=list(PROBLEM_DEFAULTS), help="problem family")
    p.add_argument("--stages", help="comma separated stage counts, e.g. 8,16,32")
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float, help="stage weight exponent")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int)
    p.add_argument("--tol", type=float, help="prox tolerance for the stationarity certificate")
    p.add_argument("--plot-data", action="store_true", help="also write plot_data.csv")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="any config key, e.g. --set c=0.05 --set problem.d=20")
    p.add_argument("--list-problems", action="store_true", help="print problem families and exit")
    p.add_argument("--list-algos", action="store_true", help="print algorithm names and exit")
    return p


def _merge(values: dict[str, Any], parser) -> ExperimentConfig:
    problem: dict[str, Any] = {}
    top: dict[str, Any] = {}
    for key, value in values.items():
        if key.startswith("problem."):
            problem[key[len("problem."):]] = value
        elif key == "problem":
            problem["family"] = value
        elif key in _CONFIG_KEYS:
            top[key] = value
        else:
            parser.error(f"unknown config key {key!r}")
    for key in ("algo", "stages"):
        if top.get(key) is None:
            parser.error(f"missing required field {key!r}")
    if problem.get("family") is None:
        parser.error("missing required field 'problem'")
    family = problem["family"]
    if family not in PROBLEM_DEFAULTS:
        parser.error(f"unknown problem {family!r}; choose from {', '.join(PROBLEM_DEFAULTS)}")
    if top["algo"] not in ALGORITHMS:
        parser.error(f"unknown algorithm {top['algo']!r}; choose from {', '.join(ALGORITHMS)}")
    top["problem"] = {**PROBLEM_DEFAULTS[family], **problem}
    for key in _TUPLE_KEYS:
        if key in top and not isinstance(top[key], tuple):
            top[key] = (top[key],)
    try:
        return ExperimentConfig(**top)
    except (ParameterError, TypeError) as exc:
        parser.error(str(exc))


def parse_cli(args: Sequence[str] | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from command line arguments.

    Usage errors print a message and raise ``SystemExit(2)``.
    """
    parser = build_parser()
    ns = parser.parse_args(args)
    values: dict[str, Any] = {}
    if ns.config:
        try:
            values.update(read_config_file(ns.config))
        except (OSError, ParameterError) as exc:
            parser.error(str(exc))
    for item in ns.set:
        if "=" not in item:
            parser.error(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = parse_value(value)
    if ns.stages is not None:
        values["stages"] = parse_value(ns.stages)
    flags = {"algo": ns.algo, "problem": ns.problem, "replicates": ns.replicates, "seed": ns.seed,
             "gamma": ns.gamma, "alpha": ns.alpha, "out": ns.out, "workers": ns.workers, "tol": ns.tol}
    values.update({k: v for k, v in flags.items() if v is not None})
    if ns.plot_data:
        values["plot_data"] = True
    return _merge(values, parser)


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        ns, _ = build_parser().parse_known_args(argv)
        if ns.list_problems or ns.list_algos:
            if ns.list_problems:
                for name, defaults in PROBLEM_DEFAULTS.items():
                    extra = " ".join(f"{k}={v}" for k, v in defaults.items())
                    print(f"{name}  {extra}")
            if ns.list_algos:
                for name in ALGORITHMS:
                    print(name)
            return EXIT_OK
        config = parse_cli(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        manifest = run_experiment(config)
    except (StagewiseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALL_FAILED
    print(manifest)
    return EXIT_ALL_FAILED if all_failed(manifest) else EXIT_OK
