"""Replicated experiments with CSV/JSON artifacts.

An experiment runs one algorithm on one problem for every stage count in a
sweep and every replicate, certifies the Moreau stationarity of all stage
points, and writes

``records.csv``
    one row per (S, replicate); floats with 17 significant digits.
``summary.json``
    per-S mean and standard error of the stationarity measures and the
    log-log rate fit of the weighted measure against S.
``manifest.json``
    the resolved configuration, its hash, package versions and seeds.
``timings.csv``
    wall-clock seconds per row, kept apart so that ``records.csv`` is a
    pure function of the manifest.
``plot_data.csv`` (optional)
    S with mean and standard error columns.

Stage streams depend only on (seed, stage index), so each replicate is run
once with the largest S and the smaller S values are read off as prefixes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import metadata as importlib_metadata
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .diagnostics import DEFAULT_TOL, fit_rate, moreau_gradient
from .errors import ParameterError, StagewiseError
from .problems import FAMILIES, ProblemInstance, make_problem
from .stagewise import (
    BASELINES,
    BaselineParams,
    StageConfig,
    baseline_run,
    run_stagewise,
    sampling_probs,
)

ALGORITHMS = {
    "stagewise-sgd": "sgd",
    "stagewise-shb": "shb",
    "stagewise-snag": "snag",
    "stagewise-adagrad": "adagrad",
    "stagewise-admm": "admm",
    **{b: b for b in BASELINES},
}

#: Default problem parameters per family; config values override them.
PROBLEM_DEFAULTS: dict[str, dict[str, Any]] = {
    "quadratic": {"d": 2},
    "phase-retrieval": {"d": 10, "n": 100, "domain": "ball", "radius": 2.0},
    "truncated-square": {"d": 10, "n": 100, "noise": 0.5},
    "scad-regression": {"d": 10, "n": 100, "noise": 0.1, "domain": "box", "lower": -5.0, "upper": 5.0},
    "mcp-regression": {"d": 10, "n": 100, "noise": 0.1, "domain": "box", "lower": -5.0, "upper": 5.0},
    "generalized-lasso": {"d": 20, "n": 100, "noise": 0.1, "lam1": 0.1},
}

# fields that do not influence the numbers (excluded from the hash)
_NON_RESULT_FIELDS = ("out", "workers", "plot_data")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce an experiment.

    For the single-loop baselines each entry of ``stages`` is the total
    iteration count T of the run, and ``eta0`` is the initial step.
    """

    problem: Mapping[str, Any]
    algo: str
    stages: tuple[int, ...]
    replicates: int = 1
    seed: int = 0
    gamma: float | None = None
    alpha: float = 1.0
    c: float = 1.0
    beta: float = 0.5
    rho: float | None = None
    c1: float = 1.0
    c2: float = 1.0
    alpha_c: float | None = None
    budget_mode: str = "theorem"
    eta0: float | None = None
    T0: float | None = None
    adagrad_cap: int = 1_000_000
    drop_factor: float = 0.1
    drop_points: tuple[int, ...] = ()
    tol: float = DEFAULT_TOL
    out: str = "runs"
    workers: int = 1
    plot_data: bool = False

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ParameterError(f"unknown algorithm {self.algo!r}; choose from {', '.join(ALGORITHMS)}")
        if "family" not in self.problem:
            raise ParameterError("missing required field 'problem' (the problem family)")
        if self.problem["family"] not in FAMILIES:
            raise ParameterError(f"unknown problem family {self.problem['family']!r}")
        stages = tuple(int(s) for s in self.stages)
        if not stages:
            raise ParameterError("field 'stages' must list at least one stage count")
        if any(s < 0 for s in stages) or any(b <= a for a, b in zip(stages, stages[1:])):
            raise ParameterError("field 'stages' must be non-negative and strictly increasing")
        if self.is_baseline and stages[0] < 1:
            raise ParameterError("baseline iteration counts must be >= 1")
        if self.is_baseline and (self.eta0 is None or not self.eta0 > 0):
            raise ParameterError("missing required field 'eta0' for a baseline")
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "drop_points", tuple(int(p) for p in self.drop_points))
        if int(self.replicates) < 1:
            raise ParameterError("field 'replicates' must be >= 1")
        if int(self.workers) < 1:
            raise ParameterError("field 'workers' must be >= 1")
        if not self.tol > 0:
            raise ParameterError("field 'tol' must be positive")
        object.__setattr__(self, "problem", dict(self.problem))
        if not self.is_baseline:
            self.stage_config(0, 0)  # validates the algorithm constants

    @property
    def variant(self) -> str:
        return ALGORITHMS[self.algo]

    @property
    def is_baseline(self) -> bool:
        return self.algo in BASELINES

    def stage_config(self, stages: int, seed: int) -> StageConfig:
        return StageConfig(
            variant=self.variant,
            stages=stages,
            gamma=self.gamma,
            weight_alpha=self.alpha,
            c=self.c,
            beta=self.beta,
            rho=self.rho,
            c1=self.c1,
            c2=self.c2,
            alpha_c=self.alpha_c,
            budget_mode=self.budget_mode,
            eta0=self.eta0,
            T0=self.T0,
            adagrad_cap=int(self.adagrad_cap),
            master_seed=seed,
        )

    def resolved_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["problem"] = {k: _jsonable(v) for k, v in sorted(self.problem.items())}
        d["stages"] = list(self.stages)
        d["drop_points"] = list(self.drop_points)
        return d

    def config_hash(self) -> str:
        d = self.resolved_dict()
        for k in _NON_RESULT_FIELDS:
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, tuple):
        return list(v)
    return v


def replicate_seed(master_seed: int, r: int) -> int:
    """Child seed of replicate ``r``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(0, int(r)))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class RunRecord:
    """One row of records.csv."""

    config_hash: str
    variant: str
    S: int
    replicate: int
    seed: int
    status: str
    total_inner_iterations: int
    selected_tau: int
    stationarity_selected: float
    stationarity_weighted: float
    final_objective: float
    flagged_stages: int
    wall_time: float = field(default=math.nan, metadata={"csv": False})

    @classmethod
    def csv_fields(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.metadata.get("csv", True)]


def _format(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def emit_csv(records: Sequence[RunRecord | Mapping[str, Any]], path, columns: Sequence[str] | None = None) -> None:
    """Header plus one row per record; UTF-8, comma separated, '\\n' newlines."""
    if columns is None:
        columns = RunRecord.csv_fields()
    rows = [asdict(r) if isinstance(r, RunRecord) else dict(r) for r in records]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_format(row[c]) for c in columns])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def build_problem(config: ExperimentConfig) -> ProblemInstance:
    return make_problem(dict(config.problem))


def _measure_gamma(config: ExperimentConfig, problem: ProblemInstance) -> float:
    if config.gamma is not None:
        return float(config.gamma)
    mu = problem.metadata.mu
    return 1.0 / (2.0 * mu) if mu > 0 else 1.0


def _failed(config, chash, S, r, seed, exc) -> RunRecord:
    msg = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
    return RunRecord(chash, config.algo, S, r, seed, msg, 0, -1, math.nan, math.nan, math.nan, 0)


def _run_replicate(config: ExperimentConfig, r: int) -> list[RunRecord]:
    chash = config.config_hash()
    seed = replicate_seed(config.seed, r)
    try:
        problem = build_problem(config)
    except StagewiseError as exc:
        return [_failed(config, chash, S, r, seed, exc) for S in config.stages]
    if config.is_baseline:
        return [_run_baseline(config, problem, chash, S, r, seed) for S in config.stages]

    t0 = time.perf_counter()
    try:
        full = run_stagewise(problem, config.stage_config(config.stages[-1], seed))
        norms = [moreau_gradient(problem, x, full.gamma, config.tol).moreau_grad_norm_sq
                 for x in full.stage_points]
    except (StagewiseError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return [_failed(config, chash, S, r, seed, exc) for S in config.stages]
    elapsed = time.perf_counter() - t0
    norms = np.array(norms)
    out = []
    for S in config.stages:
        tr = full.prefix(S, config.alpha)
        probs = sampling_probs(S, config.alpha).probs
        out.append(RunRecord(
            config_hash=chash,
            variant=config.algo,
            S=S,
            replicate=r,
            seed=seed,
            status="ok",
            total_inner_iterations=tr.total_inner_iterations,
            selected_tau=tr.selected_tau,
            stationarity_selected=float(norms[tr.selected_tau]),
            stationarity_weighted=float(np.dot(probs, norms[: S + 1])),
            final_objective=problem.objective(tr.stage_points[-1]),
            flagged_stages=len(tr.flagged_stages),
            wall_time=elapsed * (S / config.stages[-1] if config.stages[-1] else 1.0),
        ))
    return out


def _run_baseline(config, problem, chash, T, r, seed) -> RunRecord:
    t0 = time.perf_counter()
    try:
        params = BaselineParams(config.eta0, T, config.drop_factor, config.drop_points)
        tr = baseline_run(problem, config.algo, params, seed)
        gamma = _measure_gamma(config, problem)
        st = moreau_gradient(problem, tr.selected_point, gamma, config.tol).moreau_grad_norm_sq
    except (StagewiseError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return _failed(config, chash, T, r, seed, exc)
    return RunRecord(chash, config.algo, T, r, seed, "ok", tr.total_inner_iterations, tr.selected_tau,
                     st, st, problem.objective(tr.selected_point), 0, time.perf_counter() - t0)


def execute(config: ExperimentConfig, workers: int | None = None) -> list[RunRecord]:
    """All records, sorted by (S, replicate) independently of completion order."""
    workers = config.workers if workers is None else int(workers)
    reps = range(int(config.replicates))
    if workers <= 1:
        batches = [_run_replicate(config, r) for r in reps]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_run_replicate, [config] * len(reps), reps))
    records = [rec for batch in batches for rec in batch]
    records.sort(key=lambda rec: (rec.S, rec.replicate))
    return records


def _mean_stderr(values) -> tuple[float | None, float | None]:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return None, None
    mean = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return mean, se


def summarize(config: ExperimentConfig, records: Sequence[RunRecord]) -> dict[str, Any]:
    per_s = []
    for S in config.stages:
        ok = [r for r in records if r.S == S and r.status == "ok"]
        mw, sw = _mean_stderr([r.stationarity_weighted for r in ok])
        ms, ss = _mean_stderr([r.stationarity_selected for r in ok])
        mi, _ = _mean_stderr([r.total_inner_iterations for r in ok])
        per_s.append({
            "S": S,
            "n_ok": len(ok),
            "n_failed": sum(1 for r in records if r.S == S and r.status != "ok"),
            "weighted_mean": mw,
            "weighted_stderr": sw,
            "selected_mean": ms,
            "selected_stderr": ss,
            "iterations_mean": mi,
        })
    summary: dict[str, Any] = {"config_hash": config.config_hash(), "algo": config.algo, "per_S": per_s}
    for key, col in (("rate_fit", "weighted_mean"), ("rate_fit_selected", "selected_mean")):
        pts = [(p["S"], p[col]) for p in per_s if p["S"] > 0 and p[col] is not None and p[col] > 0]
        if len(pts) >= 3:
            fit = fit_rate([p[0] for p in pts], [p[1] for p in pts])
            summary[key] = asdict(fit)
        else:
            summary[key] = None
    return summary


def _versions() -> dict[str, str]:
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "numba", "artifact"):
        try:
            out[pkg] = importlib_metadata.version(pkg)
        except importlib_metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_jsonable) + "\n",
                    encoding="utf-8")


def _nan_to_none(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def run_experiment(config: ExperimentConfig, workers: int | None = None) -> Path:
    """Run the sweep, write the artifacts and return the manifest path."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    records = execute(config, workers)
    emit_csv(records, out / "records.csv")
    emit_csv(records, out / "timings.csv", ["S", "replicate", "status", "wall_time"])
    summary = summarize(config, records)
    _dump_json(_nan_to_none(summary), out / "summary.json")
    if config.plot_data:
        rows = [{k: (math.nan if v is None else v) for k, v in p.items()} for p in summary["per_S"]]
        emit_csv(rows, out / "plot_data.csv",
                 ["S", "weighted_mean", "weighted_stderr", "selected_mean", "selected_stderr", "iterations_mean"])
    resolved = config.resolved_dict()
    manifest = {
        "config": {k: v for k, v in resolved.items() if k not in _NON_RESULT_FIELDS},
        # the output directory is where this file lives, so it is not recorded
        "execution": {k: resolved[k] for k in _NON_RESULT_FIELDS if k != "out"},
        "config_hash": config.config_hash(),
        "versions": _versions(),
        "replicate_seeds": [replicate_seed(config.seed, r) for r in range(config.replicates)],
        "files": ["records.csv", "summary.json", "timings.csv"] + (["plot_data.csv"] if config.plot_data else []),
    }
    path = out / "manifest.json"
    _dump_json(manifest, path)
    return path


def all_failed(path) -> bool:
    rows = read_csv(Path(path).parent / "records.csv")
    return bool(rows) and all(r["status"] != "ok" for r in rows)
