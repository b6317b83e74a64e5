"""Stagewise proximal-point driver.

Stage s builds the convex subproblem

    f_s(x) = phi(x) + 1/(2 gamma) ||x - x_{s-1}||^2,

runs an inner solver on it from x_{s-1} with the variant's stage-s step
size and budget, and feeds the averaged output x_s forward.  After S
stages the returned point is x_tau with P(tau) proportional to
w_{tau+1} = (tau + 1)^alpha, tau = 0..S.

Every stage owns a random stream keyed by (master seed, s), so a run with S
stages is a prefix of any run with more stages and the same seed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, NamedTuple

import numpy as np

from .errors import (
    ConvexityError,
    ParameterError,
    StagewiseError,
    UnsupportedDomainError,
    UnsupportedError,
)
from .problems import ProblemInstance
from .solvers import (
    AdmmParams,
    MomentumParams,
    ProxSubproblem,
    SolverReport,
    _sgd_run,
    adagrad_solve,
    admm_solve,
    sgd_solve,
    sum_solve,
)

VARIANTS = ("sgd", "shb", "snag", "adagrad", "admm")
MOMENTUM_RHO = {"shb": 0.0, "snag": 1.0}
BUDGET_MODES = ("theorem", "practical")
BASELINES = ("sgd-theory-decay", "sgd-constant", "fixed-frequency-decay")

# stream keys under the master seed
_STAGE_KEY, _SELECT_KEY, _BASELINE_KEY = 1, 2, 3


def _ceil(v: float) -> int:
    """Ceiling that ignores floating-point fuzz just above an integer."""
    r = round(v)
    if abs(v - r) <= 1e-9 * max(1.0, abs(v)):
        return int(r)
    return int(math.ceil(v))


def spectral_norm(A, tol: float = 1e-8, max_iter: int = 100_000) -> float:
    """Largest singular value of ``A`` by power iteration on A^T A.

    Stops when the eigen-residual ||A^T A v - lam v|| is below tol * lam.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if not np.any(A):
        return 0.0
    AtA = A.T @ A
    v = np.random.default_rng(0).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = AtA @ v
        lam = float(v @ w)
        if np.linalg.norm(w - lam * v) <= tol * lam:
            break
        v = w / np.linalg.norm(w)
    return math.sqrt(lam)


# relative headroom on ||A||^2 in the default alpha_c, covering the
# power-iteration error so that C >= I holds in floating point
_ALPHA_C_HEADROOM = 1e-6


# ---------------------------------------------------------------------------
# Configuration and schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageConfig:
    """Stagewise run configuration.

    Parameters
    ----------
    variant : {"sgd", "shb", "snag", "adagrad", "admm"}
    stages : int
        Number of stages S.
    gamma : float, optional
        Proximal parameter; defaults to 1/(2 mu), or 1 when mu = 0.
    weight_alpha : float
        Exponent of the stage weights w_s = s^alpha.
    c : float
        SGD: eta_s = c/s, T_s = 12 gamma s / c.  AdaGrad: eta_s = c/sqrt(s),
        M_s = 24 gamma / eta_s.
    beta, rho : float
        Momentum constants; ``rho`` defaults to 0 for shb and 1 for snag.
        eta_s = (1 - beta) gamma / (96 s (rho beta + 1)),
        T_s = 2304 (rho beta + 1) s.
    c1, c2, alpha_c : float
        ADMM: eta_s = c1/s, penalty beta_s = c2 s,
        T_s = 24 s gamma max(alpha_c/c1, c2 ||A||_2^2).  ``alpha_c``
        defaults to 1 + c1 c2 ||A||_2^2 (with 1e-6 relative headroom), which
        keeps C >= I at every stage since eta_s beta_s = c1 c2.
    budget_mode : {"theorem", "practical"}
        "practical" uses eta_s = eta0/s and T_s = T0 s for SGD and momentum,
        and eta_s = eta0/sqrt(s) with the stop t > T0 sqrt(s max_i ||g_i||
        sum_i ||g_i||) for AdaGrad.
    adagrad_cap : int
        Per-stage iteration cap for AdaGrad.
    start : array_like, optional
        x_0; defaults to the instance's default start.
    master_seed : int
    matrix_norm : float, optional
        ||A||_2 of the ADMM penalty matrix; filled in by :meth:`resolve`.
    """

    variant: str
    stages: int
    gamma: float | None = None
    weight_alpha: float = 1.0
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
    start: Any = None
    master_seed: int = 0
    matrix_norm: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if int(self.stages) != self.stages or self.stages < 0:
            raise ParameterError(f"stages must be a non-negative integer, got {self.stages}")
        if not self.weight_alpha > 0:
            raise ParameterError("weight_alpha must be positive")
        if self.gamma is not None and not self.gamma > 0:
            raise ParameterError("gamma must be positive")
        if self.budget_mode not in BUDGET_MODES:
            raise ParameterError(f"unknown budget mode {self.budget_mode!r}")
        if self.budget_mode == "practical":
            if self.variant == "admm":
                raise ParameterError("ADMM has no practical budget mode")
            if self.eta0 is None or not self.eta0 > 0 or self.T0 is None or not self.T0 > 0:
                raise ParameterError("practical budget mode needs eta0 > 0 and T0 > 0")
        for name in ("c", "c1", "c2"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if not 0 <= self.beta < 1:
            raise ParameterError("beta must lie in [0, 1)")
        if self.adagrad_cap < 1:
            raise ParameterError("adagrad_cap must be >= 1")

    @property
    def momentum_rho(self) -> float:
        if self.rho is not None:
            return float(self.rho)
        return MOMENTUM_RHO.get(self.variant, 0.0)

    def resolve(self, problem: ProblemInstance) -> "StageConfig":
        """Fill in problem-dependent defaults and check the variant applies."""
        mu = problem.metadata.mu
        gamma = self.gamma
        if gamma is None:
            gamma = 1.0 / (2.0 * mu) if mu > 0 else 1.0
        if gamma * mu >= 1:
            raise ConvexityError(f"gamma * mu = {gamma * mu:.6g} >= 1")
        if self.variant in MOMENTUM_RHO and problem.domain.kind != "unconstrained":
            raise UnsupportedDomainError("momentum variants need an unconstrained domain")
        changes: dict[str, Any] = {"gamma": float(gamma)}
        if self.variant == "admm":
            if problem.family != "generalized-lasso":
                raise UnsupportedError("the ADMM variant needs a generalized-lasso instance")
            norm = spectral_norm(problem.penalty_matrix) if self.matrix_norm is None else self.matrix_norm
            changes["matrix_norm"] = float(norm)
            if self.alpha_c is None:
                changes["alpha_c"] = 1.0 + self.c1 * self.c2 * norm**2 * (1 + _ALPHA_C_HEADROOM)
        start = problem.default_start if self.start is None else self.start
        changes["start"] = problem.check_point(start).copy()
        return replace(self, **changes)


class Schedule(NamedTuple):
    """Stage-s constants: step size, budget (T_s, or M_s / T0 for AdaGrad) and weight."""

    eta: float
    budget: float
    weight: float


def schedule(config: StageConfig, s: int) -> Schedule:
    """The variant's step size, budget and weight at stage ``s``.

    ``config.gamma`` must be set (see :meth:`StageConfig.resolve`).  For
    AdaGrad the budget is M_s in theorem mode and T0 in practical mode;
    the per-stage cap is ``config.adagrad_cap``.
    """
    if s < 1:
        raise ParameterError(f"stage index must be >= 1, got {s}")
    if config.gamma is None:
        raise ParameterError("gamma is unresolved; call config.resolve(problem) first")
    gamma = config.gamma
    w = float(s) ** config.weight_alpha
    v = config.variant
    if config.budget_mode == "practical":
        if v == "adagrad":
            return Schedule(config.eta0 / math.sqrt(s), float(config.T0), w)
        return Schedule(config.eta0 / s, _ceil(config.T0 * s), w)
    if v == "sgd":
        return Schedule(config.c / s, _ceil(12.0 * gamma * s / config.c), w)
    if v in MOMENTUM_RHO:
        k = config.momentum_rho * config.beta + 1.0
        return Schedule((1.0 - config.beta) * gamma / (96.0 * s * k), _ceil(2304.0 * k * s), w)
    if v == "adagrad":
        eta = config.c / math.sqrt(s)
        return Schedule(eta, _ceil(24.0 * gamma / eta), w)
    # admm
    if config.matrix_norm is None or config.alpha_c is None:
        raise ParameterError("ADMM schedule needs the resolved matrix norm and alpha_c")
    eta = config.c1 / s
    T = 24.0 * s * gamma * max(config.alpha_c / config.c1, config.c2 * config.matrix_norm**2)
    return Schedule(eta, _ceil(T), w)


@dataclass(frozen=True)
class SamplingDistribution:
    """p_tau = w_{tau+1} / sum_k w_{k+1} over tau = 0..S."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 1 or len(p) == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ParameterError("probabilities must be non-negative and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def cumulative(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        c[-1] = 1.0
        return c

    def select(self, u: float) -> int:
        """Inverse-CDF lookup: the first tau with cumulative probability > u."""
        return int(np.searchsorted(self.cumulative, u, side="right"))

    def sample(self, rng: np.random.Generator, size: int | None = None):
        u = rng.random(size)
        if size is None:
            return self.select(u)
        return np.searchsorted(self.cumulative, u, side="right")


def sampling_probs(S: int, alpha: float) -> SamplingDistribution:
    if S < 0:
        raise ParameterError("S must be >= 0")
    if not alpha > 0:
        raise ParameterError("alpha must be positive")
    w = np.arange(1, S + 2, dtype=float) ** alpha
    return SamplingDistribution(w / w.sum())


def build_subproblem(problem: ProblemInstance, anchor, gamma: float) -> ProxSubproblem:
    """f(x) = phi(x) + 1/(2 gamma) ||x - anchor||^2; gamma * mu must be < 1."""
    return ProxSubproblem(problem, anchor, gamma)


def theorem_conditions(config: StageConfig, problem: ProblemInstance) -> dict[str, np.ndarray]:
    """Per-stage inner-solver conditions of the stagewise guarantee.

    SGD: eps1 = 1/(2 eta_s T_s) <= 1/(24 gamma) and
    eps3 = eta_s G_hat^2 / 2 <= c3 / s with c3 = c G_hat^2 / 2.
    Momentum: eta_s <= (1 - beta) gamma^2 lam / (8 rho beta + 4) with lam the
    strong-convexity modulus 1/gamma - mu of the subproblem.
    AdaGrad: M_s eta_s >= 24 gamma.
    Returns the values and a boolean ``ok`` array over s = 1..S.
    """
    S = config.stages
    s = np.arange(1, S + 1)
    scheds = [schedule(config, k) for k in s]
    eta = np.array([x.eta for x in scheds])
    budget = np.array([x.budget for x in scheds])
    gamma = config.gamma
    out: dict[str, np.ndarray] = {"s": s, "eta": eta, "budget": budget}
    if config.budget_mode == "practical":
        out["ok"] = np.ones(S, dtype=bool)
        return out
    if config.variant == "sgd":
        dom = problem.domain
        g = problem.metadata.grad_bound_G + (dom.diameter / gamma if dom.bounded else 0.0)
        out["eps1"] = 1.0 / (2.0 * eta * budget)
        out["eps1_bound"] = np.full(S, 1.0 / (24.0 * gamma))
        out["eps3"] = eta * g * g / 2.0
        out["eps3_bound"] = config.c * g * g / 2.0 / s
        out["ok"] = (out["eps1"] <= out["eps1_bound"] * (1 + 1e-12)) & (
            out["eps3"] <= out["eps3_bound"] * (1 + 1e-12)
        )
    elif config.variant in MOMENTUM_RHO:
        lam = 1.0 / gamma - problem.metadata.mu
        rho, beta = config.momentum_rho, config.beta
        out["eta_bound"] = np.full(S, (1 - beta) * gamma**2 * lam / (8 * rho * beta + 4))
        out["ok"] = eta <= out["eta_bound"]
    elif config.variant == "adagrad":
        out["ok"] = budget * eta >= 24.0 * gamma * (1 - 1e-12)
    else:
        out["ok"] = np.ones(S, dtype=bool)
    return out


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


def _entropy(seed) -> int:
    if isinstance(seed, np.random.Generator):
        return int(seed.integers(2**63))
    if isinstance(seed, np.random.SeedSequence):
        return int(seed.generate_state(2, np.uint64)[0])
    if seed is None:
        raise ParameterError("a seed is required")
    return int(seed)


def stage_rng(master_seed: int, s: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(_STAGE_KEY, s)))


def selection_rng(master_seed: int, S: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(_SELECT_KEY, S)))


@dataclass
class RunTrace:
    """Record of one stagewise (or baseline) run.

    ``stage_points`` holds x_0..x_S as rows; ``reports[s - 1]`` is the inner
    solve of stage s and ``schedules[s - 1]`` its constants.
    """

    stage_points: np.ndarray
    reports: list[SolverReport]
    total_inner_iterations: int
    selected_tau: int
    selected_point: np.ndarray
    wall_time: float
    probs: np.ndarray
    schedules: list[Schedule] = field(default_factory=list)
    gamma: float | None = None
    variant: str = ""
    budget_mode: str = "theorem"
    master_seed: int | None = None

    @property
    def stages(self) -> int:
        return len(self.stage_points) - 1

    @property
    def inner_iterations(self) -> np.ndarray:
        return np.array([r.iterations_used for r in self.reports], dtype=np.int64)

    @property
    def flagged_stages(self) -> list[int]:
        return [s for s, r in enumerate(self.reports, start=1) if r.flagged]

    def prefix(self, S: int, alpha: float) -> "RunTrace":
        """The run with the first S stages and the same master seed.

        Exact because stage streams and the selection stream depend only on
        (master seed, stage index) and (master seed, S).
        """
        if not 0 <= S <= self.stages:
            raise ParameterError(f"prefix length {S} outside 0..{self.stages}")
        if self.master_seed is None:
            raise ParameterError("trace carries no master seed")
        dist = sampling_probs(S, alpha)
        tau = dist.sample(selection_rng(self.master_seed, S))
        points = self.stage_points[: S + 1]
        reps = self.reports[:S]
        return RunTrace(
            stage_points=points,
            reports=reps,
            total_inner_iterations=int(sum(r.iterations_used for r in reps)),
            selected_tau=tau,
            selected_point=points[tau],
            wall_time=self.wall_time * (S / self.stages if self.stages else 1.0),
            probs=dist.probs,
            schedules=self.schedules[:S],
            gamma=self.gamma,
            variant=self.variant,
            budget_mode=self.budget_mode,
            master_seed=self.master_seed,
        )


InnerSolver = Callable[[ProxSubproblem, np.ndarray, int, Schedule, np.random.Generator], SolverReport]


def _stage_solve(config: StageConfig, sub: ProxSubproblem, x: np.ndarray, s: int,
                 sched: Schedule, rng: np.random.Generator, record: bool) -> SolverReport:
    v = config.variant
    if v == "sgd":
        return sgd_solve(sub, x, sched.eta, int(sched.budget), rng, record=record, stage=s)
    if v in MOMENTUM_RHO:
        params = MomentumParams(sched.eta, config.beta, config.momentum_rho)
        return sum_solve(sub, x, params, int(sched.budget), rng, record=record, stage=s)
    if v == "adagrad":
        if config.budget_mode == "practical":
            return adagrad_solve(sub, x, sched.eta, 0.0, config.adagrad_cap, rng, mode="practical",
                                 T0=sched.budget, s_index=s, record=record, stage=s)
        return adagrad_solve(sub, x, sched.eta, sched.budget, config.adagrad_cap, rng,
                             record=record, stage=s)
    params = AdmmParams(sched.eta, config.c2 * s, sub.base.penalty_matrix,
                        sub.base.params["lam1"], alpha_c=config.alpha_c)
    return admm_solve(sub, x, params, int(sched.budget), rng, record=record, stage=s)


def run_stagewise(
    problem: ProblemInstance,
    config: StageConfig,
    rng=None,
    *,
    record_inner: bool = False,
    solver: InnerSolver | None = None,
) -> RunTrace:
    """Run S stages and sample the output stage.

    Parameters
    ----------
    rng : int, SeedSequence or Generator, optional
        Master seed source; defaults to ``config.master_seed``.  A Generator
        contributes one draw, which becomes the master seed.
    record_inner : bool
        Keep per-iteration traces in the stage reports.
    solver : callable, optional
        Custom inner solver ``solver(sub, start, s, schedule, rng)``
        returning a :class:`SolverReport`; replaces the variant's solver.
    """
    t0 = time.perf_counter()
    config = config.resolve(problem)
    master = _entropy(config.master_seed if rng is None else rng)
    if solver is None:
        cond = theorem_conditions(config, problem)
        if not np.all(cond["ok"]):
            bad = int(cond["s"][~cond["ok"]][0])
            raise ParameterError(f"schedule violates the inner-solver conditions at stage {bad}")
    S = config.stages
    points = np.empty((S + 1, problem.dimension))
    points[0] = config.start
    reports: list[SolverReport] = []
    scheds: list[Schedule] = []
    x = points[0].copy()
    for s in range(1, S + 1):
        sched = schedule(config, s)
        sub = build_subproblem(problem, x, config.gamma)
        srng = stage_rng(master, s)
        try:
            if solver is None:
                rep = _stage_solve(config, sub, x, s, sched, srng, record_inner)
            else:
                rep = solver(sub, x, s, sched, srng)
        except StagewiseError as exc:
            if getattr(exc, "stage", None) is None:
                exc.stage = s
            raise
        x = np.array(rep.averaged_point, dtype=float)
        points[s] = x
        reports.append(rep)
        scheds.append(sched)
    dist = sampling_probs(S, config.weight_alpha)
    tau = dist.sample(selection_rng(master, S))
    return RunTrace(
        stage_points=points,
        reports=reports,
        total_inner_iterations=int(sum(r.iterations_used for r in reports)),
        selected_tau=tau,
        selected_point=points[tau],
        wall_time=time.perf_counter() - t0,
        probs=dist.probs,
        schedules=scheds,
        gamma=config.gamma,
        variant=config.variant,
        budget_mode=config.budget_mode,
        master_seed=master,
    )


# ---------------------------------------------------------------------------
# Single-loop baselines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaselineParams:
    """Single-loop SGD settings.

    ``drop_points`` are iteration numbers t at which the step is multiplied
    by ``drop_factor`` (applied for every t >= the drop point).
    """

    eta0: float
    iterations: int
    drop_factor: float = 0.1
    drop_points: tuple[int, ...] = ()
    start: Any = None

    def __post_init__(self):
        if not self.eta0 > 0:
            raise ParameterError("eta0 must be positive")
        if int(self.iterations) < 1:
            raise ParameterError("iterations must be >= 1")
        if not self.drop_factor > 0:
            raise ParameterError("drop_factor must be positive")


def baseline_steps(kind: str, params: BaselineParams) -> np.ndarray:
    """Step sizes eta_t for t = 1..T."""
    t = np.arange(1, int(params.iterations) + 1, dtype=float)
    if kind == "sgd-theory-decay":
        return params.eta0 / np.sqrt(t)
    if kind == "sgd-constant":
        return np.full(t.shape, float(params.eta0))
    if kind == "fixed-frequency-decay":
        drops = np.sort(np.asarray(params.drop_points, dtype=float))
        count = np.searchsorted(drops, t, side="right")
        return params.eta0 * params.drop_factor ** count
    raise ParameterError(f"unknown baseline {kind!r}; choose from {', '.join(BASELINES)}")


def baseline_run(problem: ProblemInstance, kind: str, params: BaselineParams, rng=None) -> RunTrace:
    """Single-loop projected SGD on phi.

    sgd-theory-decay uses eta_0/sqrt(t) and returns x_t with probability
    proportional to 1/sqrt(t), t = 1..T; the other kinds return the last
    iterate x_{T+1}.  The trace has one "stage" whose point is the output.
    """
    t0 = time.perf_counter()
    etas = baseline_steps(kind, params)
    T = len(etas)
    if rng is None:
        rng = 0
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(np.random.SeedSequence(_entropy(rng), spawn_key=(_BASELINE_KEY,)))
    start = problem.default_start if params.start is None else params.start
    sub = ProxSubproblem.unregularized(problem)
    x1 = np.array(problem.check_point(start), dtype=float)
    idx = rng.integers(problem.n_samples, size=T)
    keep = -1
    if kind == "sgd-theory-decay":
        p = 1.0 / np.sqrt(np.arange(1, T + 1))
        keep = int(rng.choice(T, p=p / p.sum()))
    avg, last, kept, _, _ = _sgd_run(sub, x1, etas, idx, keep, False, None)
    out = kept if kind == "sgd-theory-decay" else last
    rep = SolverReport(problem.domain.project(avg), last, T, "fixed-budget", None,
                       {"kind": kind, "kept_index": keep + 1 if keep >= 0 else T + 1})
    return RunTrace(
        stage_points=np.vstack([x1, out]),
        reports=[rep],
        total_inner_iterations=T,
        selected_tau=1,
        selected_point=out,
        wall_time=time.perf_counter() - t0,
        probs=np.array([0.0, 1.0]),
        variant=kind,
        budget_mode="baseline",
    )
