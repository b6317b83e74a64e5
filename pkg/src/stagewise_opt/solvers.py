"""Stochastic convex inner solvers for one stage.

Each solver works on a :class:`ProxSubproblem`

    f(x) = phi(x) + 1/(2 gamma) ||x - anchor||^2

whose stochastic subgradient is g(x; xi) + (x - anchor)/gamma, and returns
a :class:`SolverReport` holding the averaged iterate.  Sample indices are
drawn from the caller's generator up front, so a solve is a pure function
of (subproblem, start, parameters, generator state).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import _kernels as K
from .errors import (
    ConvexityError,
    NumericError,
    ParameterError,
    UnsupportedDomainError,
    UnsupportedError,
)
from .problems import ProblemInstance

FIXED_BUDGET = "fixed-budget"
ADAPTIVE_CONDITION = "adaptive-condition"
CAP_REACHED = "cap-reached"

DEFAULT_ADAGRAD_CAP = 1_000_000
# draw this many sample indices at a time while waiting for the adaptive stop
_ADAGRAD_CHUNK = 8192
# headroom over the observed sup-norm when g_hat is estimated
_G_HAT_HEADROOM = 1.1


@dataclass(frozen=True, eq=False)
class ProxSubproblem:
    """Stage objective phi(x) + 1/(2 gamma) ||x - anchor||^2.

    ``gamma = inf`` drops the quadratic term; it is accepted only for
    convex bases (mu = 0).
    """

    base: ProblemInstance
    anchor: np.ndarray
    gamma: float

    def __post_init__(self):
        anchor = np.array(self.anchor, dtype=float)
        if anchor.shape != (self.base.dimension,):
            raise ParameterError(f"anchor must have length {self.base.dimension}")
        anchor.setflags(write=False)
        object.__setattr__(self, "anchor", anchor)
        gamma = float(self.gamma)
        if not gamma > 0:
            raise ParameterError(f"gamma must be positive, got {gamma}")
        if gamma * self.base.metadata.mu >= 1:
            raise ConvexityError(
                f"gamma * mu = {gamma * self.base.metadata.mu:.6g} >= 1; subproblem is not convex"
            )
        object.__setattr__(self, "gamma", gamma)

    @classmethod
    def unregularized(cls, base: ProblemInstance) -> "ProxSubproblem":
        """The base objective itself (gamma = inf), skipping the convexity check.

        Used by single-loop baselines, which run plain SGD on phi.
        """
        obj = object.__new__(cls)
        anchor = np.zeros(base.dimension)
        anchor.setflags(write=False)
        object.__setattr__(obj, "base", base)
        object.__setattr__(obj, "anchor", anchor)
        object.__setattr__(obj, "gamma", math.inf)
        return obj

    @property
    def inv_gamma(self) -> float:
        return 0.0 if math.isinf(self.gamma) else 1.0 / self.gamma

    @property
    def dimension(self) -> int:
        return self.base.dimension

    @property
    def domain(self):
        return self.base.domain

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return self.base.objective(x) + 0.5 * self.inv_gamma * float(np.sum((x - self.anchor) ** 2))

    def full_objective(self, x) -> float:
        self.base.check_point(x)
        return self.objective(x)

    def sample_gradients(self, x, rows=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.base.sample_gradients(x, rows) + self.inv_gamma * (x - self.anchor)

    def stochastic_subgradient(self, x, rng: np.random.Generator) -> np.ndarray:
        x = self.base.check_point(x)
        return self.sample_gradients(x, rows=[self.base.sample_index(rng)])[0]

    def full_subgradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.base.full_subgradient(x) + self.inv_gamma * (x - self.anchor)

    def g_hat(self) -> tuple[float, bool]:
        """Sup-norm bound for the subproblem's stochastic subgradients.

        Returns ``(value, running)``.  On bounded domains the value is
        G + D/gamma and ``running`` is False.  Otherwise it is 1.1 times the
        largest per-sample sup-norm at the anchor, and the solver raises it
        to 1.1 times the running maximum of what it observes.
        """
        dom = self.base.domain
        if dom.bounded:
            return self.base.metadata.grad_bound_G + dom.diameter * self.inv_gamma, False
        g = self.sample_gradients(self.anchor)
        est = _G_HAT_HEADROOM * float(np.max(np.abs(g)))
        if not est > 0:
            est = self.base.metadata.grad_bound_G
        return est, True


@dataclass(frozen=True)
class MomentumParams:
    """Unified momentum constants; rho = 0 is heavy ball, rho = 1 Nesterov."""

    eta: float
    beta: float
    rho: float = 0.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ParameterError(f"eta must be positive, got {self.eta}")
        if not 0 <= self.beta < 1:
            raise ParameterError(f"beta must lie in [0, 1), got {self.beta}")
        if not self.rho >= 0:
            raise ParameterError(f"rho must be non-negative, got {self.rho}")


@dataclass(frozen=True, eq=False)
class AdmmParams:
    """Linearized ADMM constants for psi(y) = psi_lambda * ||y||_1 with y = A x.

    ``alpha_c`` defaults to 1 + eta * penalty_beta * ||A||_2^2, the
    smallest value with C = alpha_c I - eta beta A^T A >= I.
    """

    eta: float
    penalty_beta: float
    matrix_A: np.ndarray
    psi_lambda: float
    alpha_c: float | None = None

    def __post_init__(self):
        if not self.eta > 0:
            raise ParameterError(f"eta must be positive, got {self.eta}")
        if not self.penalty_beta > 0:
            raise ParameterError(f"penalty_beta must be positive, got {self.penalty_beta}")
        if not self.psi_lambda >= 0:
            raise ParameterError("psi_lambda must be non-negative")
        A = np.atleast_2d(np.array(self.matrix_A, dtype=float))
        A.setflags(write=False)
        object.__setattr__(self, "matrix_A", A)
        AtA = A.T @ A
        top = float(np.linalg.eigvalsh(AtA)[-1]) if A.size else 0.0
        if self.alpha_c is None:
            object.__setattr__(self, "alpha_c", 1.0 + self.eta * self.penalty_beta * top)
        c_min = float(np.linalg.eigvalsh(self.C)[0])
        if c_min < 1.0 - 1e-12:
            raise ParameterError(f"C = alpha_c I - eta beta A^T A must be >= I; smallest eigenvalue {c_min:.6g}")

    @property
    def C(self) -> np.ndarray:
        A = self.matrix_A
        return self.alpha_c * np.eye(A.shape[1]) - self.eta * self.penalty_beta * (A.T @ A)

    def system_matrix(self) -> np.ndarray:
        """beta A^T A + 2 C / eta, the matrix of the x-update."""
        A = self.matrix_A
        return self.penalty_beta * (A.T @ A) + 2.0 * self.C / self.eta


@dataclass
class AdaGradState:
    """Running statistics of AdaGrad's gradient history g_{1:t}.

    ``max_row_norm`` and ``row_norm_sum`` are max_i and sum_i of the
    per-coordinate norms ||g_{1:t,i}|| = sqrt(cum_sq_i), maintained
    incrementally.
    """

    h0_scale: float
    cum_sq: np.ndarray
    grad_sum: np.ndarray
    max_row_norm: float = 0.0
    row_norm_sum: float = 0.0
    t: int = 0

    @classmethod
    def zeros(cls, d: int, h0_scale: float) -> "AdaGradState":
        return cls(float(h0_scale), np.zeros(d), np.zeros(d))

    def update(self, g) -> None:
        g = np.asarray(g, dtype=float)
        self.cum_sq = self.cum_sq + g * g
        self.grad_sum = self.grad_sum + g
        rows = np.sqrt(self.cum_sq)
        self.max_row_norm = float(np.max(rows))
        self.row_norm_sum = float(np.sum(rows))
        self.t += 1

    @property
    def H_diag(self) -> np.ndarray:
        return self.h0_scale + np.sqrt(self.cum_sq)


def adagrad_stop_satisfied(state: AdaGradState, M: float, g_hat: float) -> bool:
    """t >= M * max(g_hat + max_i ||g_{1:t,i}||, sum_i ||g_{1:t,i}||)."""
    return state.t >= M * max(g_hat + state.max_row_norm, state.row_norm_sum)


@dataclass
class SolverReport:
    """Outcome of one inner solve.

    ``inner_trace`` (when recorded) maps names to per-iteration arrays:
    ``points`` (the averaged iterates), ``objective_estimates`` (the
    sampled f(x_t; xi_t)) and ``step_norms``; solvers add their own keys.
    """

    averaged_point: np.ndarray
    final_point: np.ndarray
    iterations_used: int
    stop_reason: str = FIXED_BUDGET
    inner_trace: dict[str, np.ndarray] | None = None
    info: dict[str, Any] = field(default_factory=dict)

    @property
    def flagged(self) -> bool:
        return self.stop_reason == CAP_REACHED


def soft_threshold(v, kappa: float) -> np.ndarray:
    """sign(v) * max(|v| - kappa, 0), coordinate-wise."""
    if not kappa >= 0:
        raise ParameterError(f"threshold must be non-negative, got {kappa}")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - kappa, 0.0)


# ---------------------------------------------------------------------------


def _start(sub: ProxSubproblem, start) -> np.ndarray:
    return np.array(sub.base.check_point(start), dtype=float)


def _sample_estimates(sub: ProxSubproblem, points: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """f(x_t; xi_t) for the recorded iterates."""
    base = sub.base
    out = np.empty(len(points))
    for t, (x, i) in enumerate(zip(points, idx)):
        out[t] = (
            base._loss_values(x)[i]
            + base.regularizer_value(x)
            + 0.5 * sub.inv_gamma * float(np.sum((x - sub.anchor) ** 2))
        )
    return out


def _check_status(status, iters, stage, name):
    if status == K.NONFINITE:
        raise NumericError(f"{name}: non-finite iterate", stage=stage, iteration=int(iters))


def _sgd_run(sub, x1, etas, idx, keep, record, stage):
    prob = K.pack_problem(sub.base)
    dom = K.pack_domain(sub.base.domain)
    avg, last, status, iters, kept, trace, steps = K.sgd_loop(
        *prob, *dom, np.asarray(sub.anchor), sub.inv_gamma, x1, etas, idx, keep, record
    )
    _check_status(status, iters, stage, "sgd")
    return avg, last, kept, trace, steps


def sgd_solve(
    sub: ProxSubproblem,
    start,
    eta,
    T: int,
    rng: np.random.Generator,
    *,
    record: bool = False,
    stage: int | None = None,
) -> SolverReport:
    """Projected stochastic subgradient method.

    Runs x_{t+1} = proj(x_t - eta g_t) for t = 1..T from x_1 = start and
    returns the average of x_1..x_T; x_{T+1} is the report's
    ``final_point``.  ``eta`` may be a scalar or a length-T array.
    """
    T = int(T)
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    etas = np.broadcast_to(np.asarray(eta, dtype=float), (T,)).copy()
    if not np.all(etas > 0):
        raise ParameterError("step sizes must be positive")
    x1 = _start(sub, start)
    idx = rng.integers(sub.base.n_samples, size=T)
    avg, last, _, trace, steps = _sgd_run(sub, x1, etas, idx, -1, record, stage)
    avg = sub.base.domain.project(avg)  # averaging a convex set only rounds off it
    tr = None
    if record:
        tr = {
            "points": trace,
            "objective_estimates": _sample_estimates(sub, trace, idx),
            "step_norms": steps,
            "indices": idx,
        }
    return SolverReport(avg, last, T, FIXED_BUDGET, tr)


def sum_solve(
    sub: ProxSubproblem,
    start,
    params: MomentumParams,
    T: int,
    rng: np.random.Generator,
    *,
    record: bool = False,
    stage: int | None = None,
) -> SolverReport:
    """Unified stochastic momentum (heavy ball for rho = 0, Nesterov for rho = 1).

    Starting from x_0 = y^rho_0 = start, for t = 0..T-1::

        y_{t+1}     = x_t - eta g_t
        y^rho_{t+1} = x_t - rho eta g_t
        x_{t+1}     = y_{t+1} + beta (y^rho_{t+1} - y^rho_t)

    and returns the average of x_0..x_T (T + 1 points).  Only
    unconstrained domains are accepted, since the scheme has no projection.
    """
    if sub.base.domain.kind != "unconstrained":
        raise UnsupportedDomainError("momentum solvers need an unconstrained domain")
    T = int(T)
    if T < 0:
        raise ParameterError(f"T must be >= 0, got {T}")
    x0 = _start(sub, start)
    idx = rng.integers(sub.base.n_samples, size=T)
    prob = K.pack_problem(sub.base)
    avg, last, status, iters, trace = K.sum_loop(
        *prob, np.asarray(sub.anchor), sub.inv_gamma, x0,
        float(params.eta), float(params.beta), float(params.rho), idx, record,
    )
    _check_status(status, iters, stage, "momentum")
    tr = None
    if record:
        tr = {
            "points": trace,
            "objective_estimates": _sample_estimates(sub, trace[:T], idx),
            "step_norms": np.linalg.norm(np.diff(trace, axis=0), axis=1),
            "indices": idx,
        }
    return SolverReport(avg, last, T, FIXED_BUDGET, tr, {"averaged_points": T + 1})


def adagrad_solve(
    sub: ProxSubproblem,
    start,
    eta: float,
    M: float,
    cap: int = DEFAULT_ADAGRAD_CAP,
    rng: np.random.Generator | None = None,
    *,
    g_hat: float | None = None,
    mode: str = "theorem",
    T0: float | None = None,
    s_index: int = 1,
    record: bool = False,
    stage: int | None = None,
) -> SolverReport:
    """AdaGrad dual averaging with a data-dependent stopping time.

    With H_t = g_hat I + diag(||g_{1:t,i}||) the update is::

        x_{t+1} = argmin_{x in Omega} eta x^T mean(g_1..g_t) + (x - x_1)^T H_t (x - x_1) / (2t)
                = proj^{H_t}(x_1 - eta H_t^{-1} sum g)

    After every step the stopping rule is checked; the run ends at the
    first T satisfying it (``adaptive-condition``) or at ``cap``
    (``cap-reached``, flagged).  The average of x_1..x_T is returned.

    Parameters
    ----------
    g_hat : float, optional
        Sup-norm bound of the subproblem's stochastic gradients.  Defaults
        to :meth:`ProxSubproblem.g_hat`; when that is a running estimate the
        solver raises it to 1.1x the observed maximum.
    mode : {"theorem", "practical"}
        "theorem" stops when t >= M max(g_hat + max_i ||g_{1:t,i}||,
        sum_i ||g_{1:t,i}||).  "practical" stops when
        t > T0 sqrt(s max_i ||g_{1:t,i}|| sum_i ||g_{1:t,i}||), using
        ``T0`` and the stage index ``s_index``.
    """
    if rng is None:
        raise ParameterError("adagrad_solve needs a random generator")
    if not eta > 0:
        raise ParameterError(f"eta must be positive, got {eta}")
    cap = int(cap)
    if cap < 1:
        raise ParameterError("cap must be >= 1")
    if mode == "theorem":
        if not M > 0:
            raise ParameterError(f"M must be positive, got {M}")
        kmode, T0v = 0, 0.0
    elif mode == "practical":
        if T0 is None or not T0 > 0:
            raise ParameterError("practical stopping needs T0 > 0")
        kmode, T0v, M = 1, float(T0), 0.0
    else:
        raise ParameterError(f"unknown AdaGrad stopping mode {mode!r}")
    dom = sub.base.domain
    if dom.kind == "box" and not dom.bounded:
        raise UnsupportedDomainError("AdaGrad needs a bounded box or a ball")

    x1 = _start(sub, start)
    if g_hat is None:
        g_hat, running = sub.g_hat()
    else:
        running = False
        if not g_hat > 0:
            raise ParameterError("g_hat must be positive")
    d = sub.dimension
    x = x1.copy()
    cum_sq = np.zeros(d)
    grad_sum = np.zeros(d)
    acc = np.zeros(d)
    sc = np.array([0.0, 0.0, 0.0, float(g_hat), 0.0])
    prob = K.pack_problem(sub.base)
    pdom = K.pack_domain(dom)
    anchor = np.asarray(sub.anchor)
    n = sub.base.n_samples
    parts = [] if record else None
    status = K.OK
    while status == K.OK:
        left = cap - int(sc[0])
        idx = rng.integers(n, size=min(_ADAGRAD_CHUNK, left))
        status, used, trace, hist = K.adagrad_loop(
            *prob, *pdom, anchor, sub.inv_gamma, x1, float(eta), float(M), kmode, T0v,
            float(s_index), float(cap), running, x, cum_sq, grad_sum, acc, sc, idx, record,
        )
        if record:
            parts.append((trace[:used], hist[:used], idx[:used]))
        _check_status(status, sc[0], stage, "adagrad")
    T = int(sc[0])
    avg = dom.project(acc / T)
    reason = ADAPTIVE_CONDITION if status == K.ADAPTIVE_STOP else CAP_REACHED
    info = {
        "g_hat": float(sc[3]),
        "g_hat_running": bool(running),
        "max_row_norm": float(sc[1]),
        "row_norm_sum": float(sc[2]),
        "mode": mode,
        "state": AdaGradState(float(sc[3]), cum_sq, grad_sum, float(sc[1]), float(sc[2]), T),
    }
    tr = None
    if record:
        pts = np.concatenate([p[0] for p in parts])
        hist = np.concatenate([p[1] for p in parts])
        idx = np.concatenate([p[2] for p in parts])
        tr = {
            "points": pts,
            "objective_estimates": _sample_estimates(sub, pts, idx),
            "step_norms": np.linalg.norm(np.diff(np.vstack([pts, x]), axis=0), axis=1),
            "max_row_norm": hist[:, 0],
            "row_norm_sum": hist[:, 1],
            "g_hat": hist[:, 2],
            "indices": idx,
        }
    return SolverReport(avg, x, T, reason, tr, info)


def admm_solve(
    sub: ProxSubproblem,
    start,
    params: AdmmParams,
    T: int,
    rng: np.random.Generator,
    *,
    record: bool = False,
    stage: int | None = None,
) -> SolverReport:
    """Linearized stochastic ADMM for loss(x) + psi_lambda ||A x||_1.

    Starting from x_1 = start, y_1 = A x_1 and a zero dual, each step

    * solves (beta A^T A + 2C/eta) x = -g + A^T(beta y + lam) + (2/eta) C x_t
      exactly, g being the stochastic gradient of the data term plus the
      proximal term;
    * sets y = soft(A x - lam/beta, psi_lambda/beta);
    * updates lam <- lam - beta (A x - y).

    Returns the average of x_1..x_T.  The base must be a
    generalized-lasso instance on an unconstrained domain.
    """
    base = sub.base
    if base.family != "generalized-lasso":
        raise UnsupportedError("ADMM splits the l1 term of generalized-lasso instances only")
    if base.domain.kind != "unconstrained":
        raise UnsupportedDomainError("ADMM is implemented for unconstrained domains only")
    T = int(T)
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if params.matrix_A.shape[1] != base.dimension:
        raise ParameterError("ADMM matrix does not match the problem dimension")
    x1 = _start(sub, start)
    try:
        Lc = np.linalg.cholesky(params.system_matrix())
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"x-update system is not positive definite: {exc}", stage=stage) from exc
    idx = rng.integers(base.n_samples, size=T)
    code, A, b, fp, center, curv, _ = K.pack_problem(base)
    D = np.ascontiguousarray(params.matrix_A)
    avg, last, y, lam, status, iters, x_tr, v_tr, y_tr, res_tr = K.admm_loop(
        code, A, b, fp, center, curv, D, np.asarray(sub.anchor), sub.inv_gamma, x1,
        float(params.eta), float(params.penalty_beta), float(params.alpha_c),
        float(params.psi_lambda), Lc, idx, record,
    )
    _check_status(status, iters, stage, "admm")
    tr = None
    if record:
        tr = {
            "points": x_tr,
            "objective_estimates": _sample_estimates(sub, x_tr, idx),
            "step_norms": np.linalg.norm(np.diff(np.vstack([x_tr, last]), axis=0), axis=1),
            "y_arguments": v_tr,
            "y": y_tr,
            "x_update_residuals": res_tr,
            "indices": idx,
        }
    return SolverReport(avg, last, T, FIXED_BUDGET, tr, {"y": y, "dual": lam})
