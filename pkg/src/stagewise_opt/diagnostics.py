"""Moreau-envelope stationarity certificates and rate fits.

For gamma with gamma * mu < 1 the envelope

    phi_gamma(x) = min_z phi(z) + 1/(2 gamma) ||z - x||^2    (z in Omega)

is smooth with gradient (x - prox(x)) / gamma.  The prox is computed
deterministically from full-batch quantities by a solver matched to the
family:

* smooth families: projected gradient descent with step 1/(L + 1/gamma);
* SCAD / MCP: forward-backward with the exact scalar prox of the penalty
  (box constraints are applied inside the scalar prox);
* generalized lasso: forward-backward on w = B z with B = [D; N], N an
  orthonormal basis of null(D), so the l1 term becomes separable;
* phase retrieval: maximization of the concave dual over sigma in
  [-1, 1]^n (|u| = max sigma u), then an active-set polish of the primal.

Every solver stops on its fixed-point residual, which is at most
``tol * (1 + ||x||)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy import optimize

from .errors import (
    ConvexityError,
    DomainError,
    ParameterError,
    ToleranceNotMetError,
    UnsupportedDomainError,
    UnsupportedError,
)
from .problems import ProblemInstance, mcp_penalty, mcp_prox, project, scad_penalty, scad_prox

DEFAULT_TOL = 1e-8
MAX_ITER = 1_000_000
MIDPOINT_SLACK = 1e-9
_MIDPOINT_T = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class StationarityReport:
    """Moreau-envelope certificate at ``point``.

    ``moreau_grad`` is (point - prox_point) / gamma, so
    ||point - prox_point|| = gamma ||moreau_grad|| by construction.
    ``prox_residual`` is the solver's fixed-point residual, which bounds the
    distance to the exact prox by residual / (1/gamma - mu).
    """

    point: np.ndarray
    gamma: float
    prox_point: np.ndarray
    moreau_grad: np.ndarray
    moreau_grad_norm_sq: float
    prox_residual: float
    subproblem_tolerance: float
    envelope_value: float
    iterations: int
    method: str


@dataclass(frozen=True)
class RateFit:
    """Least-squares fit of log y = intercept + slope * log x."""

    x_values: tuple[float, ...]
    y_values: tuple[float, ...]
    slope: float
    intercept: float
    r_squared: float


# ---------------------------------------------------------------------------
# prox solvers
# ---------------------------------------------------------------------------


def _check_gamma(problem: ProblemInstance, gamma: float) -> float:
    gamma = float(gamma)
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    if gamma * problem.metadata.mu >= 1:
        raise ConvexityError(f"gamma * mu = {gamma * problem.metadata.mu:.6g} >= 1")
    return gamma


def _pgd(problem, x, inv_gamma, lip, thresh, max_iter):
    """Projected gradient on the smooth prox subproblem."""
    step = 1.0 / (lip + inv_gamma)
    z = project(problem.domain, x)
    res = math.inf
    for k in range(1, max_iter + 1):
        grad = problem.loss_gradient(z) + inv_gamma * (z - x)
        z_new = project(problem.domain, z - step * grad)
        res = float(np.linalg.norm(z - z_new)) / step
        z = z_new
        if res <= thresh:
            return z, res, k
    raise ToleranceNotMetError("prox iteration limit reached", res)


def _penalty_fb(problem, x, inv_gamma, thresh, max_iter):
    """Forward-backward for square loss + separable SCAD/MCP penalty."""
    dom = problem.domain
    if dom.kind == "ball":
        raise UnsupportedDomainError("SCAD/MCP prox is implemented for unconstrained and box domains")
    p = problem.params
    step = 1.0 / (p["loss_lipschitz"] + inv_gamma)
    if problem.family == "scad-regression":
        def pen_prox(v):
            return scad_prox(v, step, p["lam"], p["scad_a"])
    else:
        def pen_prox(v):
            return mcp_prox(v, step, p["lam"], p["mcp_b"])
    # t pen(u) + (u - v)^2 / 2 is strongly convex in one dimension, so the
    # box-constrained scalar prox is the clipped unconstrained one
    z = project(dom, x)
    res = math.inf
    for k in range(1, max_iter + 1):
        grad = problem.loss_gradient(z) + inv_gamma * (z - x)
        z_new = project(dom, pen_prox(z - step * grad))
        res = float(np.linalg.norm(z - z_new)) / step
        z = z_new
        if res <= thresh:
            return z, res, k
    raise ToleranceNotMetError("prox iteration limit reached", res)


def _lasso_basis(D: np.ndarray):
    """B = [D; N] with N spanning null(D); requires full row rank D."""
    m, d = D.shape
    if m > d or np.linalg.matrix_rank(D) < m:
        raise UnsupportedError("generalized-lasso prox needs a full-row-rank penalty matrix")
    N = sla.null_space(D).T
    B = np.vstack([D, N])
    return B, np.linalg.inv(B)


def _lasso_fb(problem, x, inv_gamma, thresh, max_iter):
    """Forward-backward in w = B z with soft-thresholding of w[:m].

    Accelerated (FISTA with gradient restart); the residual is the
    fixed-point residual of the plain forward-backward map in w.
    """
    D = problem.penalty_matrix
    m = D.shape[0]
    lam1 = problem.params["lam1"]
    B, Binv = _lasso_basis(D)
    lip = (problem.params["loss_lipschitz"] + inv_gamma) * np.linalg.norm(Binv, 2) ** 2
    step = 1.0 / lip

    def grad_w(w):
        z = Binv @ w
        return Binv.T @ (problem.loss_gradient(z) + inv_gamma * (z - x))

    def fb(w):
        v = w - step * grad_w(w)
        v[:m] = np.sign(v[:m]) * np.maximum(np.abs(v[:m]) - step * lam1, 0.0)
        return v

    w = B @ x
    y = w.copy()
    theta = 1.0
    res = math.inf
    for k in range(1, max_iter + 1):
        w_new = fb(y)
        res_y = float(np.linalg.norm(y - w_new)) / step
        if res_y <= thresh:
            # the plain map at w_new certifies it (residual measured there)
            res = float(np.linalg.norm(w_new - fb(w_new))) / step
            if res <= thresh:
                return Binv @ w_new, res, k
        if np.dot(y - w_new, w_new - w) > 0:  # restart
            theta = 1.0
            y = w_new.copy()
        else:
            theta_new = 0.5 * (1 + math.sqrt(1 + 4 * theta * theta))
            y = w_new + ((theta - 1) / theta_new) * (w_new - w)
            theta = theta_new
        w = w_new
        res = res_y
    raise ToleranceNotMetError("prox iteration limit reached", res)


# -- phase retrieval ---------------------------------------------------------


def _pr_residual(problem, x, inv_gamma, z, kink_tol=1e-9):
    """Min-norm element of the subdifferential of the prox objective at z.

    Samples with (a_i^T z)^2 within ``kink_tol`` (relative) of b_i are
    treated as kinks whose sign ranges over [-1, 1]; an active ball adds
    its normal cone.
    """
    A, b = problem.A, problem.b
    n = problem.n_samples
    u = A @ z
    r = u * u - b
    kink = (np.abs(r) <= kink_tol * np.maximum(1.0, np.abs(b))) & (b > 0)
    s = np.where(r > 0, 1.0, -1.0)
    s[b <= 0] = 1.0
    base = (2.0 / n) * (A[~kink].T @ (s[~kink] * u[~kink])) + inv_gamma * (z - x)
    cols = [(2.0 / n) * (A[kink] * u[kink, None]).T]
    lo = [-np.ones(int(kink.sum()))]
    hi = [np.ones(int(kink.sum()))]
    dom = problem.domain
    if dom.kind == "ball" and np.linalg.norm(z - dom.center) >= dom.radius * (1 - 1e-9):
        cols.append((z - dom.center)[:, None])
        lo.append([0.0])
        hi.append([np.inf])
    Cm = np.hstack(cols)
    if Cm.shape[1] == 0:
        return float(np.linalg.norm(base))
    sol = optimize.lsq_linear(Cm, -base, bounds=(np.concatenate(lo), np.concatenate(hi)),
                              method="bvls", tol=1e-14)
    return float(np.linalg.norm(base + Cm @ sol.x))


def _pr_dual_solve(problem, x, inv_gamma, sigma0, ball, ftol):
    A, b = problem.A, problem.b
    n, d = A.shape
    ball_c = ball[0] if ball else None

    def primal(sig, nu):
        M = (2.0 / n) * (A.T * sig) @ A + (inv_gamma + nu) * np.eye(d)
        rhs = inv_gamma * x + (nu * ball_c if ball else 0.0)
        return np.linalg.solve(M, rhs)

    def negdual(v):
        sig = v[:n]
        nu = v[n] if ball else 0.0
        z = primal(sig, nu)
        u = A @ z
        r = u * u - b
        val = np.dot(sig, r) / n + 0.5 * inv_gamma * np.sum((z - x) ** 2)
        grad = r / n
        if ball:
            gap = 0.5 * (np.sum((z - ball_c) ** 2) - ball[1] ** 2)
            val += nu * gap
            grad = np.append(grad, gap)
        return -val, -grad

    v0 = sigma0 if not ball else np.append(sigma0, 0.0)
    bounds = [(-1.0, 1.0)] * n + ([(0.0, None)] if ball else [])
    out = optimize.minimize(negdual, v0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": 20000, "ftol": ftol, "gtol": 1e-14, "maxcor": 30})
    sig = out.x[:n]
    nu = out.x[n] if ball else 0.0
    return primal(sig, nu), sig, nu, int(out.nit)


def _pr_polish(problem, x, inv_gamma, z0, sig, ball):
    """Exact solve given the active set suggested by the dual solution."""
    A, b = problem.A, problem.b
    n, d = A.shape
    u0 = A @ z0
    r0 = u0 * u0 - b
    interior = (np.abs(sig) < 1 - 1e-7) | (np.abs(r0) <= 1e-7 * np.maximum(1.0, b))
    kink = interior & (b > 0)
    s = np.where(r0 > 0, 1.0, -1.0)
    s[b <= 0] = 1.0
    K = np.flatnonzero(kink)
    t = np.sign(u0[K]) * np.sqrt(b[K])
    Q0 = (2.0 / n) * (A[~kink].T * s[~kink]) @ A[~kink]
    AK = A[K]

    def solve(nu):
        Q = Q0 + (inv_gamma + nu) * np.eye(d)
        q = inv_gamma * x + (nu * ball[0] if ball else 0.0)
        kkt = np.block([[Q, AK.T], [AK, np.zeros((len(K), len(K)))]])
        sol = np.linalg.lstsq(kkt, np.concatenate([q, t]), rcond=None)[0]
        return sol[:d]

    z = solve(0.0)
    if ball and np.linalg.norm(z - ball[0]) > ball[1]:
        def gap(nu):
            return np.linalg.norm(solve(nu) - ball[0]) - ball[1]
        hi = 1.0
        while gap(hi) > 0 and hi < 1e12:
            hi *= 4.0
        nu = optimize.brentq(gap, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        z = solve(nu)
        z = ball[0] + (z - ball[0]) * min(1.0, ball[1] / np.linalg.norm(z - ball[0]))
    return z


def _phase_prox(problem, x, inv_gamma, thresh):
    dom = problem.domain
    if dom.kind == "box":
        raise UnsupportedDomainError("phase-retrieval prox is implemented for unconstrained and ball domains")
    if inv_gamma == 0:
        raise ParameterError("phase-retrieval prox needs a finite gamma")
    ball = (np.asarray(dom.center), float(dom.radius)) if dom.kind == "ball" else None
    u = problem.A @ x
    sig0 = np.sign(u * u - problem.b)
    best = None
    total = 0
    for ftol in (1e-15, 0.0):
        z, sig, nu, it = _pr_dual_solve(problem, x, inv_gamma, sig0, ball, ftol)
        total += it
        cands = [z]
        try:
            cands.append(_pr_polish(problem, x, inv_gamma, z, sig, ball))
        except (np.linalg.LinAlgError, ValueError):
            pass
        for c in cands:
            if ball:
                c = project(dom, c)
            res = _pr_residual(problem, x, inv_gamma, c)
            if best is None or res < best[1]:
                best = (c, res)
        if best[1] <= thresh:
            return best[0], best[1], total
        sig0 = sig
    raise ToleranceNotMetError("phase-retrieval prox did not certify", best[1])


def prox_point(problem: ProblemInstance, x, gamma: float, tol: float = DEFAULT_TOL,
               max_iter: int = MAX_ITER) -> np.ndarray:
    """argmin over the domain of phi(z) + 1/(2 gamma) ||z - x||^2."""
    return _prox(problem, x, gamma, tol, max_iter)[0]


def _prox(problem, x, gamma, tol, max_iter):
    if not tol > 0:
        raise ParameterError("tol must be positive")
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.dimension,):
        problem.check_point(x)
    gamma = _check_gamma(problem, gamma)
    inv_gamma = 0.0 if math.isinf(gamma) else 1.0 / gamma
    thresh = tol * (1.0 + float(np.linalg.norm(x)))
    fam = problem.family
    if problem.smooth:
        lip = problem.metadata.lipschitz_L or 0.0
        if lip + inv_gamma == 0:
            raise ParameterError("degenerate prox: zero curvature and gamma = inf")
        z, res, it = _pgd(problem, x, inv_gamma, lip, thresh, max_iter)
        return z, res, it, "projected-gradient", thresh
    if fam in ("scad-regression", "mcp-regression"):
        z, res, it = _penalty_fb(problem, x, inv_gamma, thresh, max_iter)
        return z, res, it, "forward-backward", thresh
    if fam == "generalized-lasso":
        z, res, it = _lasso_fb(problem, x, inv_gamma, thresh, max_iter)
        return z, res, it, "reparametrized-forward-backward", thresh
    z, res, it = _phase_prox(problem, x, inv_gamma, thresh)
    return z, res, it, "dual-active-set", thresh


def moreau_gradient(problem: ProblemInstance, x, gamma: float, tol: float = DEFAULT_TOL,
                    max_iter: int = MAX_ITER) -> StationarityReport:
    """Envelope gradient (x - prox(x)) / gamma with its certificate."""
    x = np.array(x, dtype=float)
    z, res, it, method, thresh = _prox(problem, x, gamma, tol, max_iter)
    g = (x - z) / gamma
    env = problem.objective(z) + 0.5 * float(np.sum((z - x) ** 2)) / gamma
    return StationarityReport(
        point=x,
        gamma=float(gamma),
        prox_point=z,
        moreau_grad=g,
        moreau_grad_norm_sq=float(np.dot(g, g)),
        prox_residual=float(res),
        subproblem_tolerance=float(thresh),
        envelope_value=float(env),
        iterations=int(it),
        method=method,
    )


def envelope_value(problem: ProblemInstance, x, gamma: float, tol: float = DEFAULT_TOL) -> float:
    return moreau_gradient(problem, x, gamma, tol).envelope_value


def stage_stationarity(problem: ProblemInstance, points, gamma: float,
                       tol: float = DEFAULT_TOL) -> np.ndarray:
    """||grad phi_gamma(x_s)||^2 for every row of ``points``."""
    return np.array([moreau_gradient(problem, p, gamma, tol).moreau_grad_norm_sq for p in points])


def weighted_stationarity(norms_sq, probs) -> float:
    """sum_s p_s ||grad phi_gamma(x_s)||^2."""
    norms_sq = np.asarray(norms_sq, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if norms_sq.shape != probs.shape:
        raise ParameterError("one stationarity value per stage probability is required")
    return float(np.dot(probs, norms_sq))


def projected_gradient(problem: ProblemInstance, x, lam: float) -> np.ndarray:
    """(x - proj(x - lam grad phi(x))) / lam for smooth instances."""
    if not problem.smooth:
        raise UnsupportedError(f"family {problem.family!r} is not smooth")
    if not lam > 0:
        raise ParameterError("lambda must be positive")
    x = problem.check_point(x)
    return (x - project(problem.domain, x - lam * problem.full_gradient(x))) / lam


# ---------------------------------------------------------------------------
# weak convexity
# ---------------------------------------------------------------------------


def objective_batch(problem: ProblemInstance, X) -> np.ndarray:
    """phi at every row of X (no domain check)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    p = problem.params
    fam = problem.family
    if fam == "quadratic":
        h, c = p["curvature"], p["center"]
        return 0.5 * ((X - c) ** 2) @ h + X @ problem.A.mean(axis=0)
    U = X @ problem.A.T
    if fam == "phase-retrieval":
        loss = np.abs(U * U - problem.b).mean(axis=1)
    else:
        R = U - problem.b
        if problem.loss_kind == "truncated":
            loss = (p["alpha"] * np.log1p(R * R / p["alpha"])).mean(axis=1)
        else:
            loss = (0.5 * R * R).mean(axis=1)
    if fam == "scad-regression":
        reg = scad_penalty(X, p["lam"], p["scad_a"]).sum(axis=1)
    elif fam == "mcp-regression":
        reg = mcp_penalty(X, p["lam"], p["mcp_b"]).sum(axis=1)
    elif fam == "generalized-lasso":
        reg = p["lam1"] * np.abs(X @ problem.penalty_matrix.T).sum(axis=1)
    else:
        reg = 0.0
    return loss + reg


def _midpoint_violation(problem, mu, U, V, ts):
    worst = -math.inf
    fu = objective_batch(problem, U) + 0.5 * mu * np.sum(U * U, axis=1)
    fv = objective_batch(problem, V) + 0.5 * mu * np.sum(V * V, axis=1)
    for t in ts:
        W = t * U + (1 - t) * V
        fw = objective_batch(problem, W) + 0.5 * mu * np.sum(W * W, axis=1)
        worst = max(worst, float(np.max(fw - (t * fu + (1 - t) * fv))))
    return worst


def weak_convexity_margin(problem: ProblemInstance, mu_candidate: float, n_pairs: int = 1000,
                          rng: np.random.Generator | None = None, *, scan: bool = False,
                          scale: float | None = None, grid_points: int = 801):
    """Worst violation of midpoint convexity of phi + mu/2 ||x||^2.

    Random mode draws ``n_pairs`` pairs uniformly from the domain (the cube
    [-scale, scale]^d when unbounded; ``scale`` defaults to the instance's
    bound radius) and checks t in {0.25, 0.5, 0.75}.  ``scan=True`` is for
    one-dimensional instances: every pair of a uniform grid of
    ``grid_points`` points on [-scale, scale] (intersected with the domain)
    is checked.  Returns ``(passes, worst_violation)`` with passing meaning
    worst_violation <= 1e-9.
    """
    if n_pairs < 1:
        raise ParameterError("n_pairs must be >= 1")
    dom = problem.domain
    if scale is None:
        scale = problem.metadata.bound_radius or 10.0
    if scan:
        if problem.dimension != 1:
            raise ParameterError("the dense scan is for one-dimensional instances")
        lo, hi = -scale, scale
        if dom.bounded:
            lo = max(lo, float(dom.center[0] - dom.radius) if dom.kind == "ball" else float(dom.lower[0]))
            hi = min(hi, float(dom.center[0] + dom.radius) if dom.kind == "ball" else float(dom.upper[0]))
        g = np.linspace(lo, hi, grid_points)
        iu, iv = np.triu_indices(grid_points, k=1)
        U, V = g[iu, None], g[iv, None]
    else:
        if rng is None:
            raise ParameterError("random pair sampling needs a generator")
        U = dom.sample(rng, n_pairs, scale)
        V = dom.sample(rng, n_pairs, scale)
    worst = _midpoint_violation(problem, float(mu_candidate), U, V, _MIDPOINT_T)
    return worst <= MIDPOINT_SLACK, worst


# ---------------------------------------------------------------------------
# rate fits
# ---------------------------------------------------------------------------


def fit_rate(x_values, y_values) -> RateFit:
    """Least squares of log y on log x."""
    x = np.asarray(x_values, dtype=float)
    y = np.asarray(y_values, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ParameterError("x and y must be matching 1-D sequences")
    if len(x) < 3:
        raise ParameterError("a rate fit needs at least 3 points")
    if np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise DomainError("rate fit needs positive, finite y values")
    if np.any(x <= 0):
        raise DomainError("rate fit needs positive x values")
    lx, ly = np.log(x), np.log(y)
    X = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(X, ly, rcond=None)
    ss_res = float(np.sum((ly - X @ np.array([slope, intercept])) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot <= 1e-300 else max(0.0, min(1.0, 1.0 - ss_res / ss_tot))
    if ss_tot <= 1e-300:
        slope = 0.0
    return RateFit(tuple(x.tolist()), tuple(y.tolist()), float(slope), float(intercept), r2)
