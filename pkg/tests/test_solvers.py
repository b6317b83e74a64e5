import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize

from stagewise_opt import (
    AdaGradState,
    AdmmParams,
    ConvexityError,
    MomentumParams,
    NumericError,
    ParameterError,
    ProxSubproblem,
    UnsupportedDomainError,
    adagrad_solve,
    adagrad_stop_satisfied,
    admm_solve,
    make_problem,
    prox_point,
    sgd_solve,
    soft_threshold,
    sum_solve,
)
from stagewise_opt.solvers import ADAPTIVE_CONDITION, CAP_REACHED


def rng(seed=0):
    return np.random.default_rng(seed)


def half_square(d=1, **kw):
    return ProxSubproblem(make_problem("quadratic", d=d, **kw), np.zeros(d), math.inf)


def constant_gradient(value, **kw):
    """1-D objective with g(x; xi) = value everywhere."""
    pr = make_problem("quadratic", A=[[value]], curvature=0.0, **kw)
    return ProxSubproblem(pr, np.zeros(1), math.inf)


# -- subproblem ----------------------------------------------------------------


def test_subproblem_rejects_nonconvex_gamma():
    pr = make_problem("scad-regression", d=2, scad_a=3.0)
    ProxSubproblem(pr, np.zeros(2), 1.9)
    with pytest.raises(ConvexityError):
        ProxSubproblem(pr, np.zeros(2), 2.0)
    with pytest.raises(ConvexityError):
        ProxSubproblem(pr, np.zeros(2), math.inf)


def test_subproblem_gradient_adds_proximal_term():
    pr = make_problem("truncated-square", d=3, n=10, seed=1)
    anchor = np.array([1.0, -2.0, 0.5])
    sub = ProxSubproblem(pr, anchor, 0.7)
    x = np.array([0.2, 0.1, -0.3])
    np.testing.assert_allclose(sub.sample_gradients(x), pr.sample_gradients(x) + (x - anchor) / 0.7)
    assert sub.objective(x) == pytest.approx(pr.objective(x) + np.sum((x - anchor) ** 2) / 1.4)


# -- SGD -----------------------------------------------------------------------


def test_sgd_hand_trace():
    rep = sgd_solve(half_square(), [1.0], 0.5, 2, rng(), record=True)
    np.testing.assert_array_equal(rep.inner_trace["points"][:, 0], [1.0, 0.5])
    assert rep.averaged_point[0] == 0.75
    assert rep.final_point[0] == 0.25
    assert rep.iterations_used == 2 and rep.stop_reason == "fixed-budget"


def test_sgd_single_step_average_is_start():
    pr = make_problem("truncated-square", d=3, n=10, seed=1)
    start = np.array([0.3, -0.2, 1.0])
    rep = sgd_solve(ProxSubproblem(pr, start, 1.0), start, 0.1, 1, rng())
    np.testing.assert_array_equal(rep.averaged_point, start)


def test_sgd_step_is_projected():
    pr = make_problem("quadratic", A=[[-0.5, 0.0]], curvature=0.0, domain="ball", radius=1.0)
    rep = sgd_solve(ProxSubproblem(pr, np.zeros(2), math.inf), [0.9, 0.0], 0.4, 1, rng())
    np.testing.assert_allclose(rep.final_point, [1.0, 0.0])


def test_sgd_overflow_raises_numeric_error():
    with pytest.raises(NumericError) as info:
        sgd_solve(half_square(), [1.0], 1e200, 5, rng(), stage=3)
    assert info.value.stage == 3
    assert "stage 3" in str(info.value)


def test_sgd_rejects_bad_budget():
    with pytest.raises(ParameterError):
        sgd_solve(half_square(), [1.0], 0.5, 0, rng())
    with pytest.raises(ParameterError):
        sgd_solve(half_square(), [1.0], -0.5, 3, rng())


def test_sgd_matches_python_reference():
    pr = make_problem("phase-retrieval", d=4, n=20, seed=2, domain="ball", radius=2.0)
    anchor = pr.default_start
    sub = ProxSubproblem(pr, anchor, 0.5 / pr.metadata.mu)
    T, eta = 50, 0.01
    rep = sgd_solve(sub, anchor, eta, T, rng(7))
    idx = rng(7).integers(pr.n_samples, size=T)
    x, pts = anchor.copy(), []
    for i in idx:
        pts.append(x)
        x = pr.domain.project(x - eta * sub.sample_gradients(x, rows=[i])[0])
    np.testing.assert_allclose(rep.averaged_point, np.mean(pts, axis=0), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(rep.final_point, x, rtol=1e-12, atol=1e-14)


# -- momentum ------------------------------------------------------------------


def test_sum_with_zero_beta_hand_trace():
    rep = sum_solve(half_square(), [1.0], MomentumParams(0.5, 0.0, 0.0), 1, rng(), record=True)
    np.testing.assert_array_equal(rep.inner_trace["points"][:, 0], [1.0, 0.5])
    assert rep.averaged_point[0] == 0.75
    assert rep.info["averaged_points"] == 2


def test_sum_heavy_ball_hand_trace():
    rep = sum_solve(half_square(), [1.0], MomentumParams(0.5, 0.5, 0.0), 1, rng(), record=True)
    np.testing.assert_array_equal(rep.inner_trace["points"][:, 0], [1.0, 0.5])
    assert rep.averaged_point[0] == 0.75


def test_sum_two_step_hand_trace():
    # x0 = 1, g0 = 1: y1 = 0.5, yr1 = 1 - rho 0.5, x1 = y1 + beta (yr1 - yr0)
    for rho in (0.0, 1.0):
        rep = sum_solve(half_square(), [1.0], MomentumParams(0.5, 0.5, rho), 2, rng(), record=True)
        yr0 = 1.0
        y1, yr1 = 0.5, 1.0 - rho * 0.5
        x1 = y1 + 0.5 * (yr1 - yr0)
        y2, yr2 = x1 - 0.5 * x1, x1 - rho * 0.5 * x1
        x2 = y2 + 0.5 * (yr2 - yr1)
        np.testing.assert_allclose(rep.inner_trace["points"][:, 0], [1.0, x1, x2], rtol=1e-15)
        assert rep.averaged_point[0] == pytest.approx((1.0 + x1 + x2) / 3, rel=1e-15)


def test_sum_rho_irrelevant_without_momentum():
    pr = make_problem("truncated-square", d=4, n=30, seed=3)
    sub = ProxSubproblem(pr, pr.default_start, 1.0)
    a = sum_solve(sub, pr.default_start, MomentumParams(0.05, 0.0, 0.0), 40, rng(1), record=True)
    b = sum_solve(sub, pr.default_start, MomentumParams(0.05, 0.0, 1.0), 40, rng(1), record=True)
    assert np.array_equal(a.inner_trace["points"], b.inner_trace["points"])


def test_sum_without_momentum_is_sgd_bit_exact():
    pr = make_problem("truncated-square", d=4, n=30, seed=3)
    sub = ProxSubproblem(pr, pr.default_start, 1.0)
    T = 60
    m = sum_solve(sub, pr.default_start, MomentumParams(0.05, 0.0, 1.0), T, rng(4), record=True)
    s = sgd_solve(sub, pr.default_start, 0.05, T, rng(4), record=True)
    # momentum counts from x_0, SGD from x_1
    assert np.array_equal(m.inner_trace["points"][:T], s.inner_trace["points"])
    assert np.array_equal(m.final_point, s.final_point)


def test_sum_rejects_bounded_domain():
    pr = make_problem("phase-retrieval", d=2, n=5, domain="ball", radius=1.0)
    sub = ProxSubproblem(pr, np.zeros(2), 0.1)
    with pytest.raises(UnsupportedDomainError):
        sum_solve(sub, np.zeros(2), MomentumParams(0.1, 0.5, 0.0), 5, rng())


def test_momentum_params_validation():
    with pytest.raises(ParameterError):
        MomentumParams(0.1, 1.0, 0.0)
    with pytest.raises(ParameterError):
        MomentumParams(0.1, 0.5, -1.0)
    with pytest.raises(ParameterError):
        MomentumParams(0.0, 0.5, 0.0)


# -- AdaGrad -------------------------------------------------------------------


def test_adagrad_stops_at_first_valid_t():
    expected = next(t for t in range(1, 100) if t >= 2 * max(1 + math.sqrt(t), math.sqrt(t)))
    assert expected == 8
    rep = adagrad_solve(constant_gradient(1.0), [0.0], 0.1, 2.0, 1000, rng(), g_hat=1.0)
    assert rep.iterations_used == expected
    assert rep.stop_reason == ADAPTIVE_CONDITION and not rep.flagged


def test_adagrad_unconstrained_closed_form():
    eta = 0.3
    rep = adagrad_solve(constant_gradient(1.0), [0.5], eta, 2.0, 1000, rng(), g_hat=1.0, record=True)
    t = np.arange(1, rep.iterations_used)
    # H_t = 1 + sqrt(t) and the gradient sum is t
    expected = np.concatenate([[0.5], 0.5 - eta * t / (1.0 + np.sqrt(t))])
    np.testing.assert_allclose(rep.inner_trace["points"][:, 0], expected, rtol=1e-14)
    assert rep.averaged_point[0] == pytest.approx(expected.mean(), rel=1e-14)


def test_adagrad_zero_gradients():
    rep = adagrad_solve(constant_gradient(0.0), [0.2], 0.1, 2.0, 1000, rng(), g_hat=1.5, record=True)
    assert rep.iterations_used == math.ceil(2.0 * 1.5)
    assert np.all(rep.inner_trace["points"] == 0.2)
    assert rep.info["max_row_norm"] == 0.0 and rep.info["row_norm_sum"] == 0.0


def test_adagrad_ball_step_is_weighted_projection():
    pr = make_problem("quadratic", A=[[-3.0, -1.0]], curvature=0.0, domain="ball", radius=1.0)
    sub = ProxSubproblem(pr, np.zeros(2), math.inf)
    x1 = np.array([0.8, 0.5])
    eta = 0.5
    rep = adagrad_solve(sub, x1, eta, 1e6, 1, rng(), g_hat=2.0)
    assert rep.stop_reason == CAP_REACHED and rep.flagged
    g = np.array([-3.0, -1.0])
    h = 2.0 + np.abs(g)
    res = minimize(lambda x: eta * g @ x + 0.5 * (x - x1) @ (h * (x - x1)), x1, method="SLSQP",
                   constraints=[{"type": "ineq", "fun": lambda x: 1.0 - x @ x}], options={"ftol": 1e-14})
    np.testing.assert_allclose(rep.final_point, res.x, atol=1e-7)
    assert np.linalg.norm(rep.final_point) == pytest.approx(1.0, abs=1e-12)


def test_adagrad_box_step_matches_clipping():
    pr = make_problem("quadratic", A=[[3.0, -1.0]], curvature=0.0, domain="box", lower=-0.5, upper=0.5)
    sub = ProxSubproblem(pr, np.zeros(2), math.inf)
    rep = adagrad_solve(sub, [0.1, 0.1], 0.5, 1e6, 1, rng(), g_hat=2.0)
    h = 2.0 + np.array([3.0, 1.0])
    expected = np.clip(np.array([0.1, 0.1]) - 0.5 * np.array([3.0, -1.0]) / h, -0.5, 0.5)
    np.testing.assert_allclose(rep.final_point, expected, rtol=1e-15)


def test_adagrad_matches_python_reference():
    pr = make_problem("truncated-square", d=3, n=15, seed=5, domain="ball", radius=1.5)
    anchor = pr.default_start
    sub = ProxSubproblem(pr, anchor, 1.0)
    ghat = pr.metadata.grad_bound_G + pr.domain.diameter
    rep = adagrad_solve(sub, anchor, 0.2, 3.0, 5000, rng(2), record=True)
    state = AdaGradState.zeros(3, ghat)
    idx = rep.inner_trace["indices"]
    x = anchor.copy()
    for t, i in enumerate(idx, start=1):
        np.testing.assert_allclose(x, rep.inner_trace["points"][t - 1], atol=1e-12)
        state.update(sub.sample_gradients(x, rows=[i])[0])
        if adagrad_stop_satisfied(state, 3.0, ghat):
            break
        h = state.H_diag
        z = anchor - 0.2 * state.grad_sum / h
        # weighted projection onto the ball by bisection on the multiplier
        if np.linalg.norm(z) <= 1.5:
            x = z
        else:
            lo, hi = 0.0, 1e6
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                lo, hi = (mid, hi) if np.linalg.norm(h * z / (h + mid)) > 1.5 else (lo, mid)
            x = h * z / (h + hi)
    assert rep.iterations_used == t == state.t
    assert rep.info["max_row_norm"] == pytest.approx(state.max_row_norm, rel=1e-12)


def test_adagrad_monotone_statistics():
    pr = make_problem("truncated-square", d=4, n=30, seed=6)
    sub = ProxSubproblem(pr, pr.default_start, 1.0)
    rep = adagrad_solve(sub, pr.default_start, 0.1, 2.0, 10_000, rng(3), record=True)
    tr = rep.inner_trace
    assert np.all(np.diff(tr["max_row_norm"]) >= 0)
    assert np.all(np.diff(tr["row_norm_sum"]) >= 0)
    assert np.all(np.diff(tr["g_hat"]) >= 0)


def test_adagrad_running_ghat_covers_observed_gradients():
    pr = make_problem("truncated-square", d=4, n=30, seed=6, alpha=4.0, noise=2.0)
    sub = ProxSubproblem(pr, pr.default_start, 0.3)
    rep = adagrad_solve(sub, pr.default_start, 0.1, 2.0, 10_000, rng(3), record=True)
    assert rep.info["g_hat_running"]
    pts, idx = rep.inner_trace["points"], rep.inner_trace["indices"]
    seen = max(np.max(np.abs(sub.sample_gradients(x, rows=[i])[0])) for x, i in zip(pts, idx))
    assert rep.info["g_hat"] >= seen


def test_adagrad_cap_flags_report():
    rep = adagrad_solve(constant_gradient(1.0), [0.0], 0.1, 50.0, 20, rng(), g_hat=1.0)
    assert rep.iterations_used == 20 and rep.stop_reason == CAP_REACHED and rep.flagged


def test_stop_predicate_examples():
    def state(t):
        return AdaGradState(1.0, np.array([float(t)]), np.array([float(t)]), math.sqrt(t), math.sqrt(t), t)

    assert adagrad_stop_satisfied(state(8), 2.0, 1.0)
    assert not adagrad_stop_satisfied(state(7), 2.0, 1.0)
    zero = AdaGradState(1.0, np.zeros(1), np.zeros(1), 0.0, 0.0, 1)
    assert adagrad_stop_satisfied(zero, 1.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (20, 3), elements=st.floats(-5, 5)))
def test_state_update_is_incremental(grads):
    s = AdaGradState.zeros(3, 1.0)
    prev = s.H_diag.copy()
    for k, g in enumerate(grads, start=1):
        s.update(g)
        rows = np.sqrt(np.sum(grads[:k] ** 2, axis=0))
        assert s.max_row_norm == pytest.approx(rows.max(), rel=1e-12, abs=1e-300)
        assert s.row_norm_sum == pytest.approx(rows.sum(), rel=1e-12, abs=1e-300)
        assert np.all(s.H_diag >= prev)
        prev = s.H_diag.copy()


# -- ADMM ----------------------------------------------------------------------


def lasso_sub(gamma=1.0, anchor=0.0, **kw):
    pr = make_problem("generalized-lasso", **kw)
    return ProxSubproblem(pr, np.full(pr.dimension, anchor), gamma)


def test_admm_one_dimensional_update():
    # zero data term; proximal term gives g = x_1 = 1; y_1 = D x_1 = 1
    sub = lasso_sub(gamma=1.0, A=[[0.0]], b=[0.0], penalty_matrix=[[1.0]], lam1=0.4)
    params = AdmmParams(0.5, 2.0, [[1.0]], 0.4, alpha_c=2.0)
    np.testing.assert_allclose(params.C, [[1.0]])
    rep = admm_solve(sub, [1.0], params, 1, rng(), record=True)
    # minimize x - 2x + x^2 + 2 (x - 1)^2
    assert rep.final_point[0] == pytest.approx(5.0 / 6.0, rel=1e-14)
    v = 5.0 / 6.0
    assert rep.inner_trace["y"][0, 0] == pytest.approx(v - 0.2, rel=1e-14)
    assert rep.info["dual"][0] == pytest.approx(-2.0 * (v - (v - 0.2)), rel=1e-13)


def test_admm_quadratic_update_against_numeric_minimizer():
    sub = lasso_sub(gamma=2.0, d=4, n=10, seed=1, lam1=0.3)
    pr = sub.base
    D = pr.penalty_matrix
    params = AdmmParams(0.2, 3.0, D, 0.3)
    x1 = pr.default_start
    rep = admm_solve(sub, x1, params, 1, rng(5), record=True)
    i = rep.inner_trace["indices"][0]
    # the l1 term is split off, so only the data term and the proximal term enter g
    a = pr.A[i]
    g = a * (a @ x1 - pr.b[i]) + (x1 - sub.anchor) / 2.0
    y = D @ x1
    C = params.C

    def f(x):
        return g @ x - (3.0 * y) @ (D @ x) + 1.5 * np.sum((D @ x) ** 2) + (x - x1) @ C @ (x - x1) / 0.2

    res = minimize(f, x1, method="BFGS", options={"gtol": 1e-12})
    np.testing.assert_allclose(rep.final_point, res.x, atol=1e-7)
    assert rep.inner_trace["x_update_residuals"][0] <= 1e-8


def test_admm_y_and_dual_updates():
    sub = lasso_sub(gamma=1.0, d=6, n=20, seed=2, lam1=0.2)
    D = sub.base.penalty_matrix
    beta = 1.5
    rep = admm_solve(sub, sub.base.default_start, AdmmParams(0.1, beta, D, 0.2), 200, rng(6), record=True)
    tr = rep.inner_trace
    xs = np.vstack([tr["points"][1:], rep.final_point])
    lam = np.zeros(D.shape[0])
    for x_next, y in zip(xs, tr["y"]):
        expected = soft_threshold(D @ x_next - lam / beta, 0.2 / beta)
        np.testing.assert_allclose(y, expected, rtol=0, atol=1e-12)
        lam = lam - beta * (D @ x_next - y)
    np.testing.assert_allclose(lam, rep.info["dual"], atol=1e-10)
    assert np.max(tr["x_update_residuals"]) <= 1e-8


def test_admm_params_require_c_at_least_identity():
    D = np.array([[1.0, -1.0]])
    with pytest.raises(ParameterError):
        AdmmParams(1.0, 1.0, D, 0.1, alpha_c=2.0)
    p = AdmmParams(1.0, 1.0, D, 0.1)
    assert np.linalg.eigvalsh(p.C)[0] >= 1.0 - 1e-12


def test_admm_rejects_other_families():
    pr = make_problem("truncated-square", d=2, n=5)
    sub = ProxSubproblem(pr, np.zeros(2), 1.0)
    with pytest.raises(Exception):
        admm_solve(sub, np.zeros(2), AdmmParams(0.1, 1.0, np.eye(2), 0.1), 5, rng())


# -- soft threshold ------------------------------------------------------------


def test_soft_threshold_examples():
    np.testing.assert_allclose(soft_threshold([1.5, -0.3], 0.5), [1.0, 0.0])
    v = np.array([0.2, -4.0, 0.0])
    np.testing.assert_array_equal(soft_threshold(v, 0.0), v)
    np.testing.assert_array_equal(soft_threshold(np.zeros(3), 2.0), np.zeros(3))
    with pytest.raises(ParameterError):
        soft_threshold(v, -1.0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)), st.floats(0, 100))
def test_soft_threshold_is_l1_prox(v, kappa):
    y = soft_threshold(v, kappa)
    r = v - y
    # optimality: v - y lies in kappa * subdifferential of |y|
    nz = y != 0
    np.testing.assert_allclose(r[nz], kappa * np.sign(y[nz]), atol=1e-9 * (1 + abs(kappa)))
    assert np.all(np.abs(r[~nz]) <= kappa + 1e-12)


# -- convergence on a deterministic instance -----------------------------------


def _distance_after(solve, budget):
    return np.linalg.norm(solve(budget) - TARGET)


QUAD = make_problem("quadratic", d=3, center=[1.0, -2.0, 0.5], curvature=[1.0, 2.0, 0.5])
ANCHOR = np.array([0.0, 1.0, -1.0])
SUB = ProxSubproblem(QUAD, ANCHOR, 1.0)
TARGET = (QUAD.params["curvature"] * QUAD.params["center"] + ANCHOR) / (QUAD.params["curvature"] + 1.0)


@pytest.mark.parametrize("name", ["sgd", "sum", "adagrad"])
def test_solvers_approach_unique_minimizer(name):
    start = np.zeros(3)
    solve = {
        "sgd": lambda T: sgd_solve(SUB, start, 0.05, T, rng()).averaged_point,
        "sum": lambda T: sum_solve(SUB, start, MomentumParams(0.05, 0.5, 1.0), T, rng()).averaged_point,
        "adagrad": lambda M: adagrad_solve(SUB, start, 0.5, M, 10**6, rng()).averaged_point,
    }[name]
    d1, d2 = _distance_after(solve, 100), _distance_after(solve, 1000)
    assert d2 < d1


def test_admm_approaches_unique_minimizer():
    pr = make_problem("generalized-lasso", d=5, n=1, seed=3, lam1=0.2)
    sub = ProxSubproblem(pr, pr.default_start, 1.0)
    target = prox_point(pr, pr.default_start, 1.0, tol=1e-12)
    params = AdmmParams(0.1, 1.0, pr.penalty_matrix, 0.2)
    dist = [np.linalg.norm(admm_solve(sub, pr.default_start, params, T, rng()).averaged_point - target)
            for T in (100, 1000)]
    assert dist[1] < dist[0]
