"""Compiled inner loops.

The solvers in :mod:`stagewise_opt.solvers` validate inputs, draw sample
indices from the caller's generator and hand flat arrays to the loops here.
Problem data are packed by :func:`pack_problem`; domains by
:func:`pack_domain`.  Status codes: 0 finished, 1 non-finite iterate,
2 adaptive stop, 3 cap reached.
"""

import math

import numpy as np
from numba import njit

QUADRATIC, PHASE, TRUNCATED, SCAD, MCP, GENLASSO = range(6)
FAMILY_CODES = {
    "quadratic": QUADRATIC,
    "phase-retrieval": PHASE,
    "truncated-square": TRUNCATED,
    "scad-regression": SCAD,
    "mcp-regression": MCP,
    "generalized-lasso": GENLASSO,
}
UNCONSTRAINED, BALL, BOX = range(3)

OK, NONFINITE, ADAPTIVE_STOP, CAP_REACHED = range(4)


def pack_problem(problem):
    """(code, A, b, fparams, center, curvature, D) for the compiled loops."""
    p = problem.params
    d = problem.dimension
    fp = np.zeros(6)
    fp[0] = p.get("alpha", 1.0)
    fp[1] = p.get("lam", 0.0)
    fp[2] = p.get("scad_a", 3.0)
    fp[3] = p.get("mcp_b", 1.0)
    fp[4] = p.get("lam1", 0.0)
    fp[5] = 1.0 if problem.loss_kind == "truncated" else 0.0
    center = np.asarray(p.get("center", np.zeros(d)), dtype=np.float64)
    curv = np.asarray(p.get("curvature", np.zeros(d)), dtype=np.float64)
    D = problem.penalty_matrix if problem.penalty_matrix is not None else np.zeros((0, d))
    return (
        FAMILY_CODES[problem.family],
        np.ascontiguousarray(problem.A),
        np.ascontiguousarray(problem.b),
        fp,
        np.ascontiguousarray(center),
        np.ascontiguousarray(curv),
        np.ascontiguousarray(D, dtype=np.float64),
    )


def pack_domain(domain):
    d = domain.dimension
    if domain.kind == "ball":
        return BALL, np.ascontiguousarray(domain.center), float(domain.radius), np.zeros(d), np.zeros(d)
    if domain.kind == "box":
        return BOX, np.zeros(d), 0.0, np.ascontiguousarray(domain.lower), np.ascontiguousarray(domain.upper)
    return UNCONSTRAINED, np.zeros(d), 0.0, np.zeros(d), np.zeros(d)


@njit(cache=True)
def _sign(v):
    if v > 0.0:
        return 1.0
    if v < 0.0:
        return -1.0
    return 0.0


@njit(cache=True)
def sample_grad(code, A, b, fp, center, curv, D, i, x, loss_only, out):
    """Write g(x; xi_i) into ``out``."""
    d = x.shape[0]
    if code == QUADRATIC:
        for j in range(d):
            out[j] = curv[j] * (x[j] - center[j]) + A[i, j]
        return
    u = 0.0
    for j in range(d):
        u += A[i, j] * x[j]
    if code == PHASE:
        w = 2.0 * _sign(u * u - b[i]) * u
    else:
        r = u - b[i]
        if code == TRUNCATED or (code == GENLASSO and fp[5] == 1.0):
            w = 2.0 * r / (1.0 + r * r / fp[0])
        else:
            w = r
    for j in range(d):
        out[j] = w * A[i, j]
    if loss_only:
        return
    if code == SCAD:
        lam = fp[1]
        a = fp[2]
        for j in range(d):
            ax = abs(x[j])
            if ax <= lam:
                mag = lam
            elif ax <= a * lam:
                mag = (a * lam - ax) / (a - 1.0)
            else:
                mag = 0.0
            out[j] += _sign(x[j]) * mag
    elif code == MCP:
        lam = fp[1]
        bb = fp[3]
        for j in range(d):
            ax = abs(x[j])
            if ax <= bb * lam:
                out[j] += _sign(x[j]) * (lam - ax / bb)
    elif code == GENLASSO:
        lam1 = fp[4]
        for k in range(D.shape[0]):
            s = 0.0
            for j in range(d):
                s += D[k, j] * x[j]
            sg = _sign(s)
            if sg != 0.0:
                for j in range(d):
                    out[j] += lam1 * sg * D[k, j]


@njit(cache=True)
def project_inplace(dom, dc, dr, dl, du, x):
    d = x.shape[0]
    if dom == BALL:
        nrm = 0.0
        for j in range(d):
            nrm += (x[j] - dc[j]) ** 2
        nrm = math.sqrt(nrm)
        if nrm > dr:
            scale = dr / nrm
            for j in range(d):
                x[j] = dc[j] + (x[j] - dc[j]) * scale
    elif dom == BOX:
        for j in range(d):
            if x[j] < dl[j]:
                x[j] = dl[j]
            elif x[j] > du[j]:
                x[j] = du[j]


@njit(cache=True)
def weighted_ball_projection(h, y, dc, dr, out):
    """argmin_x sum_j h_j (x_j - y_j)^2 subject to ||x - c|| <= r (h > 0)."""
    d = y.shape[0]
    nrm = 0.0
    for j in range(d):
        nrm += (y[j] - dc[j]) ** 2
    if math.sqrt(nrm) <= dr:
        for j in range(d):
            out[j] = y[j]
        return
    # ||x(nu) - c|| is decreasing in nu; bracket and bisect on the secular equation
    hmax = 0.0
    for j in range(d):
        hmax = max(hmax, h[j])
    lo = 0.0
    hi = hmax * math.sqrt(nrm) / dr
    for _ in range(200):
        nu = 0.5 * (lo + hi)
        s = 0.0
        for j in range(d):
            s += (h[j] * (y[j] - dc[j]) / (h[j] + nu)) ** 2
        if s > dr * dr:
            lo = nu
        else:
            hi = nu
        if hi - lo <= 1e-15 * hi:
            break
    s = 0.0
    for j in range(d):
        out[j] = dc[j] + h[j] * (y[j] - dc[j]) / (h[j] + hi)
        s += (out[j] - dc[j]) ** 2
    s = math.sqrt(s)
    if s > dr:
        for j in range(d):
            out[j] = dc[j] + (out[j] - dc[j]) * (dr / s)


@njit(cache=True)
def sgd_loop(code, A, b, fp, center, curv, D, dom, dc, dr, dl, du,
             anchor, inv_gamma, x1, etas, idx, keep, record):
    """Projected stochastic subgradient steps; returns the average of x_1..x_T."""
    T = idx.shape[0]
    d = x1.shape[0]
    x = x1.copy()
    acc = np.zeros(d)
    g = np.empty(d)
    kept = x1.copy()
    ntrace = T if record else 0
    trace = np.empty((ntrace, d))
    steps = np.empty(ntrace)
    for t in range(T):
        for j in range(d):
            acc[j] += x[j]
        if t == keep:
            kept[:] = x
        if record:
            trace[t, :] = x
        sample_grad(code, A, b, fp, center, curv, D, idx[t], x, False, g)
        eta = etas[t]
        step = 0.0
        finite = True
        for j in range(d):
            g[j] += inv_gamma * (x[j] - anchor[j])
            old = x[j]
            x[j] = old - eta * g[j]
        project_inplace(dom, dc, dr, dl, du, x)
        for j in range(d):
            if not math.isfinite(x[j]):
                finite = False
        if record:
            for j in range(d):
                step += (x[j] - trace[t, j]) ** 2
            steps[t] = math.sqrt(step)
        if not finite:
            return acc / (t + 1), x, NONFINITE, t + 1, kept, trace, steps
    return acc / T, x, OK, T, kept, trace, steps


@njit(cache=True)
def sum_loop(code, A, b, fp, center, curv, D, anchor, inv_gamma, x0,
             eta, beta, rho, idx, record):
    """Unified momentum; returns the average of x_0..x_T with T = len(idx)."""
    T = idx.shape[0]
    d = x0.shape[0]
    x = x0.copy()
    y_rho_prev = x0.copy()
    acc = np.zeros(d)
    g = np.empty(d)
    ntrace = T + 1 if record else 0
    trace = np.empty((ntrace, d))
    for t in range(T):
        for j in range(d):
            acc[j] += x[j]
        if record:
            trace[t, :] = x
        sample_grad(code, A, b, fp, center, curv, D, idx[t], x, False, g)
        finite = True
        for j in range(d):
            gj = g[j] + inv_gamma * (x[j] - anchor[j])
            y = x[j] - eta * gj
            y_rho = x[j] - rho * eta * gj
            x[j] = y + beta * (y_rho - y_rho_prev[j])
            y_rho_prev[j] = y_rho
            if not math.isfinite(x[j]):
                finite = False
        if not finite:
            return acc / (t + 1), x, NONFINITE, t + 1, trace
    for j in range(d):
        acc[j] += x[j]
    if record:
        trace[T, :] = x
    return acc / (T + 1), x, OK, T, trace


@njit(cache=True)
def adagrad_loop(code, A, b, fp, center, curv, D, dom, dc, dr, dl, du,
                 anchor, inv_gamma, x1, eta, M, mode, T0, s_index, cap, ghat_running,
                 x, cum_sq, grad_sum, acc, sc, idx, record):
    """Resumable AdaGrad dual averaging with the adaptive stopping rule.

    ``sc`` holds [t, max_row_norm, row_norm_sum, g_hat, realized_max] and is
    updated in place, as are ``x``, ``cum_sq``, ``grad_sum`` and ``acc``.
    ``mode`` 0 is the stopping rule t >= M max(g_hat + max_row, row_sum);
    mode 1 the rule t > T0 sqrt(s max_row row_sum).  H_0 = g_hat I, so a
    running g_hat only ever enlarges H_t.
    """
    d = x.shape[0]
    g = np.empty(d)
    H = np.empty(d)
    y = np.empty(d)
    n_it = idx.shape[0]
    ntrace = n_it if record else 0
    trace = np.empty((ntrace, d))
    hist = np.empty((ntrace, 3))
    for k in range(n_it):
        t = sc[0] + 1.0
        sc[0] = t
        for j in range(d):
            acc[j] += x[j]
        if record:
            trace[k, :] = x
        sample_grad(code, A, b, fp, center, curv, D, idx[k], x, False, g)
        gmax = 0.0
        for j in range(d):
            g[j] += inv_gamma * (x[j] - anchor[j])
            gmax = max(gmax, abs(g[j]))
            grad_sum[j] += g[j]
            old = cum_sq[j]
            new = old + g[j] * g[j]
            cum_sq[j] = new
            rn = math.sqrt(new)
            sc[2] += rn - math.sqrt(old)
            if rn > sc[1]:
                sc[1] = rn
        sc[4] = max(sc[4], gmax)
        if ghat_running:
            sc[3] = max(sc[3], 1.1 * sc[4])
        for j in range(d):
            H[j] = sc[3] + math.sqrt(cum_sq[j])
            y[j] = x1[j] - eta * grad_sum[j] / H[j]
        if dom == BALL:
            weighted_ball_projection(H, y, dc, dr, x)
        else:
            for j in range(d):
                x[j] = y[j]
            if dom == BOX:
                project_inplace(dom, dc, dr, dl, du, x)
        if record:
            hist[k, 0] = sc[1]
            hist[k, 1] = sc[2]
            hist[k, 2] = sc[3]
        for j in range(d):
            if not math.isfinite(x[j]):
                return NONFINITE, k + 1, trace, hist
        if mode == 0:
            stop = t >= M * max(sc[3] + sc[1], sc[2])
        else:
            stop = t > T0 * math.sqrt(s_index * sc[1] * sc[2])
        if stop:
            return ADAPTIVE_STOP, k + 1, trace, hist
        if t >= cap:
            return CAP_REACHED, k + 1, trace, hist
    return OK, n_it, trace, hist


@njit(cache=True)
def _cho_solve(Lc, rhs, out):
    d = rhs.shape[0]
    z = np.empty(d)
    for i in range(d):
        s = rhs[i]
        for k in range(i):
            s -= Lc[i, k] * z[k]
        z[i] = s / Lc[i, i]
    for i in range(d - 1, -1, -1):
        s = z[i]
        for k in range(i + 1, d):
            s -= Lc[k, i] * out[k]
        out[i] = s / Lc[i, i]


@njit(cache=True)
def admm_loop(code, A, b, fp, center, curv, D, anchor, inv_gamma, x1,
              eta, beta, alpha_c, lam1, Lc, idx, record):
    """Linearized stochastic ADMM for loss + lam1 ||D x||_1.

    ``Lc`` is the lower Cholesky factor of beta D^T D + 2 C / eta with
    C = alpha_c I - eta beta D^T D.
    """
    T = idx.shape[0]
    d = x1.shape[0]
    m = D.shape[0]
    x = x1.copy()
    y = D @ x1
    lam = np.zeros(m)
    acc = np.zeros(d)
    g = np.empty(d)
    rhs = np.empty(d)
    xn = np.empty(d)
    kappa = lam1 / beta
    ntrace = T if record else 0
    v_tr = np.empty((ntrace, m))
    y_tr = np.empty((ntrace, m))
    x_tr = np.empty((ntrace, d))
    res_tr = np.empty(ntrace)
    for t in range(T):
        for j in range(d):
            acc[j] += x[j]
        if record:
            x_tr[t, :] = x
        sample_grad(code, A, b, fp, center, curv, D, idx[t], x, True, g)
        Dx = D @ x
        w = D.T @ (beta * y + lam)
        DtDx = D.T @ Dx
        for j in range(d):
            g[j] += inv_gamma * (x[j] - anchor[j])
            rhs[j] = -g[j] + w[j] + (2.0 / eta) * (alpha_c * x[j] - eta * beta * DtDx[j])
        _cho_solve(Lc, rhs, xn)
        Dxn = D @ xn
        for k in range(m):
            v = Dxn[k] - lam[k] / beta
            av = abs(v) - kappa
            y[k] = _sign(v) * av if av > 0.0 else 0.0
            lam[k] = lam[k] - beta * (Dxn[k] - y[k])
            if record:
                v_tr[t, k] = v
                y_tr[t, k] = y[k]
        if record:
            # first-order optimality residual of the x-subproblem
            DtDxn = D.T @ Dxn
            r = 0.0
            for j in range(d):
                q = beta * DtDxn[j] + (2.0 / eta) * (alpha_c * xn[j] - eta * beta * DtDxn[j])
                r += (q - rhs[j]) ** 2
            res_tr[t] = math.sqrt(r)
        finite = True
        for j in range(d):
            x[j] = xn[j]
            if not math.isfinite(x[j]):
                finite = False
        if not finite:
            return acc / (t + 1), x, y, lam, NONFINITE, t + 1, x_tr, v_tr, y_tr, res_tr
    return acc / T, x, y, lam, OK, T, x_tr, v_tr, y_tr, res_tr
