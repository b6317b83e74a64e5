"""Stochastic weakly convex problem instances.

Every instance is a finite-sum objective

    phi(x) = (1/n) sum_i phi(x; xi_i),    x in Omega,

where the expectation over the sampling variable is realized as a uniform
average over a stored dataset of rows ``a_i`` and targets ``b_i``.  The
families are:

``quadratic``
    phi(x; z_i) = 1/2 sum_j h_j (x_j - c_j)^2 + z_i^T x.  Convex.
``phase-retrieval``
    phi(x; a, b) = |(a^T x)^2 - b|.
``truncated-square``
    phi(x; a, b) = alpha * log(1 + (a^T x - b)^2 / alpha).  Smooth.
``scad-regression`` / ``mcp-regression``
    phi(x; a, b) = 1/2 (a^T x - b)^2 + sum_j g_lam(x_j) with the SCAD or MCP
    penalty.
``generalized-lasso``
    phi(x; a, b) = loss(a^T x - b) + lam1 * ||D x||_1, loss being the square
    or the truncated square.

Instances are immutable; randomness lives in the caller's generator.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import DimensionError, DomainError, ParameterError, UnsupportedError

FAMILIES = (
    "quadratic",
    "phase-retrieval",
    "truncated-square",
    "scad-regression",
    "mcp-regression",
    "generalized-lasso",
)

#: Families whose objective is continuously differentiable.
SMOOTH_FAMILIES = frozenset({"quadratic", "truncated-square"})

# Relative slack for domain membership; iterates come out of projections.
_MEMBERSHIP_RTOL = 1e-9


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# Domain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Domain:
    """A closed convex feasible set.

    Use the :meth:`unconstrained`, :meth:`ball` and :meth:`box`
    constructors rather than the raw initializer.
    """

    kind: str
    dimension: int
    center: np.ndarray | None = None
    radius: float | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    @classmethod
    def unconstrained(cls, dimension: int) -> "Domain":
        return cls("unconstrained", int(dimension))

    @classmethod
    def ball(cls, dimension: int, radius: float, center=None) -> "Domain":
        if not radius > 0:
            raise ParameterError(f"ball radius must be positive, got {radius}")
        c = np.zeros(dimension) if center is None else np.broadcast_to(center, (dimension,))
        return cls("ball", int(dimension), center=_frozen(c), radius=float(radius))

    @classmethod
    def box(cls, dimension: int, lower, upper) -> "Domain":
        lo = np.broadcast_to(np.asarray(lower, dtype=float), (dimension,))
        hi = np.broadcast_to(np.asarray(upper, dtype=float), (dimension,))
        if np.any(lo > hi):
            raise ParameterError("box lower bound exceeds upper bound")
        return cls("box", int(dimension), lower=_frozen(lo), upper=_frozen(hi))

    @property
    def bounded(self) -> bool:
        if self.kind == "box":
            return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))
        return self.kind == "ball"

    @property
    def diameter(self) -> float | None:
        """Exact Euclidean diameter, ``None`` when unbounded."""
        if not self.bounded:
            return None
        if self.kind == "ball":
            return 2.0 * self.radius
        return float(np.linalg.norm(self.upper - self.lower))

    def max_norm(self) -> float:
        """sup of ||x|| over the domain (inf when unbounded)."""
        if not self.bounded:
            return math.inf
        if self.kind == "ball":
            return float(np.linalg.norm(self.center)) + self.radius
        return float(np.linalg.norm(self.max_abs_coords()))

    def max_abs_coords(self) -> np.ndarray:
        """Coordinate-wise sup of |x_j| over the domain."""
        if self.kind == "ball":
            return np.abs(self.center) + self.radius
        if self.kind == "box":
            return np.maximum(np.abs(self.lower), np.abs(self.upper))
        return np.full(self.dimension, math.inf)

    def project(self, x) -> np.ndarray:
        return project(self, x)

    def contains(self, x, rtol: float = _MEMBERSHIP_RTOL) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dimension,):
            return False
        if not np.all(np.isfinite(x)):
            return False
        if self.kind == "ball":
            return bool(np.linalg.norm(x - self.center) <= self.radius * (1 + rtol) + rtol)
        if self.kind == "box":
            slack = rtol * (1 + np.abs(x))
            return bool(np.all(x >= self.lower - slack) and np.all(x <= self.upper + slack))
        return True

    def sample(self, rng: np.random.Generator, size: int, scale: float = 1.0) -> np.ndarray:
        """Uniform draws from the domain; unbounded domains use the cube [-scale, scale]^d."""
        d = self.dimension
        if self.kind == "ball":
            direction = rng.standard_normal((size, d))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            r = self.radius * rng.random(size) ** (1.0 / d)
            return self.center + direction * r[:, None]
        if self.kind == "box" and self.bounded:
            return self.lower + (self.upper - self.lower) * rng.random((size, d))
        return rng.uniform(-scale, scale, size=(size, d))

    def to_spec(self) -> dict:
        if self.kind == "ball":
            return {"domain": "ball", "radius": self.radius, "ball_center": self.center.tolist()}
        if self.kind == "box":
            return {"domain": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}
        return {"domain": "unconstrained"}


def project(domain: Domain, x) -> np.ndarray:
    """Euclidean projection onto ``domain``."""
    x = np.asarray(x, dtype=float)
    if domain.kind == "ball":
        diff = x - domain.center
        norm = np.linalg.norm(diff)
        if norm <= domain.radius:
            return x.copy()
        return domain.center + diff * (domain.radius / norm)
    if domain.kind == "box":
        return np.clip(x, domain.lower, domain.upper)
    return x.copy()


# ---------------------------------------------------------------------------
# Scalar penalties
# ---------------------------------------------------------------------------


def scad_penalty(x, lam: float, a: float) -> np.ndarray:
    ax = np.abs(x)
    return np.where(
        ax <= lam,
        lam * ax,
        np.where(
            ax <= a * lam,
            -(ax**2 - 2 * a * lam * ax + lam**2) / (2 * (a - 1)),
            (a + 1) * lam**2 / 2,
        ),
    )


def scad_derivative(x, lam: float, a: float) -> np.ndarray:
    """A Frechet subgradient of the SCAD penalty (0 at the origin)."""
    ax = np.abs(x)
    mag = np.where(ax <= lam, lam, np.where(ax <= a * lam, (a * lam - ax) / (a - 1), 0.0))
    return np.sign(x) * mag


def scad_prox(v, t: float, lam: float, a: float) -> np.ndarray:
    """argmin_u t*scad(u) + (u - v)^2 / 2, valid for t < a - 1."""
    if not t < a - 1:
        raise ParameterError(f"SCAD prox needs t < a - 1, got t={t}, a={a}")
    v = np.asarray(v, dtype=float)
    av = np.abs(v)
    sv = np.sign(v)
    soft = sv * np.maximum(av - t * lam, 0.0)
    mid = ((a - 1) * v - sv * t * a * lam) / (a - 1 - t)
    return np.where(av <= lam * (1 + t), soft, np.where(av <= a * lam, mid, v))


def mcp_penalty(x, lam: float, b: float) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax <= b * lam, lam * ax - ax**2 / (2 * b), b * lam**2 / 2)


def mcp_derivative(x, lam: float, b: float) -> np.ndarray:
    ax = np.abs(x)
    return np.sign(x) * np.where(ax <= b * lam, lam - ax / b, 0.0)


def mcp_prox(v, t: float, lam: float, b: float) -> np.ndarray:
    """Firm thresholding: argmin_u t*mcp(u) + (u - v)^2 / 2, valid for t < b."""
    if not t < b:
        raise ParameterError(f"MCP prox needs t < b, got t={t}, b={b}")
    v = np.asarray(v, dtype=float)
    av = np.abs(v)
    firm = np.sign(v) * np.maximum(av - t * lam, 0.0) / (1 - t / b)
    return np.where(av <= b * lam, firm, v)


def first_difference_matrix(d: int) -> np.ndarray:
    """The (d-1) x d forward-difference operator."""
    D = np.zeros((d - 1, d))
    idx = np.arange(d - 1)
    D[idx, idx] = -1.0
    D[idx, idx + 1] = 1.0
    return D


# ---------------------------------------------------------------------------
# Instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleMetadata:
    """Analytic constants of an instance.

    ``grad_bound_G`` bounds ||g(x; xi)||_inf over the domain.  On unbounded
    domains it is computed over the ball of radius ``bound_radius`` and
    ``grad_bound_global`` is False.
    """

    mu: float
    grad_bound_G: float
    lipschitz_L: float | None = None
    delta_phi: float | None = None
    grad_bound_global: bool = True
    bound_radius: float | None = None

    def __post_init__(self):
        if not self.mu >= 0:
            raise ParameterError(f"mu must be >= 0, got {self.mu}")
        if not self.grad_bound_G > 0:
            raise ParameterError(f"G must be > 0, got {self.grad_bound_G}")
        if self.lipschitz_L is not None and self.lipschitz_L < self.mu:
            raise ParameterError("smoothness constant L must be >= mu")


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    family: str
    dimension: int
    domain: Domain
    A: np.ndarray
    b: np.ndarray
    params: Mapping[str, Any]
    metadata: OracleMetadata
    penalty_matrix: np.ndarray | None = None
    planted: np.ndarray | None = None
    default_start: np.ndarray | None = None
    spec: Mapping[str, Any] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.A.shape[0]

    @property
    def smooth(self) -> bool:
        return self.family in SMOOTH_FAMILIES

    @property
    def loss_kind(self) -> str:
        if self.family == "truncated-square":
            return "truncated"
        if self.family == "generalized-lasso":
            return self.params["loss"]
        return "square"

    # -- residual-level pieces ------------------------------------------------

    def _loss_values(self, x: np.ndarray) -> np.ndarray:
        """Per-sample data term (everything except the separable/structured regularizer)."""
        fam = self.family
        if fam == "quadratic":
            h, c = self.params["curvature"], self.params["center"]
            return 0.5 * np.dot(h, (x - c) ** 2) + self.A @ x
        u = self.A @ x
        if fam == "phase-retrieval":
            return np.abs(u * u - self.b)
        r = u - self.b
        if self.loss_kind == "truncated":
            alpha = self.params["alpha"]
            return alpha * np.log1p(r * r / alpha)
        return 0.5 * r * r

    def _weights(self, u: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Scalar w_i with grad of the data term = w_i a_i (non-quadratic families)."""
        if self.family == "phase-retrieval":
            # sign(0) := 0 at the kink
            return 2.0 * np.sign(u * u - b) * u
        r = u - b
        if self.loss_kind == "truncated":
            return 2.0 * r / (1.0 + r * r / self.params["alpha"])
        return r

    def _loss_grads(self, x: np.ndarray, rows=None) -> np.ndarray:
        A = self.A if rows is None else self.A[rows]
        if self.family == "quadratic":
            h, c = self.params["curvature"], self.params["center"]
            return h * (x - c) + A
        b = self.b if rows is None else self.b[rows]
        return self._weights(A @ x, b)[:, None] * A

    def regularizer_value(self, x: np.ndarray) -> float:
        fam = self.family
        p = self.params
        if fam == "scad-regression":
            return float(np.sum(scad_penalty(x, p["lam"], p["scad_a"])))
        if fam == "mcp-regression":
            return float(np.sum(mcp_penalty(x, p["lam"], p["mcp_b"])))
        if fam == "generalized-lasso":
            return float(p["lam1"] * np.sum(np.abs(self.penalty_matrix @ x)))
        return 0.0

    def regularizer_subgradient(self, x: np.ndarray) -> np.ndarray:
        fam = self.family
        p = self.params
        if fam == "scad-regression":
            return scad_derivative(x, p["lam"], p["scad_a"])
        if fam == "mcp-regression":
            return mcp_derivative(x, p["lam"], p["mcp_b"])
        if fam == "generalized-lasso":
            D = self.penalty_matrix
            return p["lam1"] * (D.T @ np.sign(D @ x))
        return np.zeros(self.dimension)

    # -- public oracle ----------------------------------------------------------

    def check_point(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dimension,):
            raise DimensionError(f"expected a vector of length {self.dimension}, got shape {x.shape}")
        if not self.domain.contains(x):
            raise DomainError(f"point lies outside the {self.domain.kind} domain")
        return x

    def sample_values(self, x) -> np.ndarray:
        """phi(x; xi_i) for every stored sample."""
        x = np.asarray(x, dtype=float)
        return self._loss_values(x) + self.regularizer_value(x)

    def sample_gradients(self, x, rows=None) -> np.ndarray:
        """Rows of g(x; xi_i) for every (or the selected) sample."""
        x = np.asarray(x, dtype=float)
        return self._loss_grads(x, rows) + self.regularizer_subgradient(x)

    def full_objective(self, x) -> float:
        x = self.check_point(x)
        return float(np.mean(self._loss_values(x)) + self.regularizer_value(x))

    def objective(self, x) -> float:
        """Objective without the domain check (used inside solvers)."""
        x = np.asarray(x, dtype=float)
        return float(np.mean(self._loss_values(x)) + self.regularizer_value(x))

    def loss_objective(self, x) -> float:
        return float(np.mean(self._loss_values(np.asarray(x, dtype=float))))

    def loss_gradient(self, x) -> np.ndarray:
        """Exact gradient of the averaged data term."""
        x = np.asarray(x, dtype=float)
        if self.family == "quadratic":
            h, c = self.params["curvature"], self.params["center"]
            return h * (x - c) + self.A.mean(axis=0)
        if self.family == "phase-retrieval":
            raise UnsupportedError("phase retrieval has no smooth data term")
        return self.A.T @ self._weights(self.A @ x, self.b) / self.n_samples

    def full_gradient(self, x) -> np.ndarray:
        """Exact gradient; smooth families only."""
        if not self.smooth:
            raise UnsupportedError(f"family {self.family!r} is not smooth")
        return self.loss_gradient(x)

    def full_subgradient(self, x) -> np.ndarray:
        """Average of the per-sample subgradients (a Frechet subgradient of phi)."""
        x = np.asarray(x, dtype=float)
        return self.sample_gradients(x).mean(axis=0)

    def sample_index(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.n_samples))

    @property
    def sample_mu(self) -> np.ndarray:
        """Weak-convexity modulus of each phi(.; xi_i)."""
        sq = np.sum(self.A**2, axis=1)
        fam = self.family
        if fam == "quadratic":
            return np.zeros(self.n_samples)
        if fam == "phase-retrieval":
            return 2.0 * sq
        if fam in ("scad-regression", "mcp-regression"):
            return np.full(self.n_samples, self.metadata.mu)
        if self.loss_kind == "truncated":
            return sq / 4.0
        return np.zeros(self.n_samples)


def sample_subgradient(problem: ProblemInstance, x, rng: np.random.Generator) -> np.ndarray:
    """g(x; xi) for one uniformly drawn sample."""
    x = problem.check_point(x)
    i = problem.sample_index(rng)
    return problem.sample_gradients(x, rows=[i])[0]


def full_objective(problem: ProblemInstance, x) -> float:
    return problem.full_objective(x)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _as_vector(value, d: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(d, float(arr))
    if arr.shape != (d,):
        raise DimensionError(f"{name} must have length {d}, got shape {arr.shape}")
    return arr.astype(float)


def _make_domain(d: int, spec: Mapping[str, Any]) -> Domain:
    kind = spec.get("domain", "unconstrained")
    if isinstance(kind, Domain):
        if kind.dimension != d:
            raise DimensionError("domain dimension does not match the problem dimension")
        return kind
    if kind == "unconstrained":
        return Domain.unconstrained(d)
    if kind == "ball":
        if "radius" not in spec:
            raise ParameterError("ball domain needs 'radius'")
        return Domain.ball(d, float(spec["radius"]), spec.get("ball_center"))
    if kind == "box":
        if "lower" not in spec or "upper" not in spec:
            raise ParameterError("box domain needs 'lower' and 'upper'")
        return Domain.box(d, spec["lower"], spec["upper"])
    raise ParameterError(f"unknown domain kind {kind!r}")


def load_csv_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """Read rows ``b, a_1, ..., a_d``; returns (A, b)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if rows:
                    raise
                continue  # header line
    if not rows:
        raise ParameterError(f"no samples in {path}")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DimensionError(f"ragged rows in {path}")
    data = np.asarray(rows)
    return data[:, 1:], data[:, 0]


def _gaussian_rows(rng, n, d, k=None, support="random"):
    """Gaussian design; with ``k`` each row keeps only k nonzero coordinates."""
    A = rng.standard_normal((n, d))
    if k is None or k >= d:
        return A
    mask = np.zeros((n, d), dtype=bool)
    if support == "fixed":
        mask[:, :k] = True
    else:
        for i in range(n):
            mask[i, rng.choice(d, size=k, replace=False)] = True
    return np.where(mask, A, 0.0)


def _generate(family: str, spec: Mapping[str, Any], rng: np.random.Generator):
    """Synthetic data recipe per family: (A, b, planted, extras)."""
    d = int(spec["d"])
    n = int(spec.get("n", 100))
    noise = float(spec.get("noise", 0.0))
    extras: dict[str, Any] = {}
    if family == "quadratic":
        if noise > 0:
            Z = noise * rng.standard_normal((n, d))
            Z -= Z.mean(axis=0)
        else:
            Z = np.zeros((1, d))
        return Z, np.zeros(Z.shape[0]), None, extras
    if family == "phase-retrieval":
        A = rng.standard_normal((n, d))
        x_true = rng.standard_normal(d)
        x_true /= np.linalg.norm(x_true)
        b = (A @ x_true) ** 2
        if noise > 0:
            b = np.abs(b + noise * rng.standard_normal(n))
        return A, b, x_true, extras
    if family == "truncated-square":
        k = spec.get("sparsity_k")
        A = _gaussian_rows(rng, n, d, None if k is None else int(k), spec.get("support", "random"))
        x_true = rng.standard_normal(d) / math.sqrt(d)
        b = A @ x_true + noise * rng.standard_normal(n)
        frac = float(spec.get("outlier_frac", 0.0))
        n_out = int(round(frac * n))
        if n_out:
            which = rng.choice(n, size=n_out, replace=False)
            b[which] = 10.0 * rng.standard_normal(n_out)
        return A, b, x_true, extras
    if family in ("scad-regression", "mcp-regression"):
        A = rng.standard_normal((n, d)) / math.sqrt(d)
        x_true = np.zeros(d)
        x_true[: max(1, d // 5)] = 2.0
        b = A @ x_true + noise * rng.standard_normal(n)
        return A, b, x_true, extras
    if family == "generalized-lasso":
        A = rng.standard_normal((n, d)) / math.sqrt(d)
        x_true = np.repeat(rng.standard_normal(4), -(-d // 4))[:d]
        b = A @ x_true + noise * rng.standard_normal(n)
        return A, b, x_true, extras
    raise ParameterError(f"unknown family {family!r}")


def _lambda_max(A: np.ndarray) -> float:
    if A.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(A.T @ A)[-1])


def make_problem(family: str | Mapping[str, Any], **spec) -> ProblemInstance:
    """Build an instance from a family name and parameters.

    Parameters
    ----------
    family : str or mapping
        Family name, or a mapping holding ``family`` plus all other keys.
    d : int
        Dimension.  Optional when ``A`` or ``csv`` is given.
    A, b : array_like, optional
        Explicit data (rows a_i, targets b_i).  ``csv`` loads them from a
        file instead.  Otherwise data are generated from ``seed`` with
        ``n`` samples and noise level ``noise``.
    domain : {"unconstrained", "ball", "box"}
        With ``radius``/``ball_center`` or ``lower``/``upper``.
    alpha, lam, scad_a, mcp_b, lam1, loss, center, curvature
        Family parameters.
    bound_radius : float
        Radius used for G on unbounded domains (default 10).
    """
    if isinstance(family, Mapping):
        spec = {**family, **spec}
        family = spec.pop("family")
    if family not in FAMILIES:
        raise ParameterError(f"unknown family {family!r}; choose from {', '.join(FAMILIES)}")
    spec = dict(spec)
    seed = spec.get("seed", 0)
    rng = np.random.default_rng(seed)

    planted = None
    if "csv" in spec:
        A, b = load_csv_dataset(Path(spec["csv"]))
    elif "A" in spec:
        A = np.atleast_2d(np.asarray(spec["A"], dtype=float))
        b = np.asarray(spec.get("b", np.zeros(A.shape[0])), dtype=float).reshape(-1)
    else:
        if "d" not in spec:
            raise ParameterError("missing dimension 'd'")
        A, b, planted, _ = _generate(family, spec, rng)

    d = int(spec.get("d", A.shape[1]))
    if d < 1:
        raise DimensionError("dimension must be positive")
    if A.ndim != 2 or A.shape[1] != d:
        raise DimensionError(f"data rows have length {A.shape[1]}, expected d={d}")
    if b.shape != (A.shape[0],):
        raise DimensionError(f"{b.shape[0]} targets for {A.shape[0]} samples")
    if A.shape[0] < 1:
        raise DimensionError("need at least one sample")

    domain = _make_domain(d, spec)
    n = A.shape[0]
    lam_max = _lambda_max(A)
    params: dict[str, Any] = {}
    penalty_matrix = None

    if domain.bounded:
        xmax = domain.max_abs_coords()
        rmax = domain.max_norm()
        bound_radius = None
    else:
        bound_radius = float(spec.get("bound_radius", 10.0))
        xmax = np.full(d, bound_radius)
        rmax = bound_radius
    # sup over the domain of |a_i^T x|
    abs_u = np.minimum(np.linalg.norm(A, axis=1) * rmax, np.abs(A) @ xmax)
    row_inf = np.max(np.abs(A), axis=1)

    L = None
    if family == "quadratic":
        params["center"] = _as_vector(spec.get("center", 0.0), d, "center")
        params["curvature"] = _as_vector(spec.get("curvature", 1.0), d, "curvature")
        if np.any(params["curvature"] < 0):
            raise ParameterError("quadratic curvature must be non-negative")
        mu = 0.0
        L = float(np.max(params["curvature"]))
        reach = xmax + np.abs(params["center"])
        G = float(np.max(params["curvature"] * reach) + np.max(np.abs(A)))
    elif family == "phase-retrieval":
        mu = 2.0 * lam_max / n
        G = float(np.max(2.0 * abs_u * row_inf))
    elif family == "truncated-square":
        alpha = float(spec.get("alpha", 1.0))
        if not alpha > 0:
            raise ParameterError("truncation alpha must be > 0")
        params["alpha"] = alpha
        mu = lam_max / (4.0 * n)
        L = 2.0 * lam_max / n
        G = float(math.sqrt(alpha) * np.max(row_inf))
    elif family in ("scad-regression", "mcp-regression"):
        lam = float(spec.get("lam", 1.0))
        if not lam > 0:
            raise ParameterError("penalty lambda must be > 0")
        params["lam"] = lam
        if family == "scad-regression":
            a = float(spec.get("scad_a", 3.7))
            if not a > 2:
                raise ParameterError(f"SCAD parameter a must exceed 2, got {a}")
            params["scad_a"] = a
            mu = 1.0 / (a - 1.0)
        else:
            bb = float(spec.get("mcp_b", 3.0))
            if not bb > 0:
                raise ParameterError(f"MCP parameter b must be positive, got {bb}")
            params["mcp_b"] = bb
            mu = 1.0 / bb
        params["loss_lipschitz"] = lam_max / n
        G = float(np.max((abs_u + np.abs(b)) * row_inf) + lam)
    else:  # generalized-lasso
        if domain.kind != "unconstrained":
            raise UnsupportedError("generalized-lasso instances are unconstrained")
        loss = spec.get("loss", "square")
        if loss not in ("square", "truncated-square", "truncated"):
            raise ParameterError(f"unknown loss {loss!r}")
        params["loss"] = "truncated" if loss.startswith("truncated") else "square"
        lam1 = float(spec.get("lam1", 0.1))
        if not lam1 >= 0:
            raise ParameterError("lam1 must be non-negative")
        params["lam1"] = lam1
        D = spec.get("penalty_matrix")
        D = first_difference_matrix(d) if D is None else np.atleast_2d(np.asarray(D, dtype=float))
        if D.shape[1] != d:
            raise DimensionError(f"penalty matrix has {D.shape[1]} columns, expected {d}")
        penalty_matrix = D
        col_l1 = float(np.max(np.sum(np.abs(D), axis=0)))
        if params["loss"] == "truncated":
            alpha = float(spec.get("alpha", 1.0))
            if not alpha > 0:
                raise ParameterError("truncation alpha must be > 0")
            params["alpha"] = alpha
            mu = lam_max / (4.0 * n)
            params["loss_lipschitz"] = 2.0 * lam_max / n
            G = float(math.sqrt(alpha) * np.max(row_inf) + lam1 * col_l1)
        else:
            mu = 0.0
            params["loss_lipschitz"] = lam_max / n
            G = float(np.max((abs_u + np.abs(b)) * row_inf) + lam1 * col_l1)

    G = max(G, np.finfo(float).tiny)
    if L is not None:
        L = max(L, mu)
    metadata = OracleMetadata(
        mu=float(mu),
        grad_bound_G=float(G),
        lipschitz_L=L,
        delta_phi=spec.get("delta_phi"),
        grad_bound_global=domain.bounded or family == "truncated-square",
        bound_radius=bound_radius,
    )

    if "start" in spec:
        start = _as_vector(spec["start"], d, "start")
    else:
        # independent of the data stream so that changing n leaves it alone
        start = np.random.default_rng([int(seed), 1]).standard_normal(d) / math.sqrt(d)
    start = project(domain, start)

    resolved = {
        k: v for k, v in spec.items() if k not in ("A", "b", "penalty_matrix") and not isinstance(v, Domain)
    }
    resolved["family"] = family
    resolved["d"] = d
    resolved["n"] = n
    resolved.update(domain.to_spec())

    return ProblemInstance(
        family=family,
        dimension=d,
        domain=domain,
        A=_frozen(A),
        b=_frozen(b),
        params={k: (_frozen(v) if isinstance(v, np.ndarray) else v) for k, v in params.items()},
        metadata=metadata,
        penalty_matrix=None if penalty_matrix is None else _frozen(penalty_matrix),
        planted=None if planted is None else _frozen(planted),
        default_start=_frozen(start),
        spec=resolved,
    )
