"""Random-slope linear mixed model with a linear variance function.

For ALS project i and plot j::

    vol_ij = b0 + (b1 + u_i) * h_ij + b2 * h_ij**2 + b3 * p_ij + e_ij
    u_i ~ N(0, sigma_b**2),  e_ij ~ N(0, sigma_eps**2 * h_ij)

with h = zmean_f and p = perc_n_2m.  Writing theta = sigma_b**2 / sigma_eps**2,
the marginal covariance of group i is sigma_eps**2 * H_i with
H_i = D_i + theta * z_i z_i' and D_i = diag(h_i).  For fixed theta, beta and
sigma_eps**2 have closed forms (GLS), so the restricted likelihood is
maximised over ln(theta) alone.  H_i is inverted with Sherman-Morrison, which
reduces every likelihood evaluation to per-group sufficient statistics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize

from ..errors import ConvergenceError, DomainError, ValidationError
from .data import Observation

log = logging.getLogger(__name__)

FIXED_EFFECTS = ("intercept", "zmean_f", "zmean_f^2", "perc_n_2m")
SLOPE_METRIC = "zmean_f"
DENSITY_METRIC = "perc_n_2m"
MAX_EVALUATIONS = 500
GRID_POINTS = 41
XTOL = 1e-8


@dataclass(frozen=True, eq=False)
class MixedModel:
    beta: np.ndarray
    sigma_b: float
    sigma_eps: float
    blups: Mapping[str, float]
    group_sizes: Mapping[str, int]
    n_obs: int
    loglik: float = float("nan")
    method: str = "REML"
    beta_se: np.ndarray | None = None
    sigma_b_se: float = float("nan")
    sigma_eps_se: float = float("nan")
    warnings: tuple[str, ...] = ()
    family: str = field(default="mixed", init=False)

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float)
        if beta.shape != (len(FIXED_EFFECTS),):
            raise ValidationError(f"mixed model needs {len(FIXED_EFFECTS)} fixed effects")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        if self.beta_se is not None:
            se = np.array(self.beta_se, dtype=float)
            se.setflags(write=False)
            object.__setattr__(self, "beta_se", se)
        if self.sigma_b < 0 or not self.sigma_eps > 0:
            raise ValidationError("need sigma_b >= 0 and sigma_eps > 0")
        object.__setattr__(self, "blups", dict(self.blups))
        object.__setattr__(self, "group_sizes", dict(self.group_sizes))
        object.__setattr__(self, "warnings", tuple(self.warnings))

    @property
    def theta(self) -> float:
        return (self.sigma_b / self.sigma_eps) ** 2

    @property
    def n_groups(self) -> int:
        return len(self.group_sizes)

    @property
    def boundary(self) -> bool:
        return any("boundary" in w for w in self.warnings)


def fixed_row(metrics: Mapping[str, float]) -> np.ndarray:
    h = metrics.get(SLOPE_METRIC)
    p = metrics.get(DENSITY_METRIC)
    if h is None or p is None:
        raise DomainError(f"mixed model needs {SLOPE_METRIC} and {DENSITY_METRIC}")
    return np.array([1.0, h, h * h, p])


def predict_mixed(model: MixedModel, metrics: Mapping[str, float], project: str | None = None) -> float:
    """Conditional prediction, floored at zero.

    Unknown or absent projects get the population-level slope (u_i = 0).
    """
    x = fixed_row(metrics)
    u = model.blups.get(project, 0.0) if project is not None else 0.0
    return max(0.0, float(x @ model.beta) + u * x[1])


@dataclass
class _Group:
    label: str
    X: np.ndarray
    y: np.ndarray
    z: np.ndarray
    d: np.ndarray
    XtDX: np.ndarray = None
    XtDy: np.ndarray = None
    ytDy: float = 0.0
    Xtu: np.ndarray = None
    ytu: float = 0.0
    s: float = 0.0
    logdet_d: float = 0.0

    def __post_init__(self):
        w = 1.0 / self.d
        u = self.z * w
        self.XtDX = (self.X * w[:, None]).T @ self.X
        self.XtDy = (self.X * w[:, None]).T @ self.y
        self.ytDy = float(self.y @ (w * self.y))
        self.Xtu = self.X.T @ u
        self.ytu = float(self.y @ u)
        self.s = float(self.z @ u)
        self.logdet_d = float(np.log(self.d).sum())


class _Profile:
    """Sufficient statistics and likelihood pieces as functions of theta."""

    def __init__(self, groups: list[_Group], method: str):
        self.groups = groups
        self.method = method
        self.n = sum(len(g.y) for g in groups)
        self.p = groups[0].X.shape[1]
        self.s = np.array([g.s for g in groups])
        self.XtDX = sum(g.XtDX for g in groups)
        self.XtDy = sum(g.XtDy for g in groups)
        self.ytDy = sum(g.ytDy for g in groups)
        self.Xtu = np.array([g.Xtu for g in groups])
        self.ytu = np.array([g.ytu for g in groups])
        self.logdet_d = sum(g.logdet_d for g in groups)

    def pieces(self, theta: float):
        c = theta / (1.0 + theta * self.s)
        XtHX = self.XtDX - (self.Xtu * c[:, None]).T @ self.Xtu
        XtHy = self.XtDy - (self.Xtu * c[:, None]).T @ self.ytu
        ytHy = self.ytDy - float(c @ (self.ytu ** 2))
        logdet_h = self.logdet_d + float(np.log1p(theta * self.s).sum())
        chol = np.linalg.cholesky(XtHX)
        beta = np.linalg.solve(XtHX, XtHy)
        rHr = max(ytHy - float(beta @ XtHy), 0.0)
        logdet_xhx = 2.0 * float(np.log(np.diag(chol)).sum())
        return beta, rHr, logdet_h, logdet_xhx, XtHX

    def dof(self) -> int:
        return self.n - self.p if self.method == "REML" else self.n

    def profiled(self, theta: float) -> float:
        _, rHr, logdet_h, logdet_xhx, _ = self.pieces(theta)
        k = self.dof()
        sigma2 = rHr / k
        if sigma2 <= 0:
            return -math.inf
        ll = -0.5 * (k * math.log(2 * math.pi * sigma2) + logdet_h + k)
        if self.method == "REML":
            ll -= 0.5 * logdet_xhx
        return ll

    def full(self, sigma_b: float, sigma_eps: float) -> float:
        """Likelihood at explicit variance components (beta profiled by GLS)."""
        s2 = sigma_eps ** 2
        theta = sigma_b ** 2 / s2
        _, rHr, logdet_h, logdet_xhx, _ = self.pieces(theta)
        k = self.dof()
        ll = -0.5 * (k * math.log(2 * math.pi * s2) + logdet_h + rHr / s2)
        if self.method == "REML":
            ll -= 0.5 * logdet_xhx
        return ll

    def blups(self, theta: float, beta: np.ndarray) -> np.ndarray:
        # u_i = theta * z' H^-1 r = theta * u'r / (1 + theta * s)
        utr = self.ytu - self.Xtu @ beta
        return theta * utr / (1.0 + theta * self.s)


def _numerical_hessian(f, x: np.ndarray, steps: np.ndarray) -> np.ndarray:
    k = len(x)
    H = np.empty((k, k))
    f0 = f(x)
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = steps[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / steps[i] ** 2
        for j in range(i + 1, k):
            ej = np.zeros(k)
            ej[j] = steps[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej)
                                 + f(x - ei - ej)) / (4 * steps[i] * steps[j])
    return H


@dataclass
class MixedFit:
    """Fitted model plus the likelihood trace of the variance-ratio search."""

    model: MixedModel
    trace: list[tuple[float, float]]


def build_groups(data: Sequence[Observation]) -> list[_Group]:
    order: dict[str, list[int]] = {}
    for j, obs in enumerate(data):
        order.setdefault(obs.group, []).append(j)
    if len(order) < 2:
        raise ValidationError(f"mixed model needs at least 2 groups, got {len(order)}")
    groups = []
    for label in sorted(order):
        rows = [data[j] for j in order[label]]
        X = np.array([fixed_row(o.metrics) for o in rows])
        h = X[:, 1]
        bad = np.flatnonzero(~(h > 0))
        if bad.size:
            raise DomainError(f"plot {rows[bad[0]].plot_id}: {SLOPE_METRIC} must be positive")
        y = np.array([o.response for o in rows], dtype=float)
        groups.append(_Group(label, X, y, h.copy(), h.copy()))
    return groups


def fit_mixed(data: Sequence[Observation], method: str = "REML",
              fixed_theta: float | None = None) -> MixedFit:
    """Fit the random-slope model by (restricted) maximum likelihood.

    The variance ratio is found by a grid scan over ln(theta) followed by a
    bounded Brent search around the best grid point; theta = 0 is always
    evaluated as well, and the best evaluated point is returned.  Pass
    ``fixed_theta`` to skip the search (0 gives weighted least squares with
    weights 1/zmean_f).
    """
    if method not in ("REML", "ML"):
        raise ValidationError(f"unknown fitting method {method!r}")
    groups = build_groups(data)
    prof = _Profile(groups, method)
    if prof.n <= prof.p:
        raise ValidationError("too few observations for the fixed effects")
    try:
        np.linalg.cholesky(prof.XtDX)
    except np.linalg.LinAlgError:
        raise ValidationError("fixed-effects design is singular") from None

    trace: list[tuple[float, float]] = []

    def nll(log_theta: float) -> float:
        if len(trace) >= MAX_EVALUATIONS:
            raise ConvergenceError(f"no convergence within {MAX_EVALUATIONS} evaluations", trace)
        ll = prof.profiled(math.exp(log_theta))
        trace.append((log_theta, ll))
        return -ll

    warnings: list[str] = []
    if fixed_theta is not None:
        if fixed_theta < 0:
            raise ValidationError("fixed_theta must be non-negative")
        theta = float(fixed_theta)
        best_ll = prof.profiled(theta)
        trace.append((math.log(theta) if theta > 0 else -math.inf, best_ll))
    else:
        lo = math.log(1e-8 / prof.s.max())
        hi = math.log(1e6 / prof.s.min())
        grid = np.linspace(lo, hi, GRID_POINTS)
        values = [nll(float(g)) for g in grid]
        i = int(np.argmin(values))
        a, b = grid[max(i - 1, 0)], grid[min(i + 1, GRID_POINTS - 1)]
        res = optimize.minimize_scalar(
            nll, bounds=(a, b), method="bounded",
            options={"xatol": XTOL * max(1.0, abs(grid[i])), "maxiter": MAX_EVALUATIONS - len(trace)})
        if not res.success:
            raise ConvergenceError(f"variance-ratio search failed: {res.message}", trace)
        zero_ll = prof.profiled(0.0)
        trace.append((-math.inf, zero_ll))
        best_log, best_ll = max(trace, key=lambda t: t[1])
        theta = 0.0 if best_log == -math.inf else math.exp(best_log)
        if theta == 0.0 or best_log <= lo + 1e-9:
            warnings.append("boundary: variance ratio at lower bound (sigma_b -> 0)")
        elif best_log >= hi - 1e-9:
            warnings.append("boundary: variance ratio at upper bound")
        log.debug("variance-ratio search: %d evaluations, theta=%g", len(trace), theta)

    beta, rHr, _, _, XtHX = prof.pieces(theta)
    sigma2 = rHr / prof.dof()
    if not sigma2 > 0:
        raise ConvergenceError("residual variance collapsed to zero", trace)
    sigma_eps = math.sqrt(sigma2)
    sigma_b = math.sqrt(theta * sigma2)
    blups = prof.blups(theta, beta)
    beta_se = np.sqrt(np.diag(np.linalg.inv(XtHX)) * sigma2)

    x0 = np.array([sigma_b, sigma_eps])
    steps = np.array([1e-3 * max(sigma_b, 0.05 * sigma_eps), 1e-4 * sigma_eps])
    hess = _numerical_hessian(lambda v: prof.full(abs(v[0]), v[1]), x0, steps)
    try:
        cov = np.linalg.inv(-hess)
        var_b, var_e = cov[0, 0], cov[1, 1]
    except np.linalg.LinAlgError:
        var_b = var_e = float("nan")
    sigma_b_se = math.sqrt(var_b) if var_b > 0 else float("nan")
    sigma_eps_se = math.sqrt(var_e) if var_e > 0 else float("nan")

    model = MixedModel(
        beta=beta, sigma_b=sigma_b, sigma_eps=sigma_eps,
        blups={g.label: float(b) for g, b in zip(groups, blups)},
        group_sizes={g.label: len(g.y) for g in groups}, n_obs=prof.n,
        loglik=best_ll, method=method, beta_se=beta_se,
        sigma_b_se=sigma_b_se, sigma_eps_se=sigma_eps_se, warnings=tuple(warnings))
    return MixedFit(model, trace)


@dataclass(frozen=True)
class ResidualDiagnostic:
    plot_id: str
    group: str
    residual: float
    standardized: float
    flagged: bool


def residual_diagnostics(model: MixedModel, data: Sequence[Observation],
                         threshold: float = 3.0) -> list[ResidualDiagnostic]:
    """Conditional residuals scaled by sigma_eps * sqrt(zmean_f); flags only."""
    out = []
    for obs in data:
        x = fixed_row(obs.metrics)
        fitted = float(x @ model.beta) + model.blups.get(obs.group, 0.0) * x[1]
        r = obs.response - fitted
        z = r / (model.sigma_eps * math.sqrt(x[1]))
        out.append(ResidualDiagnostic(obs.plot_id, obs.group, r, z, abs(z) > threshold))
    return out
