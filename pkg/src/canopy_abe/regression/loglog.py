"""Log-log OLS volume models with AIC stepwise predictor selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import DomainError, SingularDesignError, ValidationError
from ..metrics import metric_names
from .data import DesignMatrix, Observation

MAX_PREDICTORS = 4


@dataclass(frozen=True, eq=False)
class LogLogModel:
    """ln(vol) = b0 + sum(b_i * ln x_i) + e, fitted by OLS.

    ``beta[0]`` is the raw intercept; the half-variance bias correction is
    applied only when predicting.  ``predictor_range`` holds the (min, max)
    of each predictor over the modelling data.
    """

    predictor_names: tuple[str, ...]
    beta: np.ndarray
    sigma2: float
    n_obs: int
    aic: float
    predictor_range: tuple[tuple[float, float], ...] | None = None
    family: str = field(default="loglog", init=False)

    def __post_init__(self):
        object.__setattr__(self, "predictor_names", tuple(self.predictor_names))
        beta = np.array(self.beta, dtype=float)
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        if len(beta) != len(self.predictor_names) + 1:
            raise ValidationError("beta must hold an intercept plus one coefficient per predictor")
        if self.sigma2 < 0:
            raise ValidationError("sigma2 must be non-negative")
        if self.predictor_range is not None:
            rng = tuple((float(lo), float(hi)) for lo, hi in self.predictor_range)
            if len(rng) != len(self.predictor_names):
                raise ValidationError("predictor_range needs one (min, max) per predictor")
            object.__setattr__(self, "predictor_range", rng)


def loglog_design(data: Sequence[Observation], predictors: Sequence[str]) -> DesignMatrix:
    cols = [np.ones(len(data))]
    y = np.empty(len(data))
    for j, obs in enumerate(data):
        if not obs.response > 0:
            raise DomainError(f"row {j} (plot {obs.plot_id}): response {obs.response} is not positive")
        y[j] = math.log(obs.response)
    for name in predictors:
        col = np.empty(len(data))
        for j, obs in enumerate(data):
            v = obs.metrics.get(name)
            if v is None or not v > 0:
                raise DomainError(f"row {j} (plot {obs.plot_id}): predictor {name}={v} is not positive")
            col[j] = math.log(v)
        cols.append(col)
    return DesignMatrix(("intercept",) + tuple(predictors), np.column_stack(cols), y)


def aic_value(rss: float, n: int, n_beta: int) -> float:
    """n*ln(RSS/n) + 2*(n_beta + 1); constants dropped."""
    return n * math.log(max(rss / n, np.finfo(float).tiny)) + 2.0 * (n_beta + 1)


def _ols(design: DesignMatrix) -> tuple[np.ndarray, float]:
    X, y = design.X, design.y
    n, p = X.shape
    if n <= p:
        raise ValidationError(f"need more than {p} observations, got {n}")
    if np.linalg.matrix_rank(X) < p:
        raise SingularDesignError(f"design over {design.columns[1:]} is rank deficient")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    return beta, float(resid @ resid)


def fit_loglog(data: Sequence[Observation], predictors: Sequence[str]) -> LogLogModel:
    design = loglog_design(data, predictors)
    beta, rss = _ols(design)
    n, p = design.X.shape
    ranges = tuple((float(math.exp(c.min())), float(math.exp(c.max()))) for c in design.X[:, 1:].T)
    return LogLogModel(tuple(predictors), beta, rss / (n - p), n, aic_value(rss, n, p), ranges)


def predict_loglog(model: LogLogModel, metrics: Mapping[str, float], clamp: bool = False) -> float:
    """Bias-corrected back-transformed prediction.

    With ``clamp`` each predictor is first limited to its range in the
    modelling data, which keeps wall-to-wall predictions from extrapolating
    the power terms.
    """
    eta = model.beta[0] + model.sigma2 / 2.0
    ranges = model.predictor_range if clamp else None
    for j, (b, name) in enumerate(zip(model.beta[1:], model.predictor_names)):
        v = metrics.get(name)
        if v is None or not v > 0:
            raise DomainError(f"predictor {name}={v} outside the log domain")
        if ranges is not None:
            lo, hi = ranges[j]
            v = min(max(v, lo), hi)
        eta += b * math.log(v)
    return math.exp(eta)


def positive_candidates(data: Sequence[Observation], candidates: Sequence[str]) -> list[str]:
    """Candidates present and strictly positive on every row."""
    return [c for c in candidates
            if all((v := obs.metrics.get(c)) is not None and v > 0 for obs in data)]


def _order_key(pool: Sequence[str]):
    canonical = {n: i for i, n in enumerate(metric_names())}
    fallback = {n: len(canonical) + i for i, n in enumerate(pool)}
    return lambda name: canonical.get(name, fallback.get(name, 1 << 30))


def stepwise_select(data: Sequence[Observation], candidates: Sequence[str] | None = None,
                    max_predictors: int = MAX_PREDICTORS, trace: list | None = None) -> LogLogModel:
    """Forward/backward AIC selection starting from the intercept-only model.

    Every step tries all single additions (while below ``max_predictors``)
    and all single deletions, and takes the move with the lowest AIC if it
    beats the current model.  Ties go to the predictor earliest in the
    canonical metric order.  ``trace`` collects one dict per accepted step.
    """
    if candidates is None:
        candidates = metric_names()
    pool = positive_candidates(data, candidates)
    if not pool:
        raise ValidationError("no candidate predictor is positive on all modelling rows")
    key = _order_key(pool)
    pool = sorted(dict.fromkeys(pool), key=key)
    logs = {name: loglog_design(data, [name]).X[:, 1] for name in pool}
    y = loglog_design(data, []).y
    n = len(y)

    def evaluate(selected):
        X = np.column_stack([np.ones(n)] + [logs[s] for s in selected])
        return _ols(DesignMatrix(("intercept",) + tuple(selected), X, y))

    current: list[str] = []
    _, rss = evaluate(current)
    current_aic = aic_value(rss, n, 1)
    if trace is not None:
        trace.append({"step": 0, "move": "start", "predictors": [], "aic": current_aic})
    step = 0
    while True:
        moves = []
        if len(current) < max_predictors:
            for name in pool:
                if name in current:
                    continue
                sel = sorted(current + [name], key=key)
                try:
                    _, rss = evaluate(sel)
                except (SingularDesignError, ValidationError):
                    continue
                moves.append((aic_value(rss, n, len(sel) + 1), key(name), "+", name, sel))
        for name in current:
            sel = [s for s in current if s != name]
            _, rss = evaluate(sel)
            moves.append((aic_value(rss, n, len(sel) + 1), key(name), "-", name, sel))
        if not moves:
            break
        best = min(moves, key=lambda m: (m[0], m[1], m[2]))
        if not best[0] < current_aic:
            break
        step += 1
        current, current_aic = best[4], best[0]
        if trace is not None:
            trace.append({"step": step, "move": best[2] + best[3],
                          "predictors": list(current), "aic": current_aic})
    return fit_loglog(data, current)
