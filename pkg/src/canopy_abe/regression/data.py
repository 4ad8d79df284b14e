from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ValidationError


@dataclass(frozen=True)
class Observation:
    """One modelling unit: a measured response and the ALS metrics over it."""

    plot_id: str
    response: float
    metrics: Mapping[str, float] = field(default_factory=dict)
    group: str = ""


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Intercept plus named predictor columns, and the response vector."""

    columns: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.X.shape != (len(self.y), len(self.columns)):
            raise ValidationError("design matrix shape does not match response/columns")
        if not (np.isfinite(self.X).all() and np.isfinite(self.y).all()):
            raise ValidationError("design matrix has missing values")

    @property
    def n_obs(self) -> int:
        return self.X.shape[0]
