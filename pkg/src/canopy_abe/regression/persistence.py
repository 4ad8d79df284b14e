"""JSON model files.

Floats are written with ``repr`` precision through :mod:`json`, so a reloaded
model predicts bit-identically.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from .. import __version__
from ..errors import ValidationError
from .loglog import LogLogModel
from .mixed import FIXED_EFFECTS, MixedModel


def _num(v: float):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


def _float(v) -> float:
    return float("nan") if v is None else float(v)


def model_to_dict(model) -> dict:
    if isinstance(model, LogLogModel):
        return {
            "family": "loglog",
            "toolkit_version": __version__,
            "predictor_names": list(model.predictor_names),
            "coefficients": [float(b) for b in model.beta],
            "sigma2": model.sigma2,
            "n_obs": model.n_obs,
            "aic": model.aic,
            "predictor_range": None if model.predictor_range is None
            else [list(r) for r in model.predictor_range],
        }
    if isinstance(model, MixedModel):
        return {
            "family": "mixed",
            "toolkit_version": __version__,
            "fixed_effects": list(FIXED_EFFECTS),
            "coefficients": [float(b) for b in model.beta],
            "coefficient_se": None if model.beta_se is None else [_num(float(s)) for s in model.beta_se],
            "sigma_b": model.sigma_b,
            "sigma_eps": model.sigma_eps,
            "sigma_b_se": _num(model.sigma_b_se),
            "sigma_eps_se": _num(model.sigma_eps_se),
            "blups": {k: model.blups[k] for k in sorted(model.blups)},
            "group_sizes": {k: model.group_sizes[k] for k in sorted(model.group_sizes)},
            "n_obs": model.n_obs,
            "loglik": _num(model.loglik),
            "method": model.method,
            "warnings": list(model.warnings),
        }
    raise TypeError(f"cannot serialise {type(model).__name__}")


def model_from_dict(doc: dict):
    family = doc.get("family")
    if family == "loglog":
        rng = doc.get("predictor_range")
        return LogLogModel(tuple(doc["predictor_names"]), doc["coefficients"], doc["sigma2"],
                           doc["n_obs"], doc["aic"],
                           None if rng is None else tuple(tuple(r) for r in rng))
    if family == "mixed":
        se = doc.get("coefficient_se")
        return MixedModel(
            beta=doc["coefficients"], sigma_b=doc["sigma_b"], sigma_eps=doc["sigma_eps"],
            blups=doc["blups"], group_sizes=doc["group_sizes"], n_obs=doc["n_obs"],
            loglik=_float(doc.get("loglik")), method=doc.get("method", "REML"),
            beta_se=None if se is None else [_float(s) for s in se],
            sigma_b_se=_float(doc.get("sigma_b_se")), sigma_eps_se=_float(doc.get("sigma_eps_se")),
            warnings=tuple(doc.get("warnings", ())))
    raise ValidationError(f"unknown model family {family!r}")


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n", encoding="utf-8")


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
