"""Volume models: local log-log OLS and the regional random-slope mixed model."""

from .data import DesignMatrix, Observation
from .loglog import (
    LogLogModel,
    aic_value,
    fit_loglog,
    loglog_design,
    positive_candidates,
    predict_loglog,
    stepwise_select,
)
from .mixed import (
    MixedFit,
    MixedModel,
    ResidualDiagnostic,
    fit_mixed,
    predict_mixed,
    residual_diagnostics,
)
from .persistence import load_model, model_from_dict, model_to_dict, save_model


def predict(model, metrics, project=None) -> float:
    """Dispatch on model family."""
    if isinstance(model, LogLogModel):
        return predict_loglog(model, metrics)
    return predict_mixed(model, metrics, project)


__all__ = [
    "DesignMatrix", "LogLogModel", "MixedFit", "MixedModel", "Observation", "ResidualDiagnostic",
    "aic_value", "fit_loglog", "fit_mixed", "load_model", "loglog_design", "model_from_dict",
    "model_to_dict", "positive_candidates", "predict", "predict_loglog", "predict_mixed",
    "residual_diagnostics", "save_model", "stepwise_select",
]
