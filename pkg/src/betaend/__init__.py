"""Weibull survival model of certificate attainment in multi-course registration logs."""

from .core import (
    BetaEndParams,
    CourseEngagement,
    DomainError,
    LogisticParams,
    betaend_probability,
    engagement_from_singleton,
    logistic_probability,
    weibull_hazard,
    weibull_survival,
)
from .estimation import FitConfig, FitResult, fit_betaend, fit_logistic, predict
from .simplex import SimplexConfig, minimize
from .synthgen import GeneratorConfig, generate

__version__ = "0.1.0"

__all__ = [
    "BetaEndParams",
    "CourseEngagement",
    "DomainError",
    "FitConfig",
    "FitResult",
    "GeneratorConfig",
    "LogisticParams",
    "SimplexConfig",
    "betaend_probability",
    "engagement_from_singleton",
    "fit_betaend",
    "fit_logistic",
    "generate",
    "logistic_probability",
    "minimize",
    "predict",
    "weibull_hazard",
    "weibull_survival",
]
