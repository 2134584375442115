"""Multi-group 2PL/3PL item response models estimated by marginal maximum likelihood."""

from .covariance import param_covariance
from .em import ConstraintPlan, FitOptions, FitResult, fit_mml_em, marginal_loglik
from .model import GroupDist, ItemParams, irf
from .quadrature import Quadrature
from .scoring import IccTable, eap_scores, icc_table

__all__ = [
    "ConstraintPlan",
    "FitOptions",
    "FitResult",
    "GroupDist",
    "IccTable",
    "ItemParams",
    "Quadrature",
    "eap_scores",
    "fit_mml_em",
    "icc_table",
    "irf",
    "marginal_loglik",
    "param_covariance",
]
