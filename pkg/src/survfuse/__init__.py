"""Heterogeneous treatment effects on restricted mean survival time from a
randomized trial combined with real-world data."""

__version__ = "0.1.0"

from .coxph import CoxModel, DesignSpec, StepCurves, fit_cox, fit_nuisance_pair, survival_at
from .data import Dataset, RestrictedRecord, SubjectRecord, load_dataset, restrict, write_dataset
from .errors import (ConvergenceError, DegenerateFitError, InvalidInputError, LoadError,
                     NumericalError, SeparationError, SingularMatrixError, StageError,
                     SurvfuseError)
from .estimator import (FitResult, confidence_interval, efficiency_certificate, fit_integrative,
                        fit_rct_only, fit_rwd_only, pointwise_se)
from .nuisance import b_of_t, d_hat_all, fit_propensity, mu_hat, r_hat, t_hat
from .sieve import build_basis, eval_basis, penalty_matrix
from .simulation import DgpSpec, generate, run_monte_carlo, stratified_fit_driver, true_tau
