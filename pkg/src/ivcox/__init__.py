"""Instrumental-variable Cox regression with a correlated normal frailty.

The treatment follows a probit model whose latent error is correlated with a
normal frailty on the log hazard. Parameters are estimated by Monte Carlo EM.
"""

from .cox import breslow_update, cox_profile_loglik, fit_cox, fit_probit
from .em import EMConfig, bootstrap_se, e_step, initialize, m_step_cox, m_step_treatment, run_em
from .errors import (
    DataError,
    FitError,
    IdentificationViolation,
    InvalidParameter,
    InvalidSpec,
    IVCoxError,
)
from .likelihood import (
    closed_form_frailty_treatment_integral,
    complete_data_loglik,
    cox_kernel,
    observed_loglik_mc,
    posterior_expectation,
    treatment_weight,
)
from .model import (
    BaselineHazard,
    Dataset,
    DesignSpec,
    FitResult,
    ParameterSet,
    SubjectRecord,
    validate_dataset,
    validate_identification,
)
from .simulation import ScenarioSpec, generate, run_replications, scenario, summarize

__all__ = [
    "BaselineHazard", "DataError", "Dataset", "DesignSpec", "EMConfig", "FitError", "FitResult",
    "IVCoxError", "IdentificationViolation", "InvalidParameter", "InvalidSpec", "ParameterSet",
    "ScenarioSpec", "SubjectRecord", "bootstrap_se", "breslow_update", "closed_form_frailty_treatment_integral",
    "complete_data_loglik", "cox_kernel", "cox_profile_loglik", "e_step", "fit_cox", "fit_probit",
    "generate", "initialize", "m_step_cox", "m_step_treatment", "observed_loglik_mc",
    "posterior_expectation", "run_em", "run_replications", "scenario", "summarize", "treatment_weight",
    "validate_dataset", "validate_identification",
]

__version__ = "0.1.0"
