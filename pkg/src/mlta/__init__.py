"""Multilevel mixture-of-latent-trait clustering for multi-layer bipartite
networks: variational EM with covariate-dependent class priors, a discrete
layer random effect, BIC model selection, and stratified bootstrap errors."""

__version__ = "0.1.0"

from .data import (DataError, FitResult, ModelDims, NetworkData,
                   NumericalError, Params, VarState, load_network,
                   read_model, write_model, write_network)
from .em import (FitConfig, Posteriors, class_priors, e_step, fit_multistart,
                 fit_one, initial_params, m_step_logit, update_rho,
                 update_zeta)
from .inference import (BootstrapResult, align_labels, bootstrap_se,
                        flatten_params, param_names, resample_within_layers)
from .metrics import EvalReport, ari, evaluate, mse, predicted_probs
from .selection import GridSpec, bic, n_free_params, select_model
from .simulate import GroundTruth, SimSpec, default_truth, simulate_network
from .study import StudyResult, run_study
from .varcore import (ComponentMoments, component_moments, inner_em,
                      lambda_fn, log_logistic, logistic, update_xi)

__all__ = [
    "DataError", "NumericalError", "NetworkData", "ModelDims", "Params",
    "VarState", "FitResult", "load_network", "write_network", "write_model",
    "read_model",
    "FitConfig", "Posteriors", "class_priors", "e_step", "m_step_logit",
    "update_rho", "update_zeta", "initial_params", "fit_one", "fit_multistart",
    "GridSpec", "n_free_params", "bic", "select_model",
    "SimSpec", "GroundTruth", "default_truth", "simulate_network",
    "BootstrapResult", "resample_within_layers", "align_labels",
    "param_names", "flatten_params", "bootstrap_se",
    "EvalReport", "ari", "mse", "predicted_probs", "evaluate",
    "StudyResult", "run_study",
    "ComponentMoments", "logistic", "log_logistic", "lambda_fn",
    "component_moments", "update_xi", "inner_em",
]
