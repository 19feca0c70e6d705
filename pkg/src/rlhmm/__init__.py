"""Reward-learning decision model with a hidden engaged/lapse strategy chain.

The library fits a mixture of a softmax reinforcement-learning policy and a
uniform lapse policy whose hidden switching follows a two-state Markov chain
with trial-varying transition curves, estimated by penalized generalized EM
with trend-filtering penalties on the transition logits. It also ships the
matching simulators, K-fold penalty selection, whole-session bootstrap
intervals, and engagement summaries.
"""

from .boxopt import BoxSpec, MinimizeResult, minimize_step
from .core import (BasisSpec, ConfigError, Dataset, DatasetSchema,
                   DomainError, IngestionError, ModelParams, NumericalError,
                   Session, StateSpace, TrialRecord, evaluate_basis,
                   load_dataset, read_schema, schema_for, write_dataset,
                   write_schema)
from .em import (FitConfig, FitResult, InitSpec, e_step, fit, fit_rl_only,
                 fit_warm, m_step_pi, m_step_rl, m_step_zeta, observed_loglik,
                 rl_only_loglik)
from .engage import (EngagementReport, default_windows, engagement_report,
                     engagement_scores, group_rate_bands, write_engagement)
from .genlasso import (PenaltySpec, WeightedDifference,
                       build_difference_operator, default_penalty_grid,
                       solve_generalized_lasso)
from .hmm import (PosteriorSet, TransitionCurve, emission_probabilities,
                  forward_backward, predict_strategies, read_posteriors,
                  write_loglik, write_posteriors)
from .inference import (BootstrapReport, CvReport, bootstrap, cross_validate,
                        default_targets, fold_assignments, rl_only_cv_score,
                        write_bootstrap_report, write_cv_report)
from .rl import (QTrajectory, action_probabilities, check_learning_rate,
                 max_effective_rate, propagate_coefficients, softmax_rows)
from .sim import (PrtAllocator, PrtSchedule, SimOutput, SimScenario,
                  case1_scenario, case2_scenario, generate, prt_scenario,
                  scenario_from_config, strategy_accuracy, write_sim_output)

__version__ = "0.1.0"

__all__ = [
    "BasisSpec", "BootstrapReport", "BoxSpec", "ConfigError", "CvReport",
    "Dataset", "DatasetSchema", "DomainError", "EngagementReport",
    "FitConfig", "FitResult", "IngestionError", "InitSpec", "MinimizeResult",
    "ModelParams", "NumericalError", "PenaltySpec", "PosteriorSet",
    "PrtAllocator", "PrtSchedule", "QTrajectory", "Session", "SimOutput",
    "SimScenario", "StateSpace", "TransitionCurve", "TrialRecord",
    "WeightedDifference", "action_probabilities", "bootstrap",
    "build_difference_operator", "case1_scenario", "case2_scenario",
    "check_learning_rate", "cross_validate", "default_penalty_grid",
    "default_targets", "default_windows", "e_step", "emission_probabilities",
    "engagement_report", "engagement_scores", "evaluate_basis", "fit",
    "fit_rl_only", "fit_warm", "fold_assignments", "forward_backward",
    "generate", "group_rate_bands", "load_dataset", "m_step_pi", "m_step_rl",
    "m_step_zeta", "max_effective_rate", "minimize_step", "observed_loglik",
    "predict_strategies", "propagate_coefficients", "prt_scenario",
    "read_posteriors", "read_schema", "rl_only_cv_score", "rl_only_loglik",
    "scenario_from_config", "schema_for", "softmax_rows",
    "solve_generalized_lasso", "strategy_accuracy", "write_bootstrap_report",
    "write_cv_report", "write_dataset", "write_engagement", "write_loglik",
    "write_posteriors", "write_schema", "write_sim_output",
]
