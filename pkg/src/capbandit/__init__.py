"""Pessimistic offline policy learning for confounded contextual bandits
with side observations missing not at random."""

from .scm import (MISSING, Dataset, DiscreteSCM, InterventionalSpec,
                  MissingnessSpec, Policy, ScmError, Variable, enumerate_policies,
                  exact_cate, exact_policy_value, sample_observational,
                  validate_scm)
from .envs import Env, EnvParams, GenerationError, build_env, default_env
from .ies import (IesProblem, build_dtr_extended_ies, build_dtr_ies,
                  build_dtr_zeta_ies, build_extended_pv_ies, build_iv_ies,
                  build_pomdp_ies, build_pv_ies, eval_alpha, select_subset)
from .oracle import (completeness_check, iv_identify_matrix, oracle_hypothesis,
                     pseudo_inverse, pv_identify_matrix)
from .minimax import (FitOptions, MomentSystem, assemble_moments, ball_sup,
                      empirical_loss, fenchel_gap_check, fit, population_moments,
                      population_rmse)
from .radius import covering_radius, product_class_radius, threshold_e_d
from .cap import (CapResult, ConfidenceSpec, build_confidence, cap_select,
                  cap_select_extended, calibrate_threshold, in_confidence_set,
                  pessimistic_value, suboptimality)

__all__ = [n for n in dir() if not n.startswith("_")]
__version__ = "0.1.0"
