"""Spike-and-slab covariate selection in nonlinear mixed-effects models.

The main entry points are :func:`run_saemvs` (grid procedure with eBIC
choice), :func:`run_map` and :func:`run_mle` (MCMC-SAEM estimators),
:func:`two_step_select` (per-individual fits followed by the lasso) and
:func:`run_campaign` (replicated simulation studies).
"""
from .baselines import (cross_validate, fit_all, fit_individual, lasso_multivariate,
                        lasso_univariate, two_step_select)
from .errors import (AllPointsFailed, ConfigError, ConstantColumn, DegenerateEstimate, Diverged,
                     EmptyTruth, InvalidCorrelation, IoError, MissingArtifacts, NonFiniteOutput,
                     NotConverged, SaemvsError, ShapeMismatch, SingularSystem, TooFewConverged)
from .model import (DesignMatrices, HyperParams, NonlinearModel, ObservationSet, PopulationParams,
                    get_model, standardize)
from .saem import SaemSchedule, run_map, run_mle
from .selection import (Grid, SelectionResult, SupportSet, ebic, log_marginal_likelihood,
                        run_saemvs, select_support, threshold)
from .simulation import (ScenarioSpec, aggregate, evaluate, gen_dataset, logistic_scenario,
                         logistic_settings, pk_scenario, pk_settings, run_campaign,
                         run_replicate)

__all__ = sorted(name for name, obj in globals().items()
                 if not name.startswith("_") and not isinstance(obj, type(errors)))
