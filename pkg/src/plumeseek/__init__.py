"""plumeseek: closed-loop simulation of autonomous search for an airborne
release source.

The package couples a plume dispersion model and noisy point sensor, a
particle-filter estimator of the unknown source term, receding-horizon
planners trading off exploitation of the current estimate against active
exploration, and a Monte Carlo experiment harness with numerical checks of
the planner's feasibility and convergence machinery.
"""

from .errors import (CoincidentPointError, ConfigError, GainInstabilityError,
                     NoFeasibleRadiusError, PlumeSeekError, WeightUnderflowError)
from .estimator import (EstimatorConfig, GridSpec, InfoState, ParticleSet,
                        PosteriorSummary, bayes_update, clamp_mean_step,
                        dump_particles, effective_sample_size, init_prior,
                        likelihood, posterior_entropy, predicted_update,
                        resample_and_jitter, reweight, summarize)
from .geometry import Box2D
from .harness import (CampaignResult, CellStats, RunRecord, ScenarioConfig,
                      TheoremCheckConfig, check_descent,
                      check_recursive_feasibility, empirical_mse_bound,
                      lawnmower_actions, rmse_curve, run_campaign, run_episode,
                      write_steps_csv, write_summary_json)
from .planner import (ActionSet, MeasurementScenarios, PlannerSpec, PlanResult,
                      RolloutConfig, SearchConfig, TerminalIngredients, Weights,
                      dcee_cost, derive_feedback_gain, draw_scenarios,
                      generate_candidates, greedy_sequence, ipp_entropy_plan,
                      lyapunov_residual, optimize, smpc_cost,
                      solve_terminal_weight, validate_terminal_ingredients)
from .plume import (EnvironmentParams, SensorModel, SourceTerm, concentration,
                    measure)

__version__ = "0.1.0"
