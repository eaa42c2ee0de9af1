"""Simulate interacting-agent systems, learn their pairwise interaction
kernels from short-time trajectory data, and score how well the learned
systems reproduce trajectories and emergent behavior."""

__version__ = "0.1.0"

from .basis import BasisSpec, LearningDomain, domain_from_data, eval_basis, roughness_matrix
from .dynamics import (IntegratorConfig, IntegrationError, SystemSpec, SystemState,
                       Trajectory, eval_rhs, fill_derivatives, integrate,
                       integrate_many, pairwise_features)
from .estimator import (HypothesisSet, KernelEstimate, LinearSystem, ObservationSet,
                        approximate_derivatives, assemble, build_hypothesis,
                        evaluate_kernel, fit, merge_estimates, solve)
from .measures import (ConfusionMatrix, EmpiricalMeasure, PatternScores, confusion,
                       detect_clusters, estimate_rho, kernel_l2_error,
                       pattern_indicators, score_emergent, trajectory_error)
from .models import (PRESETS, InitialConditionSampler, build_cs, build_fm2d,
                     build_fm3d, build_gss, build_od, build_sod,
                     sample_initial_conditions)
from .decoupling import Decomposition, decouple, recover_masses
from .experiment import (ExperimentConfig, RunArtifact, desk_config, paper_config,
                         run_experiment)
