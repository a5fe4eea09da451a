"""Visual predictive control accelerated by a memory of motion.

A 6-DOF pinhole-camera simulator, the preview-window optimization with
visibility constraints, a warm-startable constrained solver, off-line
trajectory-memory construction, k-NN and GP regressors that hand the on-line
solver warm starts and way points, and a seeded benchmark harness.
"""

from .camera import CameraPose, Intrinsics, Twist, feature_depths, integrate_twist, measure, project
from .controller import EpisodeResult, FailureReason, Strategy, run_episode, vpc_step
from .errors import VpcError
from .memory import (BuildConfig, GmmModel, MemorySample, MemoryStore, VisualConfig,
                     build_memory, compute_area_angle, compute_way_point,
                     find_solution, fit_failure_gmm, generate_initial_features,
                     load_memory, save_memory)
from .model import (ControlSequence, FeatureModel, KeepInBox, KeepOutRegion, Weights,
                    desired_features, interaction_matrix, min_distance_to_regions,
                    predict_features, visibility_residuals, vpc_cost)
from .regress import (GprFitConfig, GprModel, QueryResult, assemble_warm_start,
                      extract_way_point, gpr_fit, gpr_query, knn_query, load_gpr,
                      save_gpr)
from .scenario import Scenario, builtin_scenario_path, load_scenario
from .solver import SolverConfig, SolverResult, finite_diff_gradient, minimize

__version__ = "0.1.0"
