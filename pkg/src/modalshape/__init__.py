"""Model-free shape servoing of deformable objects through a modal feature space.

A fixed ellipsoidal base mesh supplies low-frequency deformation modes. Tracked
surface points are projected onto it and turned into modal coefficients, and an
adaptive Jacobian controller drives those coefficients to a target by moving
a few grasped points.
"""
from .controller import (AdaptiveController, ControllerState, ManipProjection, StepTelemetry,
                         build_manip_projection, control_command, jacobian, lyapunov_decrement,
                         regression_matrix, update_parameters)
from .errors import (ConfigurationError, DegenerateInputError, InsufficientDataError,
                     InvalidInputError, InvalidMeshError, InvalidPointError, InvalidRequestError,
                     InvalidSpecError, ModalShapeError, NumericError, RankDeficientError, RunAborted)
from .features import SamplingSet, compute_features, error_norm, feature_error, resample_polyline
from .harness import (BasisCache, RunRecord, export_csv, read_csv, run_baseline, run_scenario,
                      summarize, sweep)
from .mapping import (AllocationMap, FeatureProjector, SurfaceProjection, build_allocation,
                      build_feature_projector, project_points, reassemble_on_sampling_change)
from .mesh import (AssembledSystem, EllipsoidSpec, MaterialParams, RigidTransform, SolidMesh,
                   assemble_system, estimate_base_mesh_frame, generate_box_mesh,
                   generate_ellipsoid_mesh, read_mesh, write_mesh)
from .modal import ModalBasis, load_basis, rectified_projection, save_basis, solve_modes
from .plant import Plant, generate_desired, plant_metrics, plant_step
from .scenario import Scenario, load_scenario

__version__ = "0.1.0"
