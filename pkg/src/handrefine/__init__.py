"""Collision-aware refinement of two-hand meshes."""
from .kinematics import TwoHandParams, TwoHandMesh, WeakPerspectiveCamera, forward, project_weak_perspective, regress_joints
from .template import HandTemplate, TemplateConfig, build_template, default_template
from .sdf import GridConfig, VoxelSdf, PenetrationReport, voxelize_sdf, sample_psi, collision_loss, penetration_metrics
from .objectives import JointTargets, ObjectiveWeights, optimization_objective, finger_constraint, supervised_losses
from .refiner import RefineConfig, RefineReport, factorized_refine, obtain_error, refine_stage, register_stage_module
from .harness import SceneSpec, Scene, generate_scene, run_experiment
from .kernels import BACKEND

__version__ = "0.1.0"
