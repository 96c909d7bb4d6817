"""Graph-conditioned diffusion for retargeting motion across robot skeletons."""
from .denoiser import ConditionSet, DenoiserConfig, GraphDenoiser
from .diffusion import NoiseSchedule, build_schedule, perturb, sample, training_loss
from .guidance import GuidanceWeights, direct_optimize, f_kin_energy
from .kinematics import PoseState, forward_kinematics, leg_length, scaling_factor
from .motion import MotionClip, load_clip, save_clip
from .pipeline import (Checkpoint, TrainConfig, TrainSample, adapt, assemble_dataset,
                       evaluate_positional_mse, load_checkpoint, save_checkpoint, train)
from .skeleton import JointMap, SkeletonGraph, build_joint_map, parse_urdf

__version__ = "0.1.0"
