"""Small synthetic embodiments and motions for tests and desk-scale runs."""
from __future__ import annotations

import numpy as np
import torch

from .kinematics import PoseState, forward_kinematics
from .motion import MotionClip, compute_velocities, pack_tokens
from .skeleton import SkeletonGraph


def biped(name: str = "biped", thigh: float = 0.4, calf: float = 0.4,
          hip_width: float = 0.1, scale: float = 1.0) -> SkeletonGraph:
    """Base plus two hip-knee-ankle pitch chains (7 joints)."""
    names = ["pelvis", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle"]
    parents = [-1, 0, 1, 2, 0, 4, 5]
    links = np.array([
        [0, 0, 0],
        [0, hip_width, -0.05], [0, 0, -thigh], [0, 0, -calf],
        [0, -hip_width, -0.05], [0, 0, -thigh], [0, 0, -calf],
    ]) * scale
    axes = [[0, 0, 0]] + [[0, 1, 0]] * 6
    keys = {"LeftHip": 1, "LeftKnee": 2, "LeftAnkle": 3,
            "RightHip": 4, "RightKnee": 5, "RightAnkle": 6}
    return SkeletonGraph.from_arrays(names, parents, axes, links, keys, name)


def humanoid(name: str = "humanoid", scale: float = 1.0) -> SkeletonGraph:
    """Legs with toes, a torso joint and two arms (15 joints)."""
    names = ["pelvis",
             "l_hip", "l_knee", "l_ankle", "l_toe",
             "r_hip", "r_knee", "r_ankle", "r_toe",
             "torso",
             "l_shoulder", "l_elbow", "l_hand",
             "r_shoulder", "r_elbow", "r_hand"]
    parents = [-1, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 9, 13, 14]
    links = np.array([
        [0, 0, 0],
        [0, 0.1, -0.05], [0, 0, -0.4], [0, 0, -0.4], [0.12, 0, -0.05],
        [0, -0.1, -0.05], [0, 0, -0.4], [0, 0, -0.4], [0.12, 0, -0.05],
        [0, 0, 0.1],
        [0, 0.18, 0.35], [0, 0, -0.28], [0, 0, -0.25],
        [0, -0.18, 0.35], [0, 0, -0.28], [0, 0, -0.25],
    ]) * scale
    axes = [[0, 0, 0],
            [0, 1, 0], [0, 1, 0], [0, 1, 0], [0, 1, 0],
            [0, 1, 0], [0, 1, 0], [0, 1, 0], [0, 1, 0],
            [0, 0, 1],
            [0, 1, 0], [0, 1, 0], [1, 0, 0],
            [0, 1, 0], [0, 1, 0], [1, 0, 0]]
    keys = {}
    for side, off in (("Left", 0), ("Right", 4)):
        keys.update({f"{side}Hip": 1 + off, f"{side}Knee": 2 + off,
                     f"{side}Ankle": 3 + off, f"{side}Toe": 4 + off})
    for side, off in (("Left", 0), ("Right", 3)):
        keys.update({f"{side}Shoulder": 10 + off, f"{side}Elbow": 11 + off, f"{side}Hand": 12 + off})
    return SkeletonGraph.from_arrays(names, parents, axes, links, keys, name)


def random_tree(rng: np.random.Generator, joints: int, name: str = "random") -> SkeletonGraph:
    """Random tree with random unit axes and link vectors; parents precede children."""
    parents = [-1] + [int(rng.integers(0, j)) for j in range(1, joints)]
    axes = rng.normal(size=(joints, 3))
    axes[0] = 0.0
    links = rng.normal(scale=0.3, size=(joints, 3))
    return SkeletonGraph.from_arrays([f"j{i}" for i in range(joints)], parents,
                                     axes if joints > 1 else np.zeros((1, 3)), links, {}, name)


def random_pose(rng: np.random.Generator, frames: int, joints: int) -> PoseState:
    return PoseState(
        torch.as_tensor(rng.normal(scale=0.8, size=(frames, 3))),
        torch.as_tensor(rng.normal(size=(frames, 3))),
        torch.as_tensor(rng.normal(size=(frames, joints - 1))),
    )


def clip_from_pose(g: SkeletonGraph, pose: PoseState, fps: float = 30.0,
                   t_max: int | None = None, j_max: int | None = None) -> MotionClip:
    """Self-consistent clip: position lanes from FK, velocities by differences."""
    with torch.no_grad():
        pos = forward_kinematics(pose, g).numpy()
    tokens = pack_tokens(np.asarray(pose.base_orientation), pos, compute_velocities(pos, fps),
                         np.asarray(pose.joint_angles))
    return MotionClip.from_tokens(tokens, fps, g.name, t_max, j_max)


def gait_pose(g: SkeletonGraph, frames: int, fps: float = 30.0, phase: float = 0.0,
              amplitude: float = 0.4, speed: float = 0.5, height: float | None = None) -> PoseState:
    """Periodic leg swing with a forward-moving base for graphs with Hip/Knee/Ankle keys."""
    t = np.arange(frames) / fps
    w = 2 * np.pi * 1.2
    q = np.zeros((frames, g.joint_count - 1))
    for side, sgn in (("Left", 1.0), ("Right", -1.0)):
        hip, knee, ankle = (g.key_index(side + n) for n in ("Hip", "Knee", "Ankle"))
        if hip > 0:
            q[:, hip - 1] = sgn * amplitude * np.sin(w * t + phase)
        if knee > 0:
            q[:, knee - 1] = amplitude * (1 + np.sin(w * t + phase + sgn * np.pi / 2)) * 0.6
        if ankle > 0:
            q[:, ankle - 1] = -0.3 * amplitude * np.sin(w * t + phase)
    if height is None:
        height = float(-forward_kinematics(PoseState.zeros(1, g.joint_count), g)[0, :, 2].min())
    p0 = np.stack([speed * t, np.zeros(frames), height + 0.02 * np.sin(2 * w * t)], -1)
    r0 = np.stack([np.zeros(frames), np.zeros(frames), 0.1 * np.sin(w * t)], -1)
    return PoseState(torch.as_tensor(r0), torch.as_tensor(p0), torch.as_tensor(q))


def walking_clip(g: SkeletonGraph, frames: int = 16, fps: float = 30.0, phase: float = 0.0,
                 t_max: int | None = None, j_max: int | None = None, **kw) -> MotionClip:
    return clip_from_pose(g, gait_pose(g, frames, fps, phase, **kw), fps, t_max, j_max)
