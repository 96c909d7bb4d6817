"""Differentiable forward kinematics on skeleton graphs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .motion import MotionClip, position_lanes
from .skeleton import ConfigError, SkeletonGraph, chain_between, semantic_sides

DTYPE = torch.float64
SMALL_ANGLE = 1e-8


class KinematicsError(ValueError):
    pass


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.tensor(np.asarray(x, dtype=np.float64))


def skew(v: torch.Tensor) -> torch.Tensor:
    x, y, z = v.unbind(-1)
    o = torch.zeros_like(x)
    return torch.stack([
        torch.stack([o, -z, y], -1),
        torch.stack([z, o, -x], -1),
        torch.stack([-y, x, o], -1),
    ], -2)


def axis_angle_to_matrix(rotvec) -> torch.Tensor:
    """Rodrigues map for rotation vectors (..., 3) -> (..., 3, 3).

    Below ``SMALL_ANGLE`` the coefficients switch to their Taylor series so
    the map and its gradient stay finite at the origin.
    """
    r = _t(rotvec)
    if not torch.isfinite(r).all():
        raise KinematicsError("non-finite rotation vector")
    theta2 = (r * r).sum(-1)
    small = theta2 < SMALL_ANGLE**2
    theta = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))
    a = torch.where(small, 1 - theta2 / 6, torch.sin(theta) / theta)
    half = torch.sin(theta / 2) / theta
    b = torch.where(small, 0.5 - theta2 / 24, 2 * half * half)
    k = skew(r)
    eye = torch.eye(3, dtype=DTYPE).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rot_axis_angle(axis, angle) -> torch.Tensor:
    """Rotation by ``angle`` (any shape) about a fixed unit ``axis``."""
    axis = _t(axis)
    angle = _t(angle)
    if not (torch.isfinite(axis).all() and torch.isfinite(angle).all()):
        raise KinematicsError("non-finite axis or angle")
    if abs(float(torch.linalg.norm(axis)) - 1.0) > 1e-6:
        raise KinematicsError("rotation axis must be a unit vector")
    k = skew(axis)
    eye = torch.eye(3, dtype=DTYPE)
    s = torch.sin(angle)[..., None, None]
    c = (1 - torch.cos(angle))[..., None, None]
    return eye + s * k + c * (k @ k)


@dataclass(frozen=True)
class PoseState:
    """Per-frame pose: base rotation vector (..., 3), base position (..., 3)
    and joint angles (..., J-1)."""

    base_orientation: torch.Tensor
    base_position: torch.Tensor
    joint_angles: torch.Tensor

    @classmethod
    def from_tokens(cls, data, joints: int) -> "PoseState":
        """Read the pose lanes of a token tensor (..., J_max, 9)."""
        data = _t(data)
        return cls(data[..., 0, 0:3], data[..., 0, 3:6], data[..., 1:joints, 0])

    @classmethod
    def zeros(cls, frames: int, joints: int) -> "PoseState":
        return cls(torch.zeros(frames, 3, dtype=DTYPE), torch.zeros(frames, 3, dtype=DTYPE),
                   torch.zeros(frames, joints - 1, dtype=DTYPE))


def topological_order(g: SkeletonGraph) -> list[int]:
    kids: dict[int, list[int]] = {}
    for j, p in enumerate(g.parent_index):
        kids.setdefault(p, []).append(j)
    order, frontier = [], [0]
    while frontier:
        j = frontier.pop(0)
        order.append(j)
        frontier.extend(kids.get(j, []))
    return order


def forward_kinematics(pose: PoseState, g: SkeletonGraph) -> torch.Tensor:
    """Global joint positions (..., J, 3) of ``g`` in ``pose``."""
    r0, p0, q = _t(pose.base_orientation), _t(pose.base_position), _t(pose.joint_angles)
    J = g.joint_count
    if r0.shape[-1] != 3 or p0.shape[-1] != 3 or q.shape[-1] != J - 1:
        raise KinematicsError(
            f"pose shapes {tuple(r0.shape)}, {tuple(p0.shape)}, {tuple(q.shape)} do not fit J={J}")
    if not (r0.shape[:-1] == p0.shape[:-1] == q.shape[:-1]):
        raise KinematicsError("pose fields disagree on leading dimensions")
    links = torch.tensor(g.link_vectors, dtype=DTYPE)
    axes = torch.tensor(g.axes, dtype=DTYPE)
    rots: list[torch.Tensor | None] = [None] * J
    pos: list[torch.Tensor | None] = [None] * J
    rots[0] = axis_angle_to_matrix(r0)
    pos[0] = p0
    eye = torch.eye(3, dtype=DTYPE)
    for j in topological_order(g)[1:]:
        a = g.parent_index[j]
        pos[j] = pos[a] + rots[a] @ links[j]
        k = skew(axes[j])
        qj = q[..., j - 1, None, None]
        local = eye + torch.sin(qj) * k + (1 - torch.cos(qj)) * (k @ k)
        rots[j] = rots[a] @ local
    return torch.stack(pos, dim=-2)


def fk_tokens(data, g: SkeletonGraph) -> torch.Tensor:
    """FK driven by the pose lanes of a (possibly padded) token tensor."""
    return forward_kinematics(PoseState.from_tokens(data, g.joint_count), g)


def leg_length(g: SkeletonGraph, chain: tuple[str, str, str] = ("Hip", "Knee", "Ankle")) -> float:
    """Summed link lengths from the hip joint down to the ankle joint,
    averaged over the sides that have the full chain."""
    sides = semantic_sides(g, chain)
    if not sides:
        raise ConfigError(f"skeleton {g.name!r} lacks a {'-'.join(chain)} key-joint chain")
    lengths = []
    for side in sides:
        hip, ankle = g.key_index(side + chain[0]), g.key_index(side + chain[-1])
        links = chain_between(g, hip, ankle)
        lengths.append(float(sum(np.linalg.norm(g.link_vectors[j]) for j in links)))
    length = float(np.mean(lengths))
    if length <= 0:
        raise ConfigError(f"skeleton {g.name!r} has a zero-length leg")
    return length


def scaling_factor(target: SkeletonGraph, reference: SkeletonGraph) -> float:
    return leg_length(target) / leg_length(reference)


def scaled_reference_positions(ref: MotionClip, alpha) -> torch.Tensor:
    """Reference global positions (T_max, J_max, 3) scaled homothetically by alpha."""
    if float(alpha) <= 0:
        raise KinematicsError("alpha must be positive")
    return position_lanes(_t(ref.data)) * alpha


def rewrite_from_fk(data, g: SkeletonGraph, fps: float, frames: int | None = None) -> torch.Tensor:
    """Overwrite position and velocity lanes of the first ``frames`` frames
    with FK of the pose lanes, so the token tensor is self-consistent."""
    data = _t(data).clone()
    n = data.shape[-3] if frames is None else frames
    J = g.joint_count
    pos = fk_tokens(data[..., :n, :, :], g)
    vel = torch.zeros_like(pos)
    if n >= 2:
        vel[..., 1:, :, :] = (pos[..., 1:, :, :] - pos[..., :-1, :, :]) * fps
        vel[..., 0, :, :] = vel[..., 1, :, :]
    data[..., :n, 0, 3:6] = pos[..., 0, :]
    data[..., :n, 0, 6:9] = vel[..., 0, :]
    data[..., :n, 1:J, 1:4] = pos[..., 1:, :]
    data[..., :n, 1:J, 4:7] = vel[..., 1:, :]
    return data
