"""Padded joint-token motion clips.

Each frame is a grid of J_max tokens with 9 lanes:

* base (row 0): ``[r0 (3), p0 (3), v0 (3)]`` axis-angle, position, velocity
* joint j > 0:  ``[q, p (3), v (3), 0, 0]`` angle, global position, velocity

Use ``position_lanes`` / ``velocity_lanes`` rather than hard-coding slices.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
T_MAX = 60
J_MAX = 40
LANES = 9


class MotionFormatError(ValueError):
    pass


def position_lanes(data):
    """Position lanes gathered over joints, usable on numpy arrays and tensors."""
    base = data[..., :1, 3:6]
    rest = data[..., 1:, 1:4]
    if isinstance(data, np.ndarray):
        return np.concatenate([base, rest], axis=-2)
    return torch.cat([base, rest], dim=-2)


def velocity_lanes(data):
    base = data[..., :1, 6:9]
    rest = data[..., 1:, 4:7]
    if isinstance(data, np.ndarray):
        return np.concatenate([base, rest], axis=-2)
    return torch.cat([base, rest], dim=-2)


def lane_mask(joints: int) -> np.ndarray:
    """(J, 9) boolean mask of lanes that carry data (pad lanes excluded)."""
    m = np.ones((joints, LANES), dtype=bool)
    m[1:, 7:] = False
    return m


def pack_tokens(base_rot, positions, velocities, angles) -> np.ndarray:
    """Assemble a (T, J, 9) token array.

    base_rot (T, 3), positions (T, J, 3), velocities (T, J, 3), angles (T, J-1).
    """
    base_rot = np.asarray(base_rot, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    velocities = np.asarray(velocities, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    t, j = positions.shape[:2]
    data = np.zeros((t, j, LANES))
    data[:, 0, 0:3] = base_rot
    data[:, 0, 3:6] = positions[:, 0]
    data[:, 0, 6:9] = velocities[:, 0]
    data[:, 1:, 0] = angles
    data[:, 1:, 1:4] = positions[:, 1:]
    data[:, 1:, 4:7] = velocities[:, 1:]
    return data


@dataclass(frozen=True, eq=False)
class MotionClip:
    """Padded motion tensor with validity masks."""

    data: np.ndarray
    frame_valid: np.ndarray
    joint_valid: np.ndarray
    fps: float = 30.0
    skeleton_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        fv = np.asarray(self.frame_valid, dtype=bool)
        jv = np.asarray(self.joint_valid, dtype=bool)
        if data.ndim != 3 or data.shape[2] != LANES:
            raise MotionFormatError(f"clip data must be (T, J, {LANES}), got {data.shape}")
        if fv.shape != (data.shape[0],) or jv.shape != (data.shape[1],):
            raise MotionFormatError("mask shapes do not match data")
        for arr in (data, fv, jv):
            arr.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "frame_valid", fv)
        object.__setattr__(self, "joint_valid", jv)
        object.__setattr__(self, "fps", float(self.fps))

    @classmethod
    def from_tokens(cls, tokens, fps=30.0, skeleton_id="", t_max=None, j_max=None) -> "MotionClip":
        """Wrap an unpadded (T, J, 9) array, padding to the requested maxima."""
        tokens = np.asarray(tokens, dtype=np.float64)
        t, j = tokens.shape[:2]
        t_max = t if t_max is None else t_max
        j_max = j if j_max is None else j_max
        if t > t_max or j > j_max:
            raise MotionFormatError(f"clip ({t}, {j}) exceeds maxima ({t_max}, {j_max})")
        data = np.zeros((t_max, j_max, LANES))
        data[:t, :j] = tokens
        data[:t, 1:j, 7:] = 0.0
        fv = np.arange(t_max) < t
        jv = np.arange(j_max) < j
        return cls(data, fv, jv, fps, skeleton_id)

    @property
    def num_frames(self) -> int:
        return int(self.frame_valid.sum())

    @property
    def num_joints(self) -> int:
        return int(self.joint_valid.sum())

    def tokens(self) -> np.ndarray:
        """The valid (T, J, 9) block (valid entries are a leading prefix)."""
        return self.data[: self.num_frames, : self.num_joints]

    def positions(self) -> np.ndarray:
        return position_lanes(self.tokens())

    def velocities(self) -> np.ndarray:
        return velocity_lanes(self.tokens())

    def with_data(self, data) -> "MotionClip":
        return MotionClip(np.asarray(data), self.frame_valid, self.joint_valid, self.fps, self.skeleton_id)

    def padded(self, t_max: int, j_max: int) -> "MotionClip":
        return MotionClip.from_tokens(self.tokens(), self.fps, self.skeleton_id, t_max, j_max)

    def __eq__(self, other):
        if not isinstance(other, MotionClip):
            return NotImplemented
        return (np.array_equal(self.data, other.data)
                and np.array_equal(self.frame_valid, other.frame_valid)
                and np.array_equal(self.joint_valid, other.joint_valid)
                and self.fps == other.fps and self.skeleton_id == other.skeleton_id)

    # -- persistence -----------------------------------------------------
    def to_dict(self) -> dict:
        t, j, _ = self.data.shape
        return {
            "version": FORMAT_VERSION,
            "T": t,
            "J": j,
            "fps": self.fps,
            "skeleton_id": self.skeleton_id,
            "data": self.data.reshape(-1).tolist(),
            "frame_valid": self.frame_valid.tolist(),
            "joint_valid": self.joint_valid.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MotionClip":
        if d.get("version") != FORMAT_VERSION:
            raise MotionFormatError(f"unsupported clip version {d.get('version')!r}")
        try:
            t, j = int(d["T"]), int(d["J"])
            data = np.array(d["data"], dtype=np.float64)
            if data.size != t * j * LANES:
                raise MotionFormatError(f"data has {data.size} values, header says {t}x{j}x{LANES}")
            return cls(data.reshape(t, j, LANES), np.array(d["frame_valid"], dtype=bool),
                       np.array(d["joint_valid"], dtype=bool), d["fps"], d["skeleton_id"])
        except KeyError as exc:
            raise MotionFormatError(f"clip file missing field {exc}") from None


def save_clip(clip: MotionClip, path) -> None:
    Path(path).write_text(json.dumps(clip.to_dict()))


def load_clip(path) -> MotionClip:
    try:
        d = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MotionFormatError(f"corrupt clip file {path}: {exc}") from None
    if not isinstance(d, dict):
        raise MotionFormatError(f"corrupt clip file {path}")
    return MotionClip.from_dict(d)


def compute_velocities(positions, fps: float) -> np.ndarray:
    """Backward differences along axis 0; the first frame copies the second."""
    p = np.asarray(positions, dtype=np.float64)
    v = np.zeros_like(p)
    if p.shape[0] < 2:
        return v
    v[1:] = (p[1:] - p[:-1]) * fps
    v[0] = v[1]
    return v


@dataclass(frozen=True)
class RawMotion:
    """A recorded trajectory before clipping.

    base_rot (T, 3) axis-angle, joint_angles (T, J-1), positions (T, J, 3)
    global joint positions with the base position in row 0.
    """

    fps: float
    base_rot: np.ndarray
    joint_angles: np.ndarray
    positions: np.ndarray
    skeleton_id: str = ""

    @property
    def num_frames(self) -> int:
        return int(np.asarray(self.positions).shape[0])


def downsample_indices(n: int, source_fps: float, target_fps: float) -> np.ndarray:
    if target_fps <= 0 or source_fps <= 0:
        raise ValueError("frame rates must be positive")
    if target_fps >= source_fps:
        return np.arange(n)
    step = source_fps / target_fps
    idx = np.round(np.arange(0, n, step)).astype(int)
    return idx[idx < n]


def preprocess_clip(raw: RawMotion, target_fps: float = 30.0, clip_len: int = 60,
                    t_max: int | None = None, j_max: int | None = None) -> list[MotionClip]:
    """Downsample, cut into non-overlapping windows and rebase each window so
    the first base position sits over the origin (height kept)."""
    idx = downsample_indices(raw.num_frames, raw.fps, target_fps)
    base_rot = np.asarray(raw.base_rot, dtype=np.float64)[idx]
    angles = np.asarray(raw.joint_angles, dtype=np.float64)[idx]
    positions = np.asarray(raw.positions, dtype=np.float64)[idx]
    clips = []
    for start in range(0, len(idx) - clip_len + 1, clip_len):
        sl = slice(start, start + clip_len)
        pos = positions[sl].copy()
        offset = np.array([pos[0, 0, 0], pos[0, 0, 1], 0.0])
        pos -= offset
        vel = compute_velocities(pos, target_fps)
        tokens = pack_tokens(base_rot[sl], pos, vel, angles[sl])
        clips.append(MotionClip.from_tokens(
            tokens, target_fps, raw.skeleton_id,
            t_max if t_max is not None else clip_len,
            j_max if j_max is not None else tokens.shape[1]))
    return clips


def rebase_clip(clip: MotionClip) -> MotionClip:
    """Translate a clip so its frame-0 base xy is the origin."""
    tok = clip.tokens().copy()
    offset = np.array([tok[0, 0, 3], tok[0, 0, 4], 0.0])
    tok[:, 0, 3:6] -= offset
    tok[:, 1:, 1:4] -= offset
    data = np.array(clip.data)
    data[: tok.shape[0], : tok.shape[1]] = tok
    return clip.with_data(data)
