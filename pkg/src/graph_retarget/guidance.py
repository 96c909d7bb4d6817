"""Kinematic energy used to guide the denoiser, plus an optimisation baseline.

All terms are raw sums over valid frames; nothing is averaged here.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, fields

import numpy as np
import torch

from .kinematics import DTYPE, PoseState, _t, fk_tokens, forward_kinematics, rewrite_from_fk
from .kinematics import scaled_reference_positions
from .motion import MotionClip, position_lanes
from .skeleton import JointMap, SkeletonGraph

log = logging.getLogger(__name__)

NORM_EPS = 1e-8


class EmptyCorrespondenceWarning(UserWarning):
    pass


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GuidanceWeights:
    w0: float = 100.0  # similar
    w1: float = 1.0  # consistency
    w2: float = 900.0  # velocity
    w3: float = 1.0  # regularisation
    lam: float = 1e4

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"guidance weight {f.name} must be nonnegative")


@dataclass
class EnergyBreakdown:
    similar: torch.Tensor
    cst: torch.Tensor
    vel: torch.Tensor
    norm: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def _unpack(pred, ref: MotionClip | None = None):
    """Token tensor and per-frame validity for a prediction."""
    if isinstance(pred, MotionClip):
        data = _t(pred.data)
        valid = torch.tensor(pred.frame_valid)
    else:
        data = _t(pred)
        valid = torch.ones(data.shape[0], dtype=torch.bool)
    if ref is not None:
        rv = torch.tensor(ref.frame_valid)
        n = min(len(valid), len(rv))
        valid = valid[:n] & rv[:n]
        data = data[:n]
    return data, valid


def _pair_index(jmap: JointMap):
    pairs = jmap.pairs()
    src = torch.tensor([a for a, _ in pairs], dtype=torch.long)
    dst = torch.tensor([b for _, b in pairs], dtype=torch.long)
    return src, dst


def _similar(fk, target, src, dst, valid, w0):
    diff = fk[:, dst] - target[: fk.shape[0], src]
    sq = (diff * diff).sum(-1).sum(-1)
    return w0 * (sq * valid).sum()


def _cst(fk, data, valid, w1):
    stored = position_lanes(data)[:, : fk.shape[1]]
    diff = fk - stored
    return w1 * ((diff * diff).sum(-1).sum(-1) * valid).sum()


def _step_valid(valid):
    return valid[1:] & valid[:-1]


def _vel(fk, target, src, dst, valid, w2):
    if fk.shape[0] < 2:
        return fk.new_zeros(())
    d_pred = fk[1:, dst] - fk[:-1, dst]
    tgt = target[: fk.shape[0], src]
    d_ref = tgt[1:] - tgt[:-1]
    diff = d_pred - d_ref
    return w2 * ((diff * diff).sum(-1).sum(-1) * _step_valid(valid)).sum()


def _smooth_norm(x, dim, eps=NORM_EPS):
    return torch.sqrt((x * x).sum(dim) + eps * eps)


def _norm(fk, data, valid, w3, eps=NORM_EPS):
    J = fk.shape[1]
    angles = data[:, 1:J, 0] * valid[:, None]
    angle_term = _smooth_norm(angles, 0, eps).sum()
    if fk.shape[0] < 2:
        return w3 * angle_term
    delta = fk[1:] - fk[:-1]
    delta_term = (_smooth_norm(delta, -1, eps).sum(-1) * _step_valid(valid)).sum()
    return w3 * (angle_term + delta_term)


def loss_similar(pred, g_x: SkeletonGraph, ref: MotionClip, jmap: JointMap, alpha,
                 w0: float = 100.0) -> torch.Tensor:
    """Weighted squared distance between FK key joints and the scaled reference."""
    data, valid = _unpack(pred, ref)
    if not jmap.pairs():
        warnings.warn("empty joint map: similarity loss is zero", EmptyCorrespondenceWarning)
        return data.new_zeros(())
    src, dst = _pair_index(jmap)
    return _similar(fk_tokens(data, g_x), scaled_reference_positions(ref, alpha), src, dst, valid, w0)


def loss_cst(pred, g_x: SkeletonGraph, w1: float = 1.0) -> torch.Tensor:
    """Mismatch between FK of the pose lanes and the stored position lanes."""
    data, valid = _unpack(pred)
    return _cst(fk_tokens(data, g_x), data, valid, w1)


def loss_vel(pred, g_x: SkeletonGraph, ref: MotionClip, jmap: JointMap, alpha,
             w2: float = 900.0) -> torch.Tensor:
    data, valid = _unpack(pred, ref)
    if not jmap.pairs():
        return data.new_zeros(())
    src, dst = _pair_index(jmap)
    return _vel(fk_tokens(data, g_x), scaled_reference_positions(ref, alpha), src, dst, valid, w2)


def loss_norm(pred, g_x: SkeletonGraph, w3: float = 1.0, eps: float = NORM_EPS) -> torch.Tensor:
    """Smoothed L2 norms of each joint-angle trajectory and of every FK frame step."""
    data, valid = _unpack(pred)
    return _norm(fk_tokens(data, g_x), data, valid, w3, eps)


def f_kin_energy(pred, g_x: SkeletonGraph, ref: MotionClip, jmap: JointMap, alpha,
                 weights: GuidanceWeights = GuidanceWeights()) -> EnergyBreakdown:
    """All four terms sharing one FK evaluation; ``total`` is the squared energy."""
    data, valid = _unpack(pred, ref)
    fk = fk_tokens(data, g_x)
    target = scaled_reference_positions(ref, alpha)
    if jmap.pairs():
        src, dst = _pair_index(jmap)
        similar = _similar(fk, target, src, dst, valid, weights.w0)
        vel = _vel(fk, target, src, dst, valid, weights.w2)
    else:
        similar = vel = data.new_zeros(())
    cst = _cst(fk, data, valid, weights.w1)
    norm = _norm(fk, data, valid, weights.w3)
    return EnergyBreakdown(similar, cst, vel, norm, similar + cst + vel + norm)


def guidance_term(pred, g_x, ref, jmap, alpha, weights: GuidanceWeights = GuidanceWeights()):
    """The lambda-weighted guidance contribution of the training objective."""
    return weights.lam * f_kin_energy(pred, g_x, ref, jmap, alpha, weights).total


# ---------------------------------------------------------------------------
# Learning-free baseline
# ---------------------------------------------------------------------------

def _lbfgs_direction(grad, s_hist, y_hist):
    q = grad.clone()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y * s).sum()
        a = rho * (s * q).sum()
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s * y).sum() / (y * y).sum()
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y * q).sum()
        q += (a - b) * s
    return -q

def _pose_tokens(r0, p0, q, g_x, j_max):
    """Token tensor whose position lanes are FK of the pose (velocity lanes unused)."""
    T = r0.shape[0]
    J = g_x.joint_count
    pos = forward_kinematics(PoseState(r0, p0, q), g_x)
    base = torch.cat([r0, p0, torch.zeros_like(p0)], -1)[:, None]
    joints = torch.cat([q[..., None], pos[:, 1:], torch.zeros(T, J - 1, 5, dtype=DTYPE)], -1)
    data = torch.cat([base, joints], 1)
    if j_max > J:
        data = torch.cat([data, torch.zeros(T, j_max - J, 9, dtype=DTYPE)], 1)
    return data


def direct_optimize(g_x: SkeletonGraph, ref: MotionClip, jmap: JointMap, alpha,
                    weights: GuidanceWeights = GuidanceWeights(), steps: int = 500,
                    step_size: float = 1e-3, tol: float = 1e-12, memory: int = 20,
                    j_max: int | None = None, history: list | None = None) -> MotionClip:
    """Minimise the kinematic energy over pose trajectories.

    Descent directions come from the gradient preconditioned by a limited
    memory BFGS estimate; every step passes a backtracking Armijo test, so the
    recorded energy never increases. ``step_size`` is the first trial step
    before curvature information exists.

    Starts from the zero pose with the base following the scaled reference
    base. The returned clip has FK-consistent position and velocity lanes.
    """
    T = ref.num_frames
    J = g_x.joint_count
    j_max = max(J, ref.data.shape[1]) if j_max is None else j_max
    ref_tok = _t(ref.data)
    r0 = ref_tok[:T, 0, 0:3].clone()
    p0 = ref_tok[:T, 0, 3:6].clone() * float(alpha)
    q = torch.zeros(T, J - 1, dtype=DTYPE)
    x = torch.cat([r0.reshape(-1), p0.reshape(-1), q.reshape(-1)])
    split = (3 * T, 3 * T, (J - 1) * T)
    t_max = ref.data.shape[0]

    def energy(vec):
        a, b, c = torch.split(vec, split)
        data = _pose_tokens(a.view(T, 3), b.view(T, 3), c.view(T, J - 1), g_x, j_max)
        if t_max > T:
            data = torch.cat([data, torch.zeros(t_max - T, j_max, 9, dtype=DTYPE)], 0)
        return f_kin_energy(data, g_x, ref, jmap, alpha, weights).total

    def value_and_grad(vec):
        vec = vec.detach().requires_grad_(True)
        e = energy(vec)
        (g,) = torch.autograd.grad(e, vec)
        return e.detach(), g

    e, grad = value_and_grad(x)
    if not torch.isfinite(e):
        raise OptimizationError("initial energy is not finite")
    if history is not None:
        history.append(float(e))
    s_hist: list[torch.Tensor] = []
    y_hist: list[torch.Tensor] = []
    rising = 0
    for it in range(steps):
        gg = float((grad * grad).sum())
        if gg < tol:
            break
        direction = _lbfgs_direction(grad, s_hist, y_hist)
        slope = float((grad * direction).sum())
        if slope >= 0:  # curvature pairs went stale; fall back to the gradient
            s_hist.clear()
            y_hist.clear()
            direction, slope = -grad, -gg
        step = 1.0 if s_hist else step_size
        accepted = False
        for _ in range(60):
            trial = x + step * direction
            with torch.no_grad():
                e_trial = energy(trial)
            if torch.isfinite(e_trial) and e_trial <= e + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            log.debug("line search stalled at iteration %d", it)
            break
        rising = rising + 1 if e_trial > e else 0
        if rising >= 50:
            raise OptimizationError(f"energy increased for 50 iterations (iteration {it})")
        e_new, g_new = value_and_grad(trial)
        if not torch.isfinite(e_new):
            raise OptimizationError(f"energy became non-finite at iteration {it}")
        s_vec, y_vec = trial - x, g_new - grad
        if float((s_vec * y_vec).sum()) > 1e-12:
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        x, e, grad = trial, e_new, g_new
        if history is not None:
            history.append(float(e))

    a, b, c = torch.split(x.detach(), split)
    data = _pose_tokens(a.view(T, 3), b.view(T, 3), c.view(T, J - 1), g_x, j_max)
    data = rewrite_from_fk(data, g_x, ref.fps)
    out = np.zeros((t_max, j_max, 9))
    out[:T] = data.numpy()
    fv = np.arange(t_max) < T
    jv = np.arange(j_max) < J
    return MotionClip(out, fv, jv, ref.fps, g_x.name)
