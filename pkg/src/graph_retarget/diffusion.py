"""Variance-exploding noise schedule, guided training objective and sampler."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .denoiser import ConditionBatch, ConditionSet, GraphDenoiser, collate
from .guidance import GuidanceWeights, f_kin_energy
from .kinematics import DTYPE, _t, rewrite_from_fk
from .motion import LANES, MotionClip, lane_mask


class ScheduleError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class SamplingError(RuntimeError):
    pass


def _stats(mean=None, std=None):
    mean = np.zeros((2, LANES)) if mean is None else np.asarray(mean, dtype=np.float64)
    std = np.ones((2, LANES)) if std is None else np.asarray(std, dtype=np.float64)
    return mean, std


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Decreasing noise levels plus per-lane normalisation statistics.

    ``mean`` / ``std`` have shape (2, 9): row 0 for the base token, row 1 for
    every other joint token.
    """

    sigmas: np.ndarray
    mean: np.ndarray = field(default_factory=lambda: _stats()[0])
    std: np.ndarray = field(default_factory=lambda: _stats()[1])

    @property
    def steps(self) -> int:
        return len(self.sigmas)

    @property
    def sigma_max(self) -> float:
        return float(self.sigmas[0])

    @property
    def sigma_min(self) -> float:
        return float(self.sigmas[-1])

    def sigma(self, t_index) -> torch.Tensor:
        """Noise level of 1-based step indices (1 is the noisiest)."""
        return torch.tensor(self.sigmas)[torch.as_tensor(t_index) - 1]

    def index_of(self, sigma) -> torch.Tensor:
        """1-based index of the nearest schedule level in log space."""
        s = _t(sigma).clamp_min(1e-300).log()
        grid = torch.tensor(np.log(self.sigmas))
        return (s[..., None] - grid).abs().argmin(-1) + 1

    def with_stats(self, mean, std) -> "NoiseSchedule":
        return NoiseSchedule(self.sigmas, np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64))

    # -- normalisation ---------------------------------------------------
    def _broadcast(self, joints: int):
        mean = np.repeat(self.mean[1:2], joints, 0)
        std = np.repeat(self.std[1:2], joints, 0)
        mean[0], std[0] = self.mean[0], self.std[0]
        return torch.tensor(mean), torch.tensor(std)

    def normalize(self, data, frame_valid=None, joint_valid=None):
        """Per-lane z-score of valid entries; padded entries stay zero."""
        x = _t(data)
        mean, std = self._broadcast(x.shape[-2])
        out = (x - mean) / std
        return out * _valid(x, frame_valid, joint_valid)

    def denormalize(self, data, frame_valid=None, joint_valid=None):
        x = _t(data)
        mean, std = self._broadcast(x.shape[-2])
        out = x * std + mean
        return out * _valid(x, frame_valid, joint_valid)

    def to_dict(self) -> dict:
        return {"sigmas": self.sigmas.tolist(), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NoiseSchedule":
        return cls(np.array(d["sigmas"], dtype=np.float64), np.array(d["mean"]), np.array(d["std"]))


def _bool(mask, n: int) -> torch.Tensor:
    if mask is None:
        return torch.ones(n, dtype=torch.bool)
    if isinstance(mask, torch.Tensor):
        return mask.bool()
    return torch.tensor(np.asarray(mask, dtype=bool))


def _valid(x, frame_valid, joint_valid) -> torch.Tensor:
    """Broadcastable (..., T, J, 9) mask of data-carrying entries."""
    T, J = x.shape[-3], x.shape[-2]
    fv, jv = _bool(frame_valid, T), _bool(joint_valid, J)
    lanes = torch.tensor(lane_mask(J))
    return (fv[..., :, None, None] & jv[..., None, :, None]) & lanes


def build_schedule(steps: int = 1000, sigma_min: float = 0.01, sigma_max: float = 10.0) -> NoiseSchedule:
    """Geometric grid from sigma_max down to sigma_min."""
    if not 0 < sigma_min < sigma_max:
        raise ScheduleError("need 0 < sigma_min < sigma_max")
    if steps < 1:
        raise ScheduleError("need at least one step")
    if steps == 1:
        return NoiseSchedule(np.array([sigma_max], dtype=np.float64))
    i = np.arange(steps)
    sigmas = sigma_max * (sigma_min / sigma_max) ** (i / (steps - 1))
    sigmas[0], sigmas[-1] = sigma_max, sigma_min
    return NoiseSchedule(sigmas)


def fit_normalization(schedule: NoiseSchedule, clips: Sequence[MotionClip]) -> NoiseSchedule:
    """Per-lane statistics over the valid tokens of ``clips``."""
    base, rest = [], []
    for c in clips:
        tok = c.tokens()
        base.append(tok[:, 0])
        if tok.shape[1] > 1:
            rest.append(tok[:, 1:].reshape(-1, LANES))
    mean, std = _stats()
    for row, parts in ((0, base), (1, rest)):
        if parts:
            arr = np.concatenate(parts)
            mean[row] = arr.mean(0)
            sd = arr.std(0)
            std[row] = np.where(sd > 1e-6, sd, 1.0)
    mean[1, 7:] = 0.0
    std[1, 7:] = 1.0
    return schedule.with_stats(mean, std)


def perturb(x, sigma, seed=None, mask=None, generator: torch.Generator | None = None) -> torch.Tensor:
    """``x + sigma * eps`` with standard normal eps on the entries where mask is set."""
    x = _t(x)
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    eps = torch.randn(x.shape, generator=generator, dtype=DTYPE)
    sigma = _t(sigma)
    while sigma.dim() and sigma.dim() < x.dim():
        sigma = sigma[..., None]
    noise = sigma * eps
    if mask is not None:
        noise = noise * torch.as_tensor(mask)
    return x + noise


def input_scale(sigma: torch.Tensor) -> torch.Tensor:
    """Keeps the network input near unit variance across noise levels."""
    return 1.0 / torch.sqrt(sigma * sigma + 1.0)


def denoise(model: GraphDenoiser, schedule: NoiseSchedule, noisy: torch.Tensor, sigma,
            batch: ConditionBatch, reference=None) -> torch.Tensor:
    """Predicted clean tokens (normalised space) from noisy tokens (B, T, J, 9)."""
    sigma = _t(sigma).reshape(-1)
    if sigma.numel() == 1 and noisy.shape[0] > 1:
        sigma = sigma.expand(noisy.shape[0])
    if (sigma <= 0).any():
        raise ScheduleError("sigma must be positive")
    t_index = schedule.index_of(sigma)
    return model(noisy * input_scale(sigma)[:, None, None, None], t_index, batch, reference)


def target_layout_mask(batch: ConditionBatch) -> torch.Tensor:
    """(B, T, J, 9) entries the prediction may carry (target skeleton)."""
    lanes = torch.tensor(lane_mask(batch.joint_valid.shape[1]))
    return (batch.frame_valid[:, :, None] & batch.joint_valid[:, None, :])[..., None] & lanes


def training_loss(model: GraphDenoiser, samples: Sequence, schedule: NoiseSchedule,
                  weights: GuidanceWeights = GuidanceWeights(),
                  generator: torch.Generator | None = None, t_index=None) -> dict:
    """Denoising reconstruction plus lambda-weighted kinematic energy.

    ``samples`` carry ``reference``, ``source_graph``, ``target_graph``,
    ``joint_map`` and ``alpha``. The clean sample is the reference motion laid
    onto the target joint grid; the energy is evaluated on the de-normalised
    prediction. Returns a dict with ``total``, ``recon``, ``guidance`` and the
    per-sample ``guidance_items``.
    """
    cfg = model.cfg
    generator = generator or torch.Generator().manual_seed(0)
    conds = [ConditionSet(s.reference, s.source_graph, s.target_graph, s.joint_map) for s in samples]
    batch = collate(conds, cfg, schedule)
    B = len(samples)
    if t_index is None:
        t_index = torch.randint(1, schedule.steps + 1, (B,), generator=generator)
    sigma = schedule.sigma(t_index)
    noise_mask = target_layout_mask(batch)
    x = batch.ref_data * noise_mask
    noisy = perturb(x, sigma, mask=noise_mask, generator=generator)
    pred = denoise(model, schedule, noisy, sigma, batch)
    bad = ~torch.isfinite(pred.detach()).flatten(1).all(1)
    if bad.any():
        raise NumericError(f"non-finite prediction for batch items {bad.nonzero().flatten().tolist()}")

    recon_mask = noise_mask & batch.ref_joint_valid[:, None, :, None]
    sq = ((pred - x) ** 2 * recon_mask).sum((1, 2, 3))
    recon_items = sq / recon_mask.sum((1, 2, 3)).clamp_min(1)

    guide_items = []
    for b, s in enumerate(samples):
        phys = schedule.denormalize(pred[b], batch.frame_valid[b], batch.joint_valid[b])
        ref = s.reference.padded(cfg.t_max, max(cfg.j_max, s.reference.data.shape[1]))
        energy = f_kin_energy(phys, s.target_graph, ref, s.joint_map, s.alpha, weights)
        guide_items.append(weights.lam * energy.total)
    guide_items = torch.stack(guide_items)
    for b in range(B):
        if not (torch.isfinite(recon_items[b]) and torch.isfinite(guide_items[b])):
            raise NumericError(f"non-finite training loss for batch item {b}")
    recon = recon_items.mean()
    guidance = guide_items.mean()
    return {"total": recon + guidance, "recon": recon, "guidance": guidance,
            "guidance_items": guide_items, "recon_items": recon_items, "t_index": t_index}


def sampling_sigmas(schedule: NoiseSchedule, steps: int | None = None) -> np.ndarray:
    """Evenly spaced subsequence of the schedule, always starting at sigma_max."""
    n = schedule.steps if steps is None else steps
    if n < 1:
        raise ScheduleError("need at least one sampling step")
    if n >= schedule.steps:
        return schedule.sigmas.copy()
    idx = np.round(np.linspace(0, schedule.steps - 1, n)).astype(int)
    return schedule.sigmas[idx]


@torch.no_grad()
def sample(model: GraphDenoiser, cond: ConditionSet, schedule: NoiseSchedule, seed: int = 0,
           steps: int | None = None, rewrite_fk: bool = True, trajectory: list | None = None) -> MotionClip:
    """Deterministic Euler integration of the probability-flow ODE.

    The returned clip is in physical units on the target skeleton; with
    ``rewrite_fk`` its position and velocity lanes are recomputed from the
    predicted pose lanes.
    """
    was_training = model.training
    model.eval()
    try:
        batch = collate([cond], model.cfg, schedule)
        reference = model.encode_reference(batch)
        mask = target_layout_mask(batch)
        gen = torch.Generator().manual_seed(int(seed))
        sigmas = sampling_sigmas(schedule, steps)
        x = perturb(torch.zeros(mask.shape, dtype=DTYPE), sigmas[0], mask=mask, generator=gen)
        for i in range(len(sigmas) - 1):
            s, s_next = float(sigmas[i]), float(sigmas[i + 1])
            if trajectory is not None:
                trajectory.append(s)
            d = (x - denoise(model, schedule, x, s, batch, reference)) / s
            x = (x + (s_next - s) * d) * mask
            if not torch.isfinite(x).all():
                raise SamplingError(f"non-finite sampler state at step {i} (sigma={s:.4g})")
        if trajectory is not None:
            trajectory.append(float(sigmas[-1]))
        x0 = denoise(model, schedule, x, float(sigmas[-1]), batch, reference)
        if not torch.isfinite(x0).all():
            raise SamplingError("non-finite final prediction")
    finally:
        model.train(was_training)
    fv, jv = batch.frame_valid[0], batch.joint_valid[0]
    phys = schedule.denormalize(x0[0], fv, jv)
    g = cond.target_graph
    if rewrite_fk:
        n = int(fv.sum())
        phys = rewrite_from_fk(phys, g, cond.reference.fps, frames=n)
        phys = phys * _valid(phys, fv, jv)
    return MotionClip(phys.numpy(), fv.numpy(), jv.numpy(), cond.reference.fps, g.name)
