"""Dataset assembly, training, adaptation and evaluation."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .denoiser import ConditionSet, DenoiserConfig, GraphDenoiser
from .diffusion import NoiseSchedule, NumericError, build_schedule, fit_normalization, sample
from .diffusion import training_loss
from .guidance import GuidanceWeights
from .kinematics import fk_tokens, scaled_reference_positions, scaling_factor
from .motion import MotionClip
from .skeleton import (AugmentationPolicy, ConfigError, JointMap, SkeletonGraph,
                       augment_correspondence, augment_skeleton, build_joint_map)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class MetricError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSample:
    reference: MotionClip
    source_graph: SkeletonGraph
    target_graph: SkeletonGraph
    joint_map: JointMap
    alpha: float
    sample_id: str = ""

    @property
    def conditions(self) -> ConditionSet:
        return ConditionSet(self.reference, self.source_graph, self.target_graph, self.joint_map)


def make_sample(reference: MotionClip, source: SkeletonGraph, target: SkeletonGraph,
                jmap: JointMap | None = None, sample_id: str = "") -> TrainSample:
    jmap = build_joint_map(source, target) if jmap is None else jmap
    return TrainSample(reference, source, target, jmap, scaling_factor(target, source), sample_id)


def assemble_dataset(motions: Sequence[MotionClip], graphs: Sequence[SkeletonGraph],
                     aug: AugmentationPolicy | None = None, seed: int = 0,
                     copies: int = 1) -> list[TrainSample]:
    """Every motion paired with every graph as target.

    With augmentation enabled each pair yields ``copies`` samples whose target
    link lengths and correspondences are perturbed; alpha is recomputed from
    the augmented target.
    """
    by_name = {g.name: g for g in graphs}
    if len(by_name) != len(graphs):
        raise ConfigError("graph names must be unique")
    augment = aug is not None and aug.enabled
    samples = []
    for mi, motion in enumerate(motions):
        if motion.skeleton_id not in by_name:
            raise ConfigError(f"motion {mi} references unknown skeleton {motion.skeleton_id!r}")
        source = by_name[motion.skeleton_id]
        for gi, target in enumerate(graphs):
            for c in range(copies if augment else 1):
                sid = f"m{mi}:{source.name}->{target.name}"
                tgt, jmap = target, build_joint_map(source, target)
                if augment:
                    s1, s2 = _pair_seeds(seed, mi, gi, c)
                    tgt = augment_skeleton(target, s1, aug)
                    jmap = augment_correspondence(jmap, s2, aug.drop_prob)
                    sid += f"#aug{c}"
                samples.append(TrainSample(motion, source, tgt, jmap, scaling_factor(tgt, source), sid))
    return samples


def _pair_seeds(seed: int, *key: int) -> tuple[int, int]:
    ss = np.random.SeedSequence([seed, *key])
    a, b = ss.generate_state(2)
    return int(a), int(b)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    checkpoint_every: int = 10_000
    log_every: int = 100
    eval_every: int = 0
    eval_sampling_steps: int = 20
    grad_clip: float | None = None


@dataclass
class Checkpoint:
    config: DenoiserConfig
    schedule: NoiseSchedule
    state_dict: dict
    train_config: TrainConfig = field(default_factory=TrainConfig)
    step: int = 0
    optimizer_state: dict | None = None
    rng_state: dict | None = None

    def build_model(self) -> GraphDenoiser:
        model = GraphDenoiser(self.config, self.schedule.steps)
        model.load_state_dict(self.state_dict)
        return model

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "train_config": asdict(self.train_config),
            "schedule": {k: torch.tensor(v) for k, v in
                         (("sigmas", self.schedule.sigmas), ("mean", self.schedule.mean),
                          ("std", self.schedule.std))},
            "state_dict": dict(self.state_dict),
            "step": self.step,
            "optimizer_state": self.optimizer_state,
            "rng_state": self.rng_state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {d.get('version')!r}")
        s = d["schedule"]
        return cls(
            config=DenoiserConfig(**d["config"]),
            schedule=NoiseSchedule(s["sigmas"].numpy(), s["mean"].numpy(), s["std"].numpy()),
            state_dict=d["state_dict"],
            train_config=TrainConfig(**d["train_config"]),
            step=int(d["step"]),
            optimizer_state=d.get("optimizer_state"),
            rng_state=d.get("rng_state"),
        )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt.to_dict(), path)


def load_checkpoint(path) -> Checkpoint:
    try:
        d = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types for bad files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return Checkpoint.from_dict(d)


def init_checkpoint(cfg: DenoiserConfig, schedule: NoiseSchedule, seed: int = 0,
                    train_config: TrainConfig = TrainConfig(),
                    decoder_zero: bool = False) -> Checkpoint:
    torch.manual_seed(seed)
    model = GraphDenoiser(cfg, schedule.steps)
    if decoder_zero:
        torch.nn.init.zeros_(model.decoder.weight)
        torch.nn.init.zeros_(model.decoder.bias)
    return Checkpoint(cfg, schedule, copy.deepcopy(model.state_dict()), train_config)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def evaluate_positional_mse(pred: MotionClip, g_x: SkeletonGraph, ref: MotionClip,
                            jmap: JointMap, alpha: float) -> float:
    """Mean squared key-joint distance per (pair, frame), in cm^2."""
    pairs = jmap.pairs()
    if not pairs:
        raise MetricError("positional MSE is undefined for an empty joint map")
    n = min(pred.data.shape[0], ref.data.shape[0])
    valid = torch.tensor(pred.frame_valid[:n] & ref.frame_valid[:n])
    frames = int(valid.sum())
    if frames == 0:
        raise MetricError("no valid frames to evaluate")
    with torch.no_grad():
        fk = fk_tokens(torch.tensor(pred.data[:n]), g_x)
        target = scaled_reference_positions(ref, alpha)[:n]
        src = torch.tensor([a for a, _ in pairs])
        dst = torch.tensor([b for _, b in pairs])
        sq = ((fk[:, dst] - target[:, src]) ** 2).sum(-1).sum(-1)
        total = float((sq * valid).sum())
    return total / (frames * len(pairs)) * 1e4


class MetricsLog:
    """Append-only JSON-lines log."""

    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def evaluate_embodiments(model: GraphDenoiser, schedule: NoiseSchedule,
                         samples: Sequence[TrainSample], seed: int = 0,
                         steps: int = 20) -> dict[str, float]:
    """Mean sampled positional MSE per target embodiment name."""
    scores: dict[str, list[float]] = {}
    for i, s in enumerate(samples):
        if not s.joint_map.pairs():
            continue
        out = sample(model, s.conditions, schedule, seed=seed + i, steps=steps)
        mse = evaluate_positional_mse(out, s.target_graph, s.reference, s.joint_map, s.alpha)
        scores.setdefault(s.target_graph.name, []).append(mse)
    return {k: float(np.mean(v)) for k, v in scores.items()}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train(dataset: Sequence[TrainSample], cfg: DenoiserConfig | None = None,
          schedule: NoiseSchedule | None = None, weights: GuidanceWeights = GuidanceWeights(),
          steps: int = 1000, seed: int = 0, checkpoint_dir=None,
          train_config: TrainConfig = TrainConfig(), init: Checkpoint | None = None,
          metrics_path=None, eval_samples: Sequence[TrainSample] = (),
          callback: Callable[[int, dict], None] | None = None) -> Checkpoint:
    """Mini-batch Adam on the guided objective.

    Starting from ``init`` resumes its parameters, optimiser and RNG state,
    so split runs reproduce an uninterrupted one. ``steps`` counts the steps
    taken by this call.
    """
    if not dataset:
        raise ConfigError("empty training dataset")
    if init is None:
        cfg = cfg or DenoiserConfig()
        schedule = schedule or build_schedule()
        schedule = fit_normalization(schedule, [s.reference for s in dataset])
        init = init_checkpoint(cfg, schedule, seed, train_config)
    elif cfg is not None and cfg != init.config:
        raise CheckpointError("model config differs from the checkpoint's")
    if steps == 0:
        return init

    cfg, schedule = init.config, init.schedule
    model = init.build_model()
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=train_config.lr)
    gen = torch.Generator().manual_seed(seed + 1)
    torch.manual_seed(seed + 2)
    if init.optimizer_state is not None:
        opt.load_state_dict(init.optimizer_state)
    if init.rng_state is not None:
        gen.set_state(init.rng_state["generator"])
        torch.set_rng_state(init.rng_state["torch"])

    log_file = MetricsLog(metrics_path)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    step = init.step
    t0 = time.time()

    def snapshot() -> Checkpoint:
        return Checkpoint(cfg, schedule, copy.deepcopy(model.state_dict()), train_config, step,
                          copy.deepcopy(opt.state_dict()),
                          {"generator": gen.get_state(), "torch": torch.get_rng_state()})

    for _ in range(steps):
        idx = torch.randint(len(dataset), (train_config.batch_size,), generator=gen)
        batch = [dataset[int(i)] for i in idx]
        try:
            out = training_loss(model, batch, schedule, weights, gen)
        except NumericError as exc:
            ids = [batch[i].sample_id for i in range(len(batch))]
            raise NumericError(f"step {step + 1}: {exc}; samples {ids}") from None
        opt.zero_grad()
        out["total"].backward()
        if train_config.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip)
        opt.step()
        step += 1
        rec = {"step": step, "recon_loss": float(out["recon"].detach()), "guidance_loss": float(out["guidance"].detach())}
        if callback is not None:
            callback(step, rec)
        if train_config.eval_every and step % train_config.eval_every == 0 and eval_samples:
            rec["eval_mse"] = evaluate_embodiments(model, schedule, eval_samples, seed,
                                                   train_config.eval_sampling_steps)
        if step % train_config.log_every == 0 or "eval_mse" in rec:
            rec["elapsed_s"] = round(time.time() - t0, 2)
            log_file.append(rec)
            log.info("step %d recon %.4g guidance %.4g", step, rec["recon_loss"], rec["guidance_loss"])
        if ckpt_dir is not None and step % train_config.checkpoint_every == 0:
            save_checkpoint(snapshot(), ckpt_dir / f"ckpt_{step:07d}.pt")

    final = snapshot()
    if ckpt_dir is not None:
        save_checkpoint(final, ckpt_dir / "ckpt_last.pt")
    return final


def adapt(base: Checkpoint, new_graphs: Sequence[SkeletonGraph], dataset: Sequence[TrainSample],
          steps: int, motions: Sequence[MotionClip] = (), source_graphs: Sequence[SkeletonGraph] = (),
          seed: int = 0, weights: GuidanceWeights = GuidanceWeights(),
          train_config: TrainConfig | None = None, cfg: DenoiserConfig | None = None,
          checkpoint_dir=None, metrics_path=None, eval_samples: Sequence[TrainSample] = (),
          aug: AugmentationPolicy | None = None) -> Checkpoint:
    """Continue training with extra target graphs while keeping the original
    samples; every motion is paired with every new graph."""
    if cfg is not None and cfg != base.config:
        raise CheckpointError("adaptation config differs from the base checkpoint's")
    for g in new_graphs:
        if g.joint_count > base.config.j_max:
            raise CheckpointError(f"graph {g.name!r} exceeds the model's j_max")
    if not new_graphs and steps == 0:
        return base
    by_name = {g.name: g for g in source_graphs}
    extra = []
    for mi, motion in enumerate(motions):
        if motion.skeleton_id not in by_name:
            raise ConfigError(f"motion {mi} references unknown skeleton {motion.skeleton_id!r}")
        source = by_name[motion.skeleton_id]
        for g in new_graphs:
            tgt, jmap = g, build_joint_map(source, g)
            if aug is not None and aug.enabled:
                s1, s2 = _pair_seeds(seed, mi, len(extra), -1)
                tgt = augment_skeleton(g, s1, aug)
                jmap = augment_correspondence(jmap, s2, aug.drop_prob)
            extra.append(TrainSample(motion, source, tgt, jmap, scaling_factor(tgt, source),
                                     f"m{mi}:{source.name}->{g.name}"))
    start = replace(base, optimizer_state=None, rng_state=None)
    return train(list(dataset) + extra, weights=weights, steps=steps, seed=seed,
                 checkpoint_dir=checkpoint_dir, train_config=train_config or base.train_config,
                 init=start, metrics_path=metrics_path, eval_samples=eval_samples)
