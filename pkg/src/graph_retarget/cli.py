"""Command-line entry point: ``graph-retarget <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from .denoiser import DenoiserConfig
from .diffusion import build_schedule, sample
from .guidance import GuidanceWeights, direct_optimize
from .kinematics import scaled_reference_positions, scaling_factor, fk_tokens
from .motion import load_clip, save_clip
from .pipeline import (TrainConfig, adapt, assemble_dataset, evaluate_positional_mse,
                       load_checkpoint, make_sample, train)
from .skeleton import (AugmentationPolicy, ConfigError, build_joint_map, load_graph,
                       load_joint_map, parse_urdf, save_graph)

log = logging.getLogger("graph_retarget")


@dataclass
class RunConfig:
    graphs: list[str] = field(default_factory=list)
    motions: list[str] = field(default_factory=list)
    joint_maps: dict[str, str] = field(default_factory=dict)  # "src->dst" -> path
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "outputs"
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    diffusion_steps: int = 1000
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    sampling_steps: int | None = None
    guidance: GuidanceWeights = field(default_factory=GuidanceWeights)
    augmentation: AugmentationPolicy = field(default_factory=lambda: AugmentationPolicy(enabled=False))
    augment_copies: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


_NESTED = {"model": DenoiserConfig, "guidance": GuidanceWeights,
           "augmentation": AugmentationPolicy, "train": TrainConfig}


def _build(cls, raw: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    raw = {k: tuple(v) if isinstance(v, list) and cls is AugmentationPolicy else v
           for k, v in raw.items()}
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from None


def run_config_from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    raw = dict(raw or {})
    for key, cls in _NESTED.items():
        if key in raw:
            raw[key] = _build(cls, raw[key] or {}, key)
    cfg = _build(RunConfig, raw, "run config")
    base_dir = base_dir or Path(".")
    resolve = lambda p: str(p if Path(p).is_absolute() else base_dir / p)
    cfg.graphs = [resolve(p) for p in cfg.graphs]
    cfg.motions = [resolve(p) for p in cfg.motions]
    cfg.joint_maps = {k: resolve(p) for k, p in cfg.joint_maps.items()}
    missing = [p for p in [*cfg.graphs, *cfg.motions, *cfg.joint_maps.values()] if not Path(p).exists()]
    if missing:
        raise ConfigError(f"missing input files: {missing}")
    return cfg


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a mapping")
    return run_config_from_dict(raw or {}, path.parent)


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _schedule(cfg: RunConfig):
    return build_schedule(cfg.diffusion_steps, cfg.sigma_min, cfg.sigma_max)


def _load_inputs(cfg: RunConfig):
    graphs = [load_graph(p) for p in cfg.graphs]
    motions = [load_clip(p) for p in cfg.motions]
    return graphs, motions


def _dataset(cfg: RunConfig, graphs, motions):
    samples = assemble_dataset(motions, graphs, cfg.augmentation, cfg.seed, cfg.augment_copies)
    if cfg.joint_maps:
        maps = {k: load_joint_map(p) for k, p in cfg.joint_maps.items()}
        samples = [s if f"{s.source_graph.name}->{s.target_graph.name}" not in maps or "#aug" in s.sample_id
                   else make_sample(s.reference, s.source_graph, s.target_graph,
                                    maps[f"{s.source_graph.name}->{s.target_graph.name}"], s.sample_id)
                   for s in samples]
    return samples


def _pair(args):
    ref = load_clip(args.motion)
    src, dst = load_graph(args.source), load_graph(args.target)
    jmap = load_joint_map(args.joint_map) if args.joint_map else build_joint_map(src, dst)
    return ref, src, dst, jmap, scaling_factor(dst, src)


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise ConfigError(f"--{n.replace('_', '-')} is required for {args.command}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_parse_urdf(args) -> None:
    _require(args, "out")
    text = Path(args.urdf).read_text()
    keys = dict(kv.split("=", 1) for kv in args.key) if args.key else None
    g = parse_urdf(text, keys, args.name)
    save_graph(g, args.out)
    log.info("parsed %s: %d joints", g.name, g.joint_count)


def cmd_build_dataset(args) -> None:
    _require(args, "out")
    cfg = _config(args)
    samples = _dataset(cfg, *_load_inputs(cfg))
    manifest = [{"sample_id": s.sample_id, "source": s.source_graph.name,
                 "target": s.target_graph.to_dict(), "joint_map": s.joint_map.to_dict(),
                 "alpha": s.alpha} for s in samples]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps({"seed": cfg.seed, "samples": manifest}, indent=1))
    log.info("wrote %d samples", len(samples))


def cmd_train(args) -> None:
    cfg = _config(args)
    graphs, motions = _load_inputs(cfg)
    samples = _dataset(cfg, graphs, motions)
    out = Path(args.out or cfg.checkpoint_dir)
    init = load_checkpoint(args.checkpoint) if args.checkpoint else None
    ckpt = train(samples, cfg.model, _schedule(cfg), cfg.guidance,
                 steps=args.steps if args.steps is not None else 1000, seed=cfg.seed,
                 checkpoint_dir=out, train_config=cfg.train, init=init,
                 metrics_path=out / "metrics.jsonl")
    log.info("trained to step %d; checkpoint in %s", ckpt.step, out)


def cmd_adapt(args) -> None:
    _require(args, "checkpoint")
    cfg = _config(args)
    graphs, motions = _load_inputs(cfg)
    new = [load_graph(p) for p in args.new_graph]
    base = load_checkpoint(args.checkpoint)
    out = Path(args.out or cfg.checkpoint_dir)
    ckpt = adapt(base, new, _dataset(cfg, graphs, motions), args.steps or 0, motions, graphs,
                 seed=cfg.seed, weights=cfg.guidance, train_config=cfg.train, cfg=cfg.model,
                 checkpoint_dir=out, metrics_path=out / "metrics.jsonl")
    log.info("adapted to step %d", ckpt.step)


def cmd_retarget(args) -> None:
    _require(args, "checkpoint", "out")
    cfg = _config(args)
    ref, src, dst, jmap, alpha = _pair(args)
    ckpt = load_checkpoint(args.checkpoint)
    s = make_sample(ref, src, dst, jmap)
    steps = args.steps if args.steps is not None else cfg.sampling_steps
    clip = sample(ckpt.build_model(), s.conditions, ckpt.schedule, seed=cfg.seed, steps=steps)
    save_clip(clip, args.out)


def cmd_baseline(args) -> None:
    _require(args, "out")
    cfg = _config(args)
    ref, src, dst, jmap, alpha = _pair(args)
    clip = direct_optimize(dst, ref, jmap, alpha, cfg.guidance,
                           steps=args.steps if args.steps is not None else 500)
    save_clip(clip, args.out)


def cmd_evaluate(args) -> None:
    _require(args, "out")
    ref, src, dst, jmap, alpha = _pair(args)
    results = {}
    for item in args.pred:
        label, _, path = item.rpartition("=")
        label = label or Path(path).stem
        results[label] = {"path": str(Path(path).resolve()),
                          "mse_cm2": evaluate_positional_mse(load_clip(path), dst, ref, jmap, alpha)}
    report = {"embodiment": dst.name, "source": src.name, "alpha": alpha,
              "reference": str(Path(args.motion).resolve()),
              "source_graph": str(Path(args.source).resolve()),
              "target_graph": str(Path(args.target).resolve()),
              "joint_map": jmap.to_dict(), "results": results}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report, indent=1))
    for label, r in results.items():
        print(f"{dst.name}\t{label}\t{r['mse_cm2']:.4f} cm^2")


def _plot(report: dict, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .skeleton import JointMap

    ref = load_clip(report["reference"])
    dst = load_graph(report["target_graph"])
    jmap = JointMap.from_dict(report["joint_map"])
    target = scaled_reference_positions(ref, report["alpha"]).numpy()
    pairs = jmap.pairs()
    n = ref.num_frames
    fig, axes = plt.subplots(len(pairs), 3, figsize=(9, 1.6 * len(pairs) + 0.6), squeeze=False, sharex=True)
    for label, r in report["results"].items():
        pred = load_clip(r["path"])
        with torch.no_grad():
            fk = fk_tokens(torch.tensor(pred.data[:n]), dst).numpy()
        for row, (a, b) in enumerate(pairs):
            for k in range(3):
                axes[row, k].plot(fk[:, b, k], label=label)
    for row, ((a, b), rec) in enumerate(zip(pairs, [r for r in jmap.records if r[2] >= 0])):
        for k in range(3):
            axes[row, k].plot(target[:n, a, k], "k--", lw=1, label="reference" if row == k == 0 else None)
        axes[row, 0].set_ylabel(rec[0], fontsize=7)
    for k, name in enumerate("xyz"):
        axes[0, k].set_title(name)
    axes[0, 0].legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def cmd_report(args) -> None:
    _require(args, "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = [json.loads(Path(p).read_text()) for p in args.inputs]
    methods = sorted({m for r in reports for m in r["results"]})
    table: dict[str, dict[str, list[float]]] = {}
    for r in reports:
        for m, v in r["results"].items():
            table.setdefault(r["embodiment"], {}).setdefault(m, []).append(v["mse_cm2"])
    lines = ["| Embodiment | " + " | ".join(methods) + " |", "|---" * (len(methods) + 1) + "|"]
    for emb in sorted(table):
        cells = [f"{np.mean(table[emb][m]):.2f}" if m in table[emb] else "-" for m in methods]
        lines.append(f"| {emb} | " + " | ".join(cells) + " |")
    (out / "table.md").write_text("Positional MSE (cm^2)\n\n" + "\n".join(lines) + "\n")
    (out / "table.json").write_text(json.dumps(
        {e: {m: float(np.mean(v)) for m, v in d.items()} for e, d in table.items()}, indent=1))
    for i, r in enumerate(reports):
        _plot(r, out / f"trajectories_{i:02d}_{r['embodiment']}.png")
    print("\n".join(lines))


COMMANDS = {
    "parse-urdf": cmd_parse_urdf, "build-dataset": cmd_build_dataset, "train": cmd_train,
    "adapt": cmd_adapt, "retarget": cmd_retarget, "baseline": cmd_baseline,
    "evaluate": cmd_evaluate, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig file (YAML or JSON)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--checkpoint")
    common.add_argument("--steps", type=int)
    common.add_argument("--device-threads", type=int)

    pair = argparse.ArgumentParser(add_help=False)
    pair.add_argument("--motion", required=True, help="reference clip")
    pair.add_argument("--source", required=True, help="graph of the reference skeleton")
    pair.add_argument("--target", required=True, help="graph of the desired skeleton")
    pair.add_argument("--joint-map", help="defaults to matching shared key joints")

    p = argparse.ArgumentParser(prog="graph-retarget", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("parse-urdf", parents=[common], help="URDF -> graph JSON")
    s.add_argument("urdf")
    s.add_argument("--name")
    s.add_argument("--key", action="append", metavar="SEMANTIC=JOINT")
    sub.add_parser("build-dataset", parents=[common], help="write the sample manifest")
    sub.add_parser("train", parents=[common])
    s = sub.add_parser("adapt", parents=[common])
    s.add_argument("--new-graph", action="append", default=[])
    sub.add_parser("retarget", parents=[common, pair], help="diffusion sampling")
    sub.add_parser("baseline", parents=[common, pair], help="direct optimisation")
    s = sub.add_parser("evaluate", parents=[common, pair])
    s.add_argument("--pred", action="append", required=True, metavar="[LABEL=]CLIP")
    s = sub.add_parser("report", parents=[common])
    s.add_argument("inputs", nargs="+", help="evaluate outputs")
    return p


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("GDREAM_LOG", "WARNING").upper(), None)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.device_threads:
        torch.set_num_threads(args.device_threads)
    try:
        COMMANDS[args.command](args)
    except (ValueError, ArithmeticError, RuntimeError, OSError, KeyError) as exc:
        print(f"graph-retarget {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
