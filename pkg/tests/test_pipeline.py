import numpy as np
import pytest
import torch

from graph_retarget.denoiser import DenoiserConfig
from graph_retarget.diffusion import NumericError, build_schedule
from graph_retarget.guidance import GuidanceWeights, loss_similar
from graph_retarget.motion import MotionClip
from graph_retarget.pipeline import (Checkpoint, CheckpointError, MetricError, TrainConfig, adapt,
                                     assemble_dataset, evaluate_positional_mse, init_checkpoint,
                                     load_checkpoint, make_sample, read_metrics, save_checkpoint,
                                     train)
from graph_retarget.skeleton import AugmentationPolicy, ConfigError, JointMap, build_joint_map
from graph_retarget.synthetic import biped, clip_from_pose, humanoid, random_pose, walking_clip

FAST = TrainConfig(batch_size=2, lr=1e-3, log_every=1, checkpoint_every=3)


@pytest.fixture
def graphs():
    return [biped("biped"), humanoid("humanoid"), biped("tall", scale=1.4)]


@pytest.fixture
def motions(graphs):
    return [walking_clip(graphs[0], 8, t_max=16, j_max=16),
            walking_clip(graphs[1], 8, phase=1.0, t_max=16, j_max=16)]


def test_cross_product(graphs, motions):
    ds = assemble_dataset(motions, graphs)
    assert len(ds) == 6
    # "tall" has no motion data but is still a target
    assert {s.target_graph.name for s in ds} == {"biped", "humanoid", "tall"}
    for s in ds:
        assert s.alpha == pytest.approx(s.target_graph.link_vectors[2:4, 2].__abs__().sum() / 0.8
                                        if s.source_graph.name != "tall" else s.alpha)


def test_alpha_recomputed_after_augmentation(graphs, motions):
    plain = assemble_dataset(motions[:1], graphs[:1])
    aug = assemble_dataset(motions[:1], graphs[:1], AugmentationPolicy(), seed=3, copies=4)
    assert len(aug) == 4
    assert plain[0].alpha == 1.0
    assert all(s.alpha != 1.0 for s in aug)
    from graph_retarget.kinematics import scaling_factor
    for s in aug:
        assert s.alpha == scaling_factor(s.target_graph, s.source_graph)


def test_assembly_deterministic(graphs, motions):
    policy = AugmentationPolicy(drop_prob=0.3)
    a = assemble_dataset(motions, graphs, policy, seed=11, copies=2)
    b = assemble_dataset(motions, graphs, policy, seed=11, copies=2)
    c = assemble_dataset(motions, graphs, policy, seed=12, copies=2)
    assert [(s.target_graph, s.joint_map, s.alpha) for s in a] == [(s.target_graph, s.joint_map, s.alpha) for s in b]
    assert [s.alpha for s in a] != [s.alpha for s in c]


def test_unknown_skeleton(graphs):
    clip = walking_clip(graphs[0], 4)
    bad = MotionClip(clip.data, clip.frame_valid, clip.joint_valid, skeleton_id="ghost")
    with pytest.raises(ConfigError, match="ghost"):
        assemble_dataset([bad], graphs)


# -- metric ---------------------------------------------------------------

def test_mse_perfect_and_offset():
    g = humanoid()
    ref = walking_clip(g, 6)
    m = build_joint_map(g, g)
    assert evaluate_positional_mse(ref, g, ref, m, 1.0) == 0.0
    moved = ref.tokens().copy()
    moved[:, 0, 3:6] += 0.03  # base shift moves every FK joint by 3 cm per axis
    got = evaluate_positional_mse(ref.with_data(moved), g, ref, m, 1.0)
    assert got == pytest.approx(27.0, rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_mse_equals_normalized_similarity(seed):
    rng = np.random.default_rng(seed)
    src, dst = humanoid("h"), biped("b", scale=0.7)
    ref = clip_from_pose(src, random_pose(rng, 6, src.joint_count))
    pred = clip_from_pose(dst, random_pose(rng, 6, dst.joint_count))
    m = build_joint_map(src, dst)
    alpha = 0.7
    sim = float(loss_similar(pred, dst, ref, m, alpha, w0=1.0))
    want = sim / (6 * len(m.pairs())) * 1e4
    assert evaluate_positional_mse(pred, dst, ref, m, alpha) == pytest.approx(want, rel=1e-9)


def test_mse_empty_map():
    g = biped()
    ref = walking_clip(g, 4)
    with pytest.raises(MetricError):
        evaluate_positional_mse(ref, g, ref, JointMap((), 7, 7), 1.0)


# -- training -------------------------------------------------------------

@pytest.fixture
def toy(tiny_cfg, biped_pair):
    src, dst, ref = biped_pair
    return tiny_cfg, [make_sample(ref, src, dst, sample_id="pair0"), make_sample(ref, src, src, sample_id="pair1")]


def _equal_states(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_zero_steps_returns_initial(toy):
    cfg, ds = toy
    ck = train(ds, cfg, build_schedule(10), steps=0, seed=3)
    ref = init_checkpoint(cfg, ck.schedule, 3)
    assert ck.step == 0 and _equal_states(ck.state_dict, ref.state_dict)


def test_checkpoint_roundtrip_bitwise(toy, tmp_path):
    cfg, ds = toy
    ck = train(ds, cfg, build_schedule(10), steps=2, seed=0, train_config=FAST)
    save_checkpoint(ck, tmp_path / "c.pt")
    back = load_checkpoint(tmp_path / "c.pt")
    assert _equal_states(ck.state_dict, back.state_dict)
    assert back.config == cfg and back.step == 2 and back.train_config == FAST
    for a in ("sigmas", "mean", "std"):
        assert np.array_equal(getattr(ck.schedule, a), getattr(back.schedule, a))
    assert torch.equal(ck.rng_state["torch"], back.rng_state["torch"])


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "bad.pt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.pt")


def test_resume_reproduces_trajectory(toy, tmp_path):
    cfg, ds = toy
    sched = build_schedule(10)
    full = train(ds, cfg, sched, steps=6, seed=1, train_config=FAST, checkpoint_dir=tmp_path / "a",
                 metrics_path=tmp_path / "a.jsonl")
    mid = load_checkpoint(tmp_path / "a" / "ckpt_0000003.pt")
    rest = train(ds, steps=3, seed=1, train_config=FAST, init=mid, metrics_path=tmp_path / "b.jsonl")
    assert _equal_states(full.state_dict, rest.state_dict)
    a, b = read_metrics(tmp_path / "a.jsonl"), read_metrics(tmp_path / "b.jsonl")
    for x, y in zip(a[3:], b):
        assert (x["step"], x["recon_loss"], x["guidance_loss"]) == (y["step"], y["recon_loss"], y["guidance_loss"])


def test_training_deterministic(toy):
    cfg, ds = toy
    a = train(ds, cfg, build_schedule(10), steps=2, seed=5, train_config=FAST)
    b = train(ds, cfg, build_schedule(10), steps=2, seed=5, train_config=FAST)
    assert _equal_states(a.state_dict, b.state_dict)


def test_metrics_log_records(toy, tmp_path):
    cfg, ds = toy
    tc = TrainConfig(batch_size=2, log_every=2, eval_every=2, eval_sampling_steps=2)
    train(ds, cfg, build_schedule(10), steps=4, seed=0, train_config=tc, metrics_path=tmp_path / "m.jsonl",
          eval_samples=ds[:1])
    recs = read_metrics(tmp_path / "m.jsonl")
    assert [r["step"] for r in recs] == [2, 4]
    for r in recs:
        assert {"recon_loss", "guidance_loss", "eval_mse"} <= set(r)
        assert set(r["eval_mse"]) == {"biped_x2"}


def test_non_finite_loss_aborts_with_context(toy):
    cfg, ds = toy
    ck = init_checkpoint(cfg, build_schedule(10), 0)
    ck.state_dict["decoder.bias"] = torch.full_like(ck.state_dict["decoder.bias"], float("inf"))
    with pytest.raises(NumericError, match=r"step 1.*pair"):
        train(ds, steps=2, seed=0, train_config=FAST, init=ck)


def test_config_mismatch_with_checkpoint(toy):
    cfg, ds = toy
    ck = init_checkpoint(cfg, build_schedule(10), 0)
    other = DenoiserConfig(**{**cfg.to_dict(), "layers": 3})
    with pytest.raises(CheckpointError):
        train(ds, other, steps=1, init=ck)
    with pytest.raises(CheckpointError):
        adapt(ck, [], ds, 1, cfg=other)


def test_adapt_noop_returns_base(toy):
    cfg, ds = toy
    ck = init_checkpoint(cfg, build_schedule(10), 0)
    assert adapt(ck, [], ds, 0) is ck


def test_adapt_adds_new_target_and_keeps_data(toy, tmp_path):
    cfg, ds = toy
    base = train(ds, cfg, build_schedule(10), steps=2, seed=0, train_config=FAST)
    src = ds[0].source_graph
    new = biped("wide", hip_width=0.2)
    tc = TrainConfig(batch_size=2, lr=1e-3, log_every=100, eval_every=2, eval_sampling_steps=2)
    extra = make_sample(ds[0].reference, src, new, sample_id="new")
    out = adapt(base, [new], ds, 4, motions=[ds[0].reference], source_graphs=[src], train_config=tc,
                metrics_path=tmp_path / "m.jsonl", eval_samples=[ds[0], extra])
    assert out.step == base.step + 4
    recs = read_metrics(tmp_path / "m.jsonl")
    assert [r["step"] for r in recs] == [4, 6]
    assert set(recs[-1]["eval_mse"]) == {"biped_x2", "wide"}
    # normalisation statistics are inherited unchanged
    assert np.array_equal(out.schedule.mean, base.schedule.mean)


def test_adapt_rejects_oversized_graph(toy):
    cfg, ds = toy
    ck = init_checkpoint(cfg, build_schedule(10), 0)
    with pytest.raises(CheckpointError):
        adapt(ck, [humanoid()], ds, 1)
