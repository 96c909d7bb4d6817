import math

import numpy as np
import pytest
import torch

from graph_retarget.denoiser import (Condition, ConditionSet, DenoiserConfig, DenoiserConfigError,
                                     GraphDenoiser, MultiConditionCrossAttention, SpatialAttention,
                                     TemporalAttention, collate, masked_softmax, window_mask)
from graph_retarget.skeleton import build_joint_map
from graph_retarget.synthetic import biped, humanoid, walking_clip

D = torch.float64


def _grpe_layer():
    torch.manual_seed(0)
    layer = SpatialAttention(latent=2, heads=1).to(D)
    with torch.no_grad():
        layer.q.weight.copy_(torch.tensor([[1.0, 2.0], [0.5, -1.0]], dtype=D))
        layer.q.bias.copy_(torch.tensor([0.1, -0.2], dtype=D))
        layer.k.weight.copy_(torch.tensor([[-1.0, 0.0], [3.0, 1.0]], dtype=D))
        layer.k.bias.copy_(torch.tensor([0.0, 0.3], dtype=D))
        layer.rel_q.copy_(torch.tensor([[[0.0, 0.0], [1.0, 2.0], [-0.5, 0.25], [3.0, -1.0]]], dtype=D))
        layer.rel_k.copy_(torch.tensor([[[0.0, 0.0], [0.2, 0.4], [1.5, -2.0], [-0.7, 0.1]]], dtype=D))
    return layer


def _grpe_by_hand(x, psi):
    Wq, bq = [[1.0, 2.0], [0.5, -1.0]], [0.1, -0.2]
    Wk, bk = [[-1.0, 0.0], [3.0, 1.0]], [0.0, 0.3]
    Eq = [[0.0, 0.0], [1.0, 2.0], [-0.5, 0.25], [3.0, -1.0]]
    Ek = [[0.0, 0.0], [0.2, 0.4], [1.5, -2.0], [-0.7, 0.1]]
    lin = lambda W, b, v: [W[r][0] * v[0] + W[r][1] * v[1] + b[r] for r in range(2)]
    dot = lambda a, b: a[0] * b[0] + a[1] * b[1]
    out = [[0.0, 0.0], [0.0, 0.0]]
    for i in range(2):
        for j in range(2):
            qi, kj = lin(Wq, bq, x[i]), lin(Wk, bk, x[j])
            c = psi[i][j]
            out[i][j] = (dot(qi, kj) + dot(qi, Eq[c]) + dot(kj, Ek[c])) / math.sqrt(2)
    return out


def test_grpe_logits_match_hand_computation():
    x = [[0.3, -1.2], [2.0, 0.7]]
    psi = [[1, 2], [3, 1]]
    with torch.no_grad():
        got = _grpe_layer().logits(torch.tensor([[x]], dtype=D), torch.tensor([psi]))[0, 0, 0]
    want = _grpe_by_hand(x, psi)
    for i in range(2):
        for j in range(2):
            assert abs(float(got[i, j]) - want[i][j]) <= 1e-12


def test_grpe_relation_changes_logits():
    layer = _grpe_layer()
    x = torch.tensor([[[[0.3, -1.2], [2.0, 0.7]]]], dtype=D)
    a = layer.logits(x, torch.tensor([[[1, 2], [3, 1]]]))
    b = layer.logits(x, torch.tensor([[[1, 0], [0, 1]]]))
    assert not torch.equal(a[..., 0, 1], b[..., 0, 1])
    assert torch.equal(a[..., 0, 0], b[..., 0, 0])


def test_grpe_rejects_bad_codes():
    with pytest.raises(ValueError):
        _grpe_layer().logits(torch.zeros(1, 1, 2, 2, dtype=D), torch.tensor([[[1, 4], [3, 1]]]))


def test_masked_softmax_rows():
    logits = torch.randn(2, 4, dtype=D)
    mask = torch.tensor([[True, False, True, False], [False] * 4])
    w = masked_softmax(logits, mask)
    assert (w[0, [1, 3]] == 0).all()
    assert float(w[0].sum()) == pytest.approx(1.0)
    assert (w[1] == 0).all()


@pytest.mark.parametrize("T,Tw", [(60, 31), (16, 7), (9, 1)])
def test_temporal_window_is_hard(T, Tw):
    torch.manual_seed(1)
    layer = TemporalAttention(8, 2, Tw).to(D)
    x = torch.randn(1, T, 3, 8, dtype=D) * 10
    _, w = layer(x, torch.ones(1, T, dtype=torch.bool), return_weights=True)
    dt = (torch.arange(T)[:, None] - torch.arange(T)[None, :]).abs()
    outside = dt > (Tw - 1) // 2
    assert (w[..., outside] == 0).all()
    assert (w[..., ~outside] > 0).all()
    assert window_mask(T, Tw).sum() == (~outside).sum()


def test_cross_attention_heads_split_evenly():
    torch.manual_seed(0)
    att = MultiConditionCrossAttention(12, 3, 6, 4).to(D)
    assert att.group_heads == 2
    q = torch.randn(2, 5, 12, dtype=D)
    conds = [Condition(str(i), torch.randn(2, 3 + i, 12, dtype=D)) for i in range(3)]
    assert att(q, conds).shape == (2, 5, 12)
    with pytest.raises(DenoiserConfigError):
        MultiConditionCrossAttention(12, 3, 4, 4)


def test_each_condition_only_reaches_its_heads():
    torch.manual_seed(0)
    att = MultiConditionCrossAttention(12, 3, 6, 4).to(D)
    q = torch.randn(1, 5, 12, dtype=D)
    conds = [Condition(str(i), torch.randn(1, 4, 12, dtype=D)) for i in range(3)]
    a = [att.group(c, q, conds[c]) for c in range(3)]
    conds[1] = Condition("1", torch.randn(1, 4, 12, dtype=D))
    b = [att.group(c, q, conds[c]) for c in range(3)]
    assert torch.equal(a[0], b[0]) and torch.equal(a[2], b[2]) and not torch.equal(a[1], b[1])


def test_config_validation():
    with pytest.raises(DenoiserConfigError):
        DenoiserConfig(latent=30, heads=4)
    with pytest.raises(DenoiserConfigError):
        DenoiserConfig(temporal_window=30)
    with pytest.raises(DenoiserConfigError):
        DenoiserConfig(latent=32, heads=4)  # 4 cross heads cannot split over 3 conditions
    cfg = DenoiserConfig()
    assert (cfg.latent, cfg.heads, cfg.head_dim, cfg.layers, cfg.ffn_dim, cfg.temporal_window) == \
        (240, 6, 40, 4, 1024, 31)
    assert cfg.dropout == 0.1


def _batch(cfg, J_src_graph=None, target=None, frames=10):
    src = J_src_graph or humanoid("h")
    dst = target or biped("b", scale=1.5)
    ref = walking_clip(src, frames, t_max=cfg.t_max, j_max=cfg.j_max)
    return collate([ConditionSet(ref, src, dst, build_joint_map(src, dst))], cfg)


@pytest.fixture
def model_cfg():
    return DenoiserConfig(latent=24, heads=4, layers=2, ffn_dim=48, dropout=0.0, temporal_window=5,
                          t_max=12, j_max=18, cross_heads=6)


def test_model_output_shape_and_masking(model_cfg):
    torch.manual_seed(0)
    model = GraphDenoiser(model_cfg, 50)
    batch = _batch(model_cfg)
    x = torch.randn(1, 12, 18, 9, dtype=D)
    out = model(x, torch.tensor([7]), batch)
    assert out.shape == (1, 12, 18, 9)
    assert (out[:, 10:] == 0).all()  # padded frames
    assert (out[:, :, 7:] == 0).all()  # padded joints of the 7-joint target
    assert (out[:, :, 1:, 7:] == 0).all()  # unused lanes


def test_reference_tokens_without_correspondence_are_invisible(model_cfg):
    torch.manual_seed(0)
    model = GraphDenoiser(model_cfg, 50).eval()
    batch = _batch(model_cfg)
    ref_tokens, ref_valid = model.encode_reference(batch)
    unmapped = ~batch.eta[0].any(1)  # reference joints paired with nothing
    assert unmapped[:16].any()
    noisy = torch.randn(1, 12, 18, 9, dtype=D)
    t = torch.tensor([3])
    a = model(noisy, t, batch, (ref_tokens, ref_valid))
    tok = ref_tokens.clone().view(1, 12, 18, -1)
    tok[:, :, unmapped] += torch.randn_like(tok[:, :, unmapped]) * 100
    b = model(noisy, t, batch, (tok.view(1, 12 * 18, -1), ref_valid))
    assert torch.equal(a, b)
    tok[:, :, ~unmapped] += 1.0
    c = model(noisy, t, batch, (tok.view(1, 12 * 18, -1), ref_valid))
    assert not torch.equal(a, c)


def test_padding_does_not_change_real_outputs(model_cfg):
    torch.manual_seed(0)
    model = GraphDenoiser(model_cfg, 50).eval()
    batch = _batch(model_cfg, frames=9)
    noisy = torch.randn(1, 12, 18, 9, dtype=D)
    t = torch.tensor([11])
    full = model(noisy, t, batch)
    junk = noisy.clone()
    junk[:, 9:] = 1e3
    junk[:, :, 7:] = -1e3
    assert (model(junk, t, batch) - full).abs().max() < 1e-5
    T, Jx, Jm = 9, 7, 16
    small = batch.__class__(
        ref_data=batch.ref_data[:, :T, :Jm], ref_frame_valid=batch.ref_frame_valid[:, :T],
        ref_joint_valid=batch.ref_joint_valid[:, :Jm], ref_psi=batch.ref_psi[:, :Jm, :Jm],
        ref_axes=batch.ref_axes[:, :Jm], ref_links=batch.ref_links[:, :Jm],
        frame_valid=batch.frame_valid[:, :T], joint_valid=batch.joint_valid[:, :Jx],
        psi=batch.psi[:, :Jx, :Jx], axes=batch.axes[:, :Jx], links=batch.links[:, :Jx],
        eta=batch.eta[:, :Jm, :Jx])
    cropped = model(noisy[:, :T, :Jx], t, small)
    assert (cropped - full[:, :T, :Jx]).abs().max() < 1e-5


def test_oversized_skeleton_rejected(model_cfg):
    from graph_retarget.synthetic import random_tree
    big = random_tree(np.random.default_rng(0), 20)
    with pytest.raises(DenoiserConfigError):
        _batch(model_cfg, target=big)


def test_batch_items_are_independent(model_cfg):
    torch.manual_seed(0)
    model = GraphDenoiser(model_cfg, 50).eval()
    h, b = humanoid("h"), biped("b")
    sets = [ConditionSet(walking_clip(h, 10, t_max=12, j_max=18), h, b, build_joint_map(h, b)),
            ConditionSet(walking_clip(b, 6, t_max=12, j_max=18), b, h, build_joint_map(b, h))]
    batch = collate(sets, model_cfg)
    x = torch.randn(2, 12, 18, 9, dtype=D)
    both = model(x, torch.tensor([4, 9]), batch)
    one = model(x[1:], torch.tensor([9]), collate(sets[1:], model_cfg))
    assert (both[1:] - one).abs().max() < 1e-12
