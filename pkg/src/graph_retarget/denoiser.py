"""Graph-conditioned transformer denoiser.

Tokens live on a (T, J) grid per clip. Each decoder layer applies, with
pre-norm residuals: spatial self-attention biased by the relation matrix,
windowed temporal self-attention, multi-condition cross attention and a
feed-forward block. A second, timestep-free stack encodes the reference
motion; its output is one of the denoiser's cross-attention conditions,
restricted to same-frame corresponding joints.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .kinematics import DTYPE
from .motion import LANES, MotionClip, lane_mask
from .skeleton import JointMap, SkeletonGraph


class DenoiserConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    latent: int = 240
    heads: int = 6
    layers: int = 4
    ffn_dim: int = 1024
    dropout: float = 0.1
    temporal_window: int = 31
    t_max: int = 60
    j_max: int = 40
    cross_heads: int | None = None  # defaults to ``heads``

    def __post_init__(self):
        if self.latent % self.heads:
            raise DenoiserConfigError("latent must be divisible by heads")
        if self.temporal_window < 1 or self.temporal_window % 2 == 0:
            raise DenoiserConfigError("temporal_window must be a positive odd integer")
        if not 0.0 <= self.dropout < 1.0:
            raise DenoiserConfigError("dropout must lie in [0, 1)")
        for n_cond in (2, 3):
            if self.n_cross_heads % n_cond:
                raise DenoiserConfigError(
                    f"{self.n_cross_heads} cross-attention heads cannot be split over {n_cond} conditions")

    @property
    def head_dim(self) -> int:
        return self.latent // self.heads

    @property
    def n_cross_heads(self) -> int:
        return self.heads if self.cross_heads is None else self.cross_heads

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# attention primitives
# ---------------------------------------------------------------------------

def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Softmax over the last axis with masked keys at exactly zero weight.

    Rows without any admissible key get all-zero weights.
    """
    if mask is None:
        return torch.softmax(logits, -1)
    mask = mask.expand_as(logits)
    logits = logits.masked_fill(~mask, float("-inf"))
    empty = ~mask.any(-1, keepdim=True)
    logits = logits.masked_fill(empty, 0.0)
    w = torch.softmax(logits, -1)
    return w.masked_fill(~mask, 0.0)


def sinusoid(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer sinusoidal code of (real-valued) positions, shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / max(half, 1))
    ang = positions.to(DTYPE)[..., None] * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], -1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _heads(x: torch.Tensor, h: int) -> torch.Tensor:
    """(..., N, h*d) -> (..., h, N, d)"""
    *lead, n, hd = x.shape
    return x.view(*lead, n, h, hd // h).transpose(-3, -2)


def _merge(x: torch.Tensor) -> torch.Tensor:
    """(..., h, N, d) -> (..., N, h*d)"""
    x = x.transpose(-3, -2)
    return x.reshape(*x.shape[:-2], -1)


class SpatialAttention(nn.Module):
    """Self-attention across the joints of one frame with relation-type bias.

    For every head the logit between joints i and j is
    ``(q_i.k_j + q_i.Eq[psi_ij] + k_j.Ek[psi_ij]) / sqrt(d)``.
    """

    def __init__(self, latent: int, heads: int, dropout: float = 0.0, relations: int = 4):
        super().__init__()
        self.heads = heads
        self.head_dim = latent // heads
        self.q = nn.Linear(latent, latent)
        self.k = nn.Linear(latent, latent)
        self.v = nn.Linear(latent, latent)
        self.out = nn.Linear(latent, latent)
        self.rel_q = nn.Parameter(torch.randn(heads, relations, self.head_dim) * 0.02)
        self.rel_k = nn.Parameter(torch.randn(heads, relations, self.head_dim) * 0.02)
        self.drop = nn.Dropout(dropout)
        self.relations = relations

    def logits(self, x: torch.Tensor, psi: torch.Tensor) -> torch.Tensor:
        """x (B, T, J, H), psi (B, J, J) -> (B, T, heads, J, J)."""
        if psi.numel() and (psi.min() < 0 or psi.max() >= self.relations):
            raise ValueError(f"relation codes must lie in [0, {self.relations})")
        q = _heads(self.q(x), self.heads)
        k = _heads(self.k(x), self.heads)
        onehot = F.one_hot(psi.long(), self.relations).to(x.dtype)
        qk = q @ k.transpose(-1, -2)
        bias_q = torch.einsum("bthid,hcd,bijc->bthij", q, self.rel_q, onehot)
        bias_k = torch.einsum("bthjd,hcd,bijc->bthij", k, self.rel_k, onehot)
        return (qk + bias_q + bias_k) / math.sqrt(self.head_dim)

    def forward(self, x, psi, joint_valid, return_weights=False):
        logits = self.logits(x, psi)
        mask = joint_valid[:, None, None, None, :]
        w = masked_softmax(logits, mask)
        out = _merge(self.drop(w) @ _heads(self.v(x), self.heads))
        out = self.out(out)
        return (out, w) if return_weights else out


def window_mask(frames: int, window: int) -> torch.Tensor:
    """(T, T) boolean band: True where |t - t'| <= (window - 1) / 2."""
    idx = torch.arange(frames)
    return (idx[:, None] - idx[None, :]).abs() <= (window - 1) // 2


class TemporalAttention(nn.Module):
    """Self-attention across frames for each joint, limited to a band."""

    def __init__(self, latent: int, heads: int, window: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.head_dim = latent // heads
        self.window = window
        self.qkv = nn.Linear(latent, 3 * latent)
        self.out = nn.Linear(latent, latent)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, frame_valid, return_weights=False):
        # x (B, T, J, H) -> per joint sequences (B, J, T, H)
        B, T, J, H = x.shape
        seq = x.transpose(1, 2)
        q, k, v = (_heads(t, self.heads) for t in self.qkv(seq).chunk(3, -1))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        mask = window_mask(T, self.window)[None, None, None] & frame_valid[:, None, None, None, :]
        w = masked_softmax(logits, mask)
        out = self.out(_merge(self.drop(w) @ v)).transpose(1, 2)
        return (out, w) if return_weights else out


class Condition(NamedTuple):
    """Key/value tokens (B, N, H) for one condition.

    ``mask`` is (B, N) key validity or (B, Nq, N) query-key admissibility.
    With ``frames`` set, the mask is (B, T, Jq, Jk) and attention is taken
    per frame: query token (t, i) only sees key tokens (t, j), both laid out
    frame-major. This equals a full mask that is block-diagonal in time.
    """

    name: str
    tokens: torch.Tensor
    mask: torch.Tensor | None = None
    frames: int | None = None


class MultiConditionCrossAttention(nn.Module):
    """Cross attention whose heads are split evenly over several conditions,
    each head group with its own projections; outputs are concatenated and
    mixed by a single output projection."""

    def __init__(self, latent: int, conditions: int, heads: int, head_dim: int, dropout: float = 0.0):
        super().__init__()
        if heads % conditions:
            raise DenoiserConfigError(f"{heads} heads cannot be split over {conditions} conditions")
        self.conditions = conditions
        self.group_heads = heads // conditions
        self.head_dim = head_dim
        width = self.group_heads * head_dim
        self.q = nn.ModuleList(nn.Linear(latent, width) for _ in range(conditions))
        self.k = nn.ModuleList(nn.Linear(latent, width) for _ in range(conditions))
        self.v = nn.ModuleList(nn.Linear(latent, width) for _ in range(conditions))
        self.out = nn.Linear(heads * head_dim, latent)
        self.drop = nn.Dropout(dropout)

    def group(self, c: int, queries: torch.Tensor, cond: Condition, return_weights=False):
        """Output (B, Nq, group_heads*head_dim) of head group ``c``."""
        h = self.group_heads
        q = _heads(self.q[c](queries), h)
        k = _heads(self.k[c](cond.tokens), h)
        v = _heads(self.v[c](cond.tokens), h)
        scale = 1.0 / math.sqrt(self.head_dim)
        if cond.frames is not None:
            B, T = queries.shape[0], cond.frames
            q = q.reshape(B, h, T, -1, self.head_dim).transpose(1, 2)  # (B, T, h, Jq, d)
            k = k.reshape(B, h, T, -1, self.head_dim).transpose(1, 2)
            v = v.reshape(B, h, T, -1, self.head_dim).transpose(1, 2)
            w = masked_softmax(q @ k.transpose(-1, -2) * scale, cond.mask[:, :, None])
            out = (self.drop(w) @ v).transpose(1, 2).reshape(B, h, -1, self.head_dim)
        else:
            mask = cond.mask
            if mask is not None:
                mask = mask[:, None, None, :] if mask.dim() == 2 else mask[:, None]
            w = masked_softmax(q @ k.transpose(-1, -2) * scale, mask)
            out = self.drop(w) @ v
        out = _merge(out)
        return (out, w) if return_weights else out

    def forward(self, queries: torch.Tensor, conditions: Sequence[Condition]) -> torch.Tensor:
        if len(conditions) != self.conditions:
            raise DenoiserConfigError(f"expected {self.conditions} conditions, got {len(conditions)}")
        parts = [self.group(c, queries, cond) for c, cond in enumerate(conditions)]
        return self.out(torch.cat(parts, -1))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: DenoiserConfig, conditions: int):
        super().__init__()
        H = cfg.latent
        self.norms = nn.ModuleList(nn.LayerNorm(H) for _ in range(4))
        self.spatial = SpatialAttention(H, cfg.heads, cfg.dropout)
        self.temporal = TemporalAttention(H, cfg.heads, cfg.temporal_window, cfg.dropout)
        self.cross = MultiConditionCrossAttention(H, conditions, cfg.n_cross_heads, cfg.head_dim, cfg.dropout)
        self.ffn = nn.Sequential(nn.Linear(H, cfg.ffn_dim), nn.GELU(), nn.Dropout(cfg.dropout),
                                 nn.Linear(cfg.ffn_dim, H))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, psi, frame_valid, joint_valid, conditions):
        B, T, J, H = x.shape
        token_valid = (frame_valid[:, :, None] & joint_valid[:, None, :])[..., None]
        x = x + self.drop(self.spatial(self.norms[0](x), psi, joint_valid))
        x = x + self.drop(self.temporal(self.norms[1](x), frame_valid))
        flat = self.norms[2](x).reshape(B, T * J, H)
        x = x + self.drop(self.cross(flat, conditions).reshape(B, T, J, H))
        x = x + self.drop(self.ffn(self.norms[3](x)))
        return x * token_valid


class Tokenizer(nn.Module):
    """Separate linear encoders for the base and the other joints, plus a
    sinusoidal code of the flattened (frame, joint) index."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.base = nn.Linear(LANES, cfg.latent)
        self.joint = nn.Linear(LANES, cfg.latent)

    def forward(self, data, frame_valid, joint_valid, temb=None):
        B, T, J, _ = data.shape
        if T > self.cfg.t_max or J > self.cfg.j_max:
            raise DenoiserConfigError(f"clip ({T}, {J}) exceeds model maxima ({self.cfg.t_max}, {self.cfg.j_max})")
        is_base = (torch.arange(J) == 0)[None, None, :, None]
        tok = torch.where(is_base, self.base(data), self.joint(data))
        valid = (frame_valid[:, :, None] & joint_valid[:, None, :])[..., None]
        tok = tok * valid
        index = torch.arange(T)[:, None] * self.cfg.j_max + torch.arange(J)[None, :]
        tok = tok + sinusoid(index, self.cfg.latent)
        if temb is not None:
            tok = tok + temb[:, None, None, :]
        return tok


class GraphEmbedding(nn.Module):
    """Per-joint embeddings of axes and link vectors, tagged with the joint index."""

    def __init__(self, latent: int):
        super().__init__()
        self.axes = nn.Linear(3, latent)
        self.links = nn.Linear(3, latent)
        self.latent = latent

    def forward(self, axes, links):
        code = sinusoid(torch.arange(axes.shape[1]), self.latent)
        return self.axes(axes) + code, self.links(links) + code


class ReferenceEncoder(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.tokenizer = Tokenizer(cfg)
        self.graph = GraphEmbedding(cfg.latent)
        self.layers = nn.ModuleList(DecoderLayer(cfg, conditions=2) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.latent)

    def forward(self, data, frame_valid, joint_valid, psi, axes, links):
        """Returns flattened tokens (B, T*J, H) and their validity (B, T*J)."""
        x = self.tokenizer(data, frame_valid, joint_valid)
        ax, ln = self.graph(axes, links)
        conds = [Condition("axes", ax, joint_valid), Condition("links", ln, joint_valid)]
        for layer in self.layers:
            x = layer(x, psi, frame_valid, joint_valid, conds)
        B, T, J, H = x.shape
        valid = frame_valid[:, :, None] & joint_valid[:, None, :]
        out = self.norm(x) * valid[..., None]
        return out.reshape(B, T * J, H), valid.reshape(B, T * J)


class GraphDenoiser(nn.Module):
    """x0-predicting denoiser conditioned on a reference motion, both
    skeleton graphs and their joint correspondence."""

    def __init__(self, cfg: DenoiserConfig, diffusion_steps: int = 1000):
        super().__init__()
        self.cfg = cfg
        self.diffusion_steps = diffusion_steps
        H = cfg.latent
        self.tokenizer = Tokenizer(cfg)
        self.time_mlp = nn.Sequential(nn.Linear(H, H), nn.SiLU(), nn.Linear(H, H))
        self.graph = GraphEmbedding(H)
        self.reference = ReferenceEncoder(cfg)
        self.layers = nn.ModuleList(DecoderLayer(cfg, conditions=3) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(H)
        self.decoder = nn.Linear(H, LANES)
        self.to(DTYPE)

    def timestep_embedding(self, t_index: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(sinusoid(t_index, self.cfg.latent))

    def encode_reference(self, batch: "ConditionBatch"):
        return self.reference(batch.ref_data, batch.ref_frame_valid, batch.ref_joint_valid,
                              batch.ref_psi, batch.ref_axes, batch.ref_links)

    def forward(self, noisy, t_index, batch: "ConditionBatch", reference=None):
        """noisy (B, T, J, 9) normalised tokens on the target layout.

        ``reference`` optionally supplies precomputed ``encode_reference`` output.
        """
        fv, jv = batch.frame_valid, batch.joint_valid
        x = self.tokenizer(noisy, fv, jv, self.timestep_embedding(t_index))
        ref_tokens, ref_valid = self.encode_reference(batch) if reference is None else reference
        ax, ln = self.graph(batch.axes, batch.links)
        T = noisy.shape[1]
        # same-frame correspondence; keys must also be valid reference tokens
        Jm = batch.ref_data.shape[2]
        ref_mask = batch.eta.transpose(1, 2)[:, None] & ref_valid.view(-1, T, Jm)[:, :, None, :]
        conds = [
            Condition("axes", ax, jv),
            Condition("links", ln, jv),
            Condition("reference", ref_tokens, ref_mask.reshape(-1, T, noisy.shape[2], Jm), frames=T),
        ]
        for layer in self.layers:
            x = layer(x, batch.psi, fv, jv, conds)
        out = self.decoder(self.norm(x))
        lanes = torch.tensor(lane_mask(noisy.shape[2]))
        valid = (fv[:, :, None] & jv[:, None, :])[..., None] & lanes
        return out * valid


# ---------------------------------------------------------------------------
# conditions and batching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionSet:
    """Reference clip, its skeleton, the target skeleton and their joint map
    (source = reference skeleton, target = desired skeleton)."""

    reference: MotionClip
    source_graph: SkeletonGraph
    target_graph: SkeletonGraph
    joint_map: JointMap


@dataclass
class ConditionBatch:
    """Padded tensors for a batch of condition sets (all on the model grid).

    ``eta`` is (B, Jm, Jx) boolean; frame masks are shared by reference and
    prediction since both cover the same frames.
    """

    ref_data: torch.Tensor
    ref_frame_valid: torch.Tensor
    ref_joint_valid: torch.Tensor
    ref_psi: torch.Tensor
    ref_axes: torch.Tensor
    ref_links: torch.Tensor
    frame_valid: torch.Tensor
    joint_valid: torch.Tensor
    psi: torch.Tensor
    axes: torch.Tensor
    links: torch.Tensor
    eta: torch.Tensor

    def select(self, idx) -> "ConditionBatch":
        return ConditionBatch(**{k: v[idx] for k, v in self.__dict__.items()})


def _graph_tensors(g: SkeletonGraph, j_max: int):
    J = g.joint_count
    if J > j_max:
        raise DenoiserConfigError(f"skeleton {g.name!r} has {J} joints > j_max={j_max}")
    psi = np.zeros((j_max, j_max), dtype=np.int64)
    psi[:J, :J] = g.relation_matrix
    axes = np.zeros((j_max, 3))
    axes[:J] = g.axes
    links = np.zeros((j_max, 3))
    links[:J] = g.link_vectors
    return psi, axes, links, np.arange(j_max) < J


def collate(conditions: Sequence[ConditionSet], cfg: DenoiserConfig, normalizer=None) -> ConditionBatch:
    """Pad condition sets to (t_max, j_max) and stack them."""
    cols: dict[str, list] = {k: [] for k in ConditionBatch.__dataclass_fields__}
    for c in conditions:
        ref = c.reference.padded(cfg.t_max, cfg.j_max)
        rpsi, rax, rln, rjv = _graph_tensors(c.source_graph, cfg.j_max)
        psi, ax, ln, jv = _graph_tensors(c.target_graph, cfg.j_max)
        rjv = rjv & ref.joint_valid
        data = ref.data if normalizer is None else normalizer.normalize(ref.data, ref.frame_valid, ref.joint_valid)
        eta = np.zeros((cfg.j_max, cfg.j_max), dtype=bool)
        for a, b in c.joint_map.pairs():
            eta[a, b] = True
        for key, val in (("ref_data", data), ("ref_frame_valid", ref.frame_valid),
                         ("ref_joint_valid", rjv), ("ref_psi", rpsi), ("ref_axes", rax),
                         ("ref_links", rln), ("frame_valid", ref.frame_valid), ("joint_valid", jv),
                         ("psi", psi), ("axes", ax), ("links", ln), ("eta", eta)):
            cols[key].append(np.asarray(val))
    out = {}
    for k, v in cols.items():
        arr = np.stack(v)
        out[k] = torch.tensor(arr, dtype=DTYPE) if arr.dtype == np.float64 else torch.tensor(arr)
    return ConditionBatch(**out)
