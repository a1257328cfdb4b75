"""Visual/audio/linguistic co-attention regressor for per-frame valence and arousal.

Three temporal branches (visual 2-D CNN then TCN, audio TCN, text TCN) each get
their own query/key/value encoder. The per-branch matrices are stacked along
the time axis, so with T frames the cross-modal Q, K and V are (3T, d_K) and
every (modality, frame) token scores against every other one. Attention is

    (softmax(Q K^T / sqrt(d_K)) + 1) V

i.e. ordinary attention plus the column sums of V added to every row. The
3T output rows are regrouped into T frames of three d_K blocks, layer-normalized
per token, concatenated with the visual temporal encoding and regressed by one
linear layer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as tc
from .errors import LengthMismatch, ShapeMismatch
from .nn import BranchConfig, LayerNorm, Linear, Module, TemporalConvNet, VisualBackbone
from .tensor import Tensor

BACKBONE_STAGES = tuple(f"backbone.{s}" for s in VisualBackbone.stage_names)
HEAD_GROUP = "head"


@dataclass(frozen=True)
class ModelConfig:
    audio_dim: int = 128
    text_dim: int = 768
    visual_dim: int = 64
    backbone_channels: tuple[int, int, int] = (8, 16, 32)
    crop_size: int = 40
    tcn_channels: tuple[int, ...] = (64, 64)
    kernel_size: int = 3
    dilations: tuple[int, ...] = (1, 2)
    dropout: float = 0.1
    d_k: int = 32
    heads: int = 1
    joint_head: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.d_k % self.heads:
            raise ValueError(f"d_k={self.d_k} is not divisible by heads={self.heads}")
        if len(self.backbone_channels) != 3:
            raise ValueError("the backbone has exactly three stages")

    def branch(self, input_dim: int) -> BranchConfig:
        return BranchConfig(input_dim, tuple(self.tcn_channels), self.kernel_size,
                            tuple(self.dilations), self.dropout)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})


class ModelOutput(NamedTuple):
    valence: Tensor
    arousal: Tensor


@dataclass
class AttentionBundle:
    """Per-branch projections; the cross-modal matrices stack them along time."""

    queries: list[Tensor]
    keys: list[Tensor]
    values: list[Tensor]
    d_k: int = field(init=False)

    def __post_init__(self):
        if not (len(self.queries) == len(self.keys) == len(self.values) == 3):
            raise ShapeMismatch("co-attention needs exactly three branches")
        shapes = {t.shape for t in (*self.queries, *self.keys, *self.values)}
        if len(shapes) != 1:
            raise ShapeMismatch(f"branch projections disagree in shape: {sorted(shapes)}")
        self.d_k = self.keys[0].shape[1]

    @property
    def Q(self) -> Tensor:
        return tc.concat(self.queries, axis=0)

    @property
    def K(self) -> Tensor:
        return tc.concat(self.keys, axis=0)

    @property
    def V(self) -> Tensor:
        return tc.concat(self.values, axis=0)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic softmax(Q K^T / sqrt(d)), d being the key width."""
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ShapeMismatch(f"query {q.shape} and key {k.shape} widths differ")
    scores = tc.matmul(q, tc.transpose(k))
    return tc.softmax_rows(tc.mul_scalar(scores, 1.0 / math.sqrt(k.shape[1])))


def standard_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    return tc.matmul(attention_weights(q, k), v)


def colsum_broadcast(v: Tensor) -> Tensor:
    """Column sums of V repeated on every row (the ``+1`` term times V)."""
    return tc.matmul(Tensor(np.ones((v.shape[0], v.shape[0]))), v)


def coattention_matrices(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    if k.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"keys {k.shape} and values {v.shape} differ in length")
    if heads == 1:
        return tc.matmul(tc.add_scalar(attention_weights(q, k), 1.0), v)
    width = q.shape[1]
    if width % heads or v.shape[1] % heads:
        raise ShapeMismatch(f"width {width} does not split into {heads} heads")
    hq, hv = width // heads, v.shape[1] // heads
    outs = []
    for h in range(heads):
        qh = tc.slice_axis(q, h * hq, (h + 1) * hq, axis=1)
        kh = tc.slice_axis(k, h * hq, (h + 1) * hq, axis=1)
        vh = tc.slice_axis(v, h * hv, (h + 1) * hv, axis=1)
        outs.append(tc.matmul(tc.add_scalar(attention_weights(qh, kh), 1.0), vh))
    return tc.concat(outs, axis=1)


def coattention(bundle: AttentionBundle, heads: int = 1) -> Tensor:
    """Cross-modal attention over all 3T tokens; returns (3T, d_K).

    With several heads, d_K is split evenly and each head is scaled by its own width.
    """
    return coattention_matrices(bundle.Q, bundle.K, bundle.V, heads)


class QKVEncoder(Module):
    """Three independent linear maps from a temporal encoding to query, key and value."""

    def __init__(self, in_dim: int, d_k: int, rng: np.random.Generator):
        super().__init__()
        self.query = Linear(in_dim, d_k, rng)
        self.key = Linear(in_dim, d_k, rng)
        self.value = Linear(in_dim, d_k, rng)

    def forward(self, enc: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return self.query(enc), self.key(enc), self.value(enc)


def branch_encode_qkv(enc: Tensor, encoder: QKVEncoder) -> tuple[Tensor, Tensor, Tensor]:
    return encoder(enc)


class CoAttentionRegressor(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.backbone = VisualBackbone(cfg.backbone_channels, cfg.visual_dim, cfg.crop_size, rng)
        self.visual_tcn = TemporalConvNet(cfg.branch(cfg.visual_dim), rng)
        self.audio_tcn = TemporalConvNet(cfg.branch(cfg.audio_dim), rng)
        self.text_tcn = TemporalConvNet(cfg.branch(cfg.text_dim), rng)
        enc_dim = cfg.tcn_channels[-1]
        self.visual_qkv = QKVEncoder(enc_dim, cfg.d_k, rng)
        self.audio_qkv = QKVEncoder(enc_dim, cfg.d_k, rng)
        self.text_qkv = QKVEncoder(enc_dim, cfg.d_k, rng)
        self.att_norm = LayerNorm(cfg.d_k)
        fused = 3 * cfg.d_k + enc_dim
        if cfg.joint_head:
            self.head = Linear(fused, 2, rng)
        else:
            self.valence_head = Linear(fused, 1, rng)
            self.arousal_head = Linear(fused, 1, rng)

    # -- parameter groups ------------------------------------------------------

    def parameter_group(self, name: str) -> str:
        for stage in BACKBONE_STAGES:
            if name.startswith(stage + "."):
                return stage
        return HEAD_GROUP

    def set_trainable(self, groups) -> None:
        """Only parameters in ``groups`` require gradients."""
        groups = set(groups)
        for name, p in self.named_parameters():
            p.requires_grad = self.parameter_group(name) in groups

    def trainable_names(self) -> list[str]:
        return [name for name, p in self.named_parameters() if p.requires_grad]

    # -- forward pieces --------------------------------------------------------

    def visual_backbone_forward(self, frames: Tensor) -> Tensor:
        return self.backbone(frames)

    def fusion_head(self, att: Tensor, visual_enc: Tensor) -> ModelOutput:
        steps = visual_enc.shape[0]
        if att.ndim != 2 or att.shape != (3 * steps, self.cfg.d_k):
            raise ShapeMismatch(f"attention output {att.shape} does not hold 3x{steps} tokens")
        normed = self.att_norm(att)
        per_frame = tc.concat([tc.slice_axis(normed, i * steps, (i + 1) * steps, axis=0)
                               for i in range(3)], axis=1)
        fused = tc.concat([per_frame, visual_enc], axis=1)
        if self.cfg.joint_head:
            out = self.head(fused)
            valence = tc.reshape(tc.slice_axis(out, 0, 1, axis=1), (steps,))
            arousal = tc.reshape(tc.slice_axis(out, 1, 2, axis=1), (steps,))
        else:
            valence = tc.reshape(self.valence_head(fused), (steps,))
            arousal = tc.reshape(self.arousal_head(fused), (steps,))
        return ModelOutput(valence, arousal)

    def forward(self, visual: Tensor, audio: Tensor, text: Tensor,
                rng: np.random.Generator | None = None) -> ModelOutput:
        lengths = (visual.shape[0], audio.shape[0], text.shape[0])
        if len(set(lengths)) != 1:
            raise LengthMismatch(f"modality lengths differ (visual, audio, text) = {lengths}")
        v_enc = self.visual_tcn(self.backbone(visual), rng)
        a_enc = self.audio_tcn(audio, rng)
        t_enc = self.text_tcn(text, rng)
        qkv = [enc(x) for enc, x in ((self.visual_qkv, v_enc), (self.audio_qkv, a_enc),
                                     (self.text_qkv, t_enc))]
        bundle = AttentionBundle([q for q, _, _ in qkv], [k for _, k, _ in qkv], [v for _, _, v in qkv])
        return self.fusion_head(coattention(bundle, self.cfg.heads), v_enc)


def model_forward(model: CoAttentionRegressor, visual: Tensor, audio: Tensor, text: Tensor,
                  rng: np.random.Generator | None = None) -> ModelOutput:
    return model(visual, audio, text, rng)
