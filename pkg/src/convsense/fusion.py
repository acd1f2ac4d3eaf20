"""Late fusion of the acoustic and inertial branches."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .models import (
    CNNAttention,
    ModelError,
    ModelSpec,
    ModelWeights,
    PureAcoustic,
    SCNNB,
    TrainLog,
    N_CLASSES,
)

STRATEGIES = ("concat", "cross_attention", "softmax_avg")
_IMU_MODULES = {"scnnb": SCNNB, "cnn_attention": CNNAttention}


@dataclass
class FusionSpec:
    strategy: str
    audio_branch: ModelSpec
    imu_branch: ModelSpec
    head: dict = field(default_factory=lambda: {"attn_dim": 32, "audio_steps": 10})
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ModelError(f"unknown fusion strategy {self.strategy!r}")
        if self.audio_branch.kind != "pure_acoustic":
            raise ModelError("audio branch must be pure_acoustic")
        if self.imu_branch.kind not in _IMU_MODULES:
            raise ModelError("IMU branch must be scnnb or cnn_attention")
        self.head = {"attn_dim": 32, "audio_steps": 10, **self.head}

    uses_audio = True
    uses_imu = True

    @property
    def kind(self) -> str:
        return f"{self.strategy}:{self.imu_branch.kind}"

    def to_dict(self) -> dict:
        return {
            "type": "fusion",
            "strategy": self.strategy,
            "audio_branch": self.audio_branch.to_dict(),
            "imu_branch": self.imu_branch.to_dict(),
            "head": copy.deepcopy(self.head),
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionSpec":
        return cls(
            d["strategy"],
            ModelSpec.from_dict(d["audio_branch"]),
            ModelSpec.from_dict(d["imu_branch"]),
            copy.deepcopy(d.get("head", {})),
            d.get("n_classes", N_CLASSES),
        )


def spec_from_dict(d: dict):
    return FusionSpec.from_dict(d) if d.get("type") == "fusion" else ModelSpec.from_dict(d)


# ---------------------------------------------------------------------------
# representation-level fusion


class ConcatFusion(nn.Module):
    def __init__(self, spec: FusionSpec):
        super().__init__()
        self.audio = PureAcoustic(spec.audio_branch, classify=False)
        self.imu = _IMU_MODULES[spec.imu_branch.kind](spec.imu_branch, classify=False)
        self.head = nn.Linear(self.audio.embedding_dim + self.imu.embedding_dim, spec.n_classes)

    def forward(self, audio=None, imu=None):
        ea, _ = self.audio(audio)
        ei, _ = self.imu(imu=imu)
        emb = torch.cat([ea, ei], dim=-1)
        return emb, self.head(emb)


def fuse_concat(audio_emb, imu_emb, head_w) -> np.ndarray:
    """Logits of a linear head over the concatenated embeddings.

    ``head_w`` is an ``nn.Linear`` or a ``(weight, bias)`` pair with weight of
    shape (3, len(audio_emb) + len(imu_emb)).
    """
    if isinstance(head_w, nn.Linear):
        weight = head_w.weight.detach().numpy()
        bias = head_w.bias.detach().numpy()
    else:
        weight, bias = (np.asarray(a, dtype=np.float64) for a in head_w)
    z = np.concatenate([np.asarray(audio_emb, dtype=np.float64), np.asarray(imu_emb, dtype=np.float64)], axis=-1)
    if z.shape[-1] != weight.shape[1]:
        raise ModelError(f"head expects input dim {weight.shape[1]}, got {z.shape[-1]}")
    return z @ weight.T + bias


class CrossAttention(nn.Module):
    """Single-head scaled dot-product attention of ``query`` over ``context``."""

    def __init__(self, dim: int):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)

    def forward(self, query, context):
        if query.shape[-2] == 0 or context.shape[-2] == 0:
            raise ModelError("cross-attention needs non-empty sequences")
        scores = self.q(query) @ self.k(context).transpose(-1, -2) / math.sqrt(query.shape[-1])
        weights = torch.softmax(scores, dim=-1)
        return weights @ self.v(context), weights


class CrossAttentionHead(nn.Module):
    """Audio queries attend over IMU frames and vice versa; pooled results feed a linear head."""

    def __init__(self, audio_dim: int, imu_dim: int, attn_dim: int, n_classes: int = N_CLASSES):
        super().__init__()
        self.audio_proj = nn.Linear(audio_dim, attn_dim)
        self.imu_proj = nn.Linear(imu_dim, attn_dim)
        self.audio_to_imu = CrossAttention(attn_dim)
        self.imu_to_audio = CrossAttention(attn_dim)
        self.head = nn.Linear(2 * attn_dim, n_classes)
        self.last_weights: tuple[torch.Tensor, torch.Tensor] | None = None

    def forward(self, audio_seq, imu_seq):
        a = self.audio_proj(audio_seq)
        i = self.imu_proj(imu_seq)
        za, wa = self.audio_to_imu(a, i)
        zi, wi = self.imu_to_audio(i, a)
        self.last_weights = (wa.detach(), wi.detach())
        emb = torch.cat([za.mean(dim=-2), zi.mean(dim=-2)], dim=-1)
        return emb, self.head(emb)


class CrossAttentionFusion(nn.Module):
    def __init__(self, spec: FusionSpec):
        super().__init__()
        self.audio = PureAcoustic(spec.audio_branch, classify=False)
        self.imu = _IMU_MODULES[spec.imu_branch.kind](spec.imu_branch, classify=False)
        self.audio_steps = spec.head["audio_steps"]
        self.fuser = CrossAttentionHead(
            self.audio.sequence_dim, self.imu.sequence_dim, spec.head["attn_dim"], spec.n_classes
        )

    def forward(self, audio=None, imu=None):
        seq, _ = self.audio.sequence(audio)
        steps = min(self.audio_steps, seq.shape[1])
        seq = F.adaptive_avg_pool1d(seq.transpose(1, 2), steps).transpose(1, 2)
        return self.fuser(seq, self.imu.sequence(imu))


def fuse_cross_attention(audio_emb_seq, imu_emb_seq, w: CrossAttentionHead):
    """Logits from (La, Da) audio and (Li, Di) IMU embedding sequences (or batches of them)."""
    a = torch.as_tensor(np.asarray(audio_emb_seq), dtype=w.head.weight.dtype)
    i = torch.as_tensor(np.asarray(imu_emb_seq), dtype=w.head.weight.dtype)
    with torch.no_grad():
        _, logits = w(a, i)
    return logits.numpy()


# ---------------------------------------------------------------------------
# score-level fusion


def fuse_softmax_avg(audio_probs, imu_probs, tol: float = 1e-6) -> np.ndarray:
    """Elementwise mean of two class-probability vectors."""
    pa = np.asarray(audio_probs, dtype=np.float64)
    pi = np.asarray(imu_probs, dtype=np.float64)
    for p in (pa, pi):
        if p.shape[-1] != N_CLASSES or (p < -tol).any() or (np.abs(p.sum(-1) - 1) > tol).any():
            raise ValueError(f"not a probability vector over {N_CLASSES} classes: {p}")
    return (pa + pi) / 2


class SoftmaxAverage(nn.Module):
    """Two independently trained classifiers; logits are log of the averaged probabilities."""

    def __init__(self, spec: FusionSpec):
        super().__init__()
        self.audio = PureAcoustic(spec.audio_branch)
        self.imu = _IMU_MODULES[spec.imu_branch.kind](spec.imu_branch)

    def forward(self, audio=None, imu=None):
        ea, la = self.audio(audio)
        ei, li = self.imu(imu=imu)
        p = (torch.softmax(la, -1) + torch.softmax(li, -1)) / 2
        return torch.cat([ea, ei], dim=-1), torch.log(p.clamp_min(1e-300))


def build_fusion(spec: FusionSpec) -> nn.Module:
    return {"concat": ConcatFusion, "cross_attention": CrossAttentionFusion,
            "softmax_avg": SoftmaxAverage}[spec.strategy](spec)


def assemble_softmax_avg(audio_w: ModelWeights, imu_w: ModelWeights) -> ModelWeights:
    """Combine two separately trained single-modality checkpoints."""
    spec = FusionSpec("softmax_avg", audio_w.spec, imu_w.spec)
    tensors = {f"audio.{k}": v for k, v in audio_w.tensors.items()}
    tensors.update({f"imu.{k}": v for k, v in imu_w.tensors.items()})
    trainable = tuple(f"audio.{n}" for n in audio_w.trainable) + tuple(
        f"imu.{n}" for n in imu_w.trainable
    )
    return ModelWeights(spec, tensors, trainable)


def train_softmax_avg(spec: FusionSpec, segs, cfg):
    from .models import train

    aw, alog = train(spec.audio_branch, segs, cfg)
    iw, ilog = train(spec.imu_branch, segs, cfg)
    merged = TrainLog(
        train_loss=alog.train_loss, holdout_loss=alog.holdout_loss, best_epoch=alog.best_epoch,
        holdout_groups=alog.holdout_groups,
    )
    return assemble_softmax_avg(aw, iw), merged

