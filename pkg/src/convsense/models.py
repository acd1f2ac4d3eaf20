"""Acoustic and inertial classifiers, weight containers and the training loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .seeding import int_seed, rng

log = logging.getLogger(__name__)

N_CLASSES = 3
KINDS = ("pure_acoustic", "scnnb", "cnn_attention")

REFERENCE_PARAMS = {
    "pure_acoustic": {
        "n_bands": 128, "conv_channels": 64, "kernel": 3, "proj_dim": 128,
        "hidden": 300, "fc_dims": [256, 128],
    },
    "scnnb": {"conv_channels": [8, 16], "kernel": 3, "pool_len": 8, "hidden": 32, "steps": 5},
    "cnn_attention": {"channels": 16, "kernels": [5, 3], "hidden": 12, "steps": 5},
}

COMPACT_PARAMS = {
    "pure_acoustic": {
        "n_bands": 128, "conv_channels": 32, "kernel": 3, "proj_dim": 32,
        "hidden": 64, "fc_dims": [64, 32],
    },
    "scnnb": REFERENCE_PARAMS["scnnb"],
    "cnn_attention": REFERENCE_PARAMS["cnn_attention"],
}


class ModelError(ValueError):
    pass


@dataclass
class ModelSpec:
    kind: str
    params: dict = field(default_factory=dict)
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        self.params = {**copy.deepcopy(REFERENCE_PARAMS[self.kind]), **self.params}
        for k, v in self.params.items():
            vals = v if isinstance(v, (list, tuple)) else [v]
            if any(int(x) <= 0 for x in vals):
                raise ModelError(f"{self.kind}.{k} must be positive, got {v}")

    @classmethod
    def reference(cls, kind: str) -> "ModelSpec":
        return cls(kind, copy.deepcopy(REFERENCE_PARAMS[kind]))

    @classmethod
    def compact(cls, kind: str) -> "ModelSpec":
        return cls(kind, copy.deepcopy(COMPACT_PARAMS[kind]))

    def to_dict(self) -> dict:
        return {"type": "model", "kind": self.kind, "params": copy.deepcopy(self.params),
                "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["kind"], copy.deepcopy(d["params"]), d.get("n_classes", N_CLASSES))

    @property
    def uses_audio(self) -> bool:
        return self.kind == "pure_acoustic"

    @property
    def uses_imu(self) -> bool:
        return self.kind != "pure_acoustic"


# ---------------------------------------------------------------------------
# building blocks


class ChannelSelfAttention(nn.Module):
    """Single-head scaled dot-product attention across the sensor-channel axis.

    Input (B, W, C, D): at every time step the C channel tokens attend to each
    other. Output has the same shape (residual connection).
    """

    def __init__(self, dim: int):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.last_weights: torch.Tensor | None = None

    def forward(self, x):
        scores = self.q(x) @ self.k(x).transpose(-1, -2) / math.sqrt(x.shape[-1])
        attn = torch.softmax(scores, dim=-1)
        self.last_weights = attn.detach()
        return x + attn @ self.v(x)


class ImuInput(nn.Module):
    """Log-compress energies and standardize each sensor channel with fixed statistics.

    The statistics are buffers, set from training data by ``fit_input_stats``;
    they are not trained. Output is the (B, 1, 6, F*S) image with frames
    concatenated in time order.
    """

    def __init__(self):
        super().__init__()
        self.register_buffer("mean", torch.zeros(6))
        self.register_buffer("std", torch.ones(6))

    def forward(self, imu):
        if imu is None or imu.ndim != 4 or imu.shape[2] != 6:
            shape = None if imu is None else tuple(imu.shape)
            raise ModelError(f"expected (B, F, 6, S) IMU energy tensors, got {shape}")
        b, f, c, s = imu.shape
        x = (torch.log1p(imu.clamp_min(0)) - self.mean[:, None]) / self.std[:, None]
        return x.permute(0, 2, 1, 3).reshape(b, 1, c, f * s)


def fit_input_stats(model: nn.Module, imu: np.ndarray) -> None:
    """Set every ImuInput in ``model`` from a (N, F, 6, S) training array."""
    logs = np.log1p(np.clip(np.asarray(imu, dtype=np.float64), 0, None))
    mean = logs.mean(axis=(0, 1, 3))
    std = logs.std(axis=(0, 1, 3))
    std[std < 1e-6] = 1.0
    for m in model.modules():
        if isinstance(m, ImuInput):
            m.mean.copy_(torch.as_tensor(mean, dtype=m.mean.dtype))
            m.std.copy_(torch.as_tensor(std, dtype=m.std.dtype))


class PureAcoustic(nn.Module):
    """Foreground-speech CNN + raw-spectrogram projection feeding an LSTM, then 3 FC layers."""

    def __init__(self, spec: ModelSpec, classify: bool = True):
        super().__init__()
        p = spec.params
        nb, c, k = p["n_bands"], p["conv_channels"], p["kernel"]
        self.n_bands = nb
        self.conv1 = nn.Conv1d(nb, c, k, padding=k // 2)
        self.conv2 = nn.Conv1d(c, c, k, padding=k // 2)
        self.proj = nn.Linear(nb, p["proj_dim"])
        self.lstm = nn.LSTM(c + p["proj_dim"], p["hidden"], batch_first=True)
        f1, f2 = p["fc_dims"]
        self.fc1 = nn.Linear(p["hidden"], f1)
        self.fc2 = nn.Linear(f1, f2)
        self.out = nn.Linear(f2, spec.n_classes) if classify else None
        self.embedding_dim = f2
        self.sequence_dim = p["hidden"]

    def sequence(self, audio):
        if audio.ndim != 3 or audio.shape[1] != self.n_bands:
            raise ModelError(f"expected (B, {self.n_bands}, T) spectrograms, got {tuple(audio.shape)}")
        fg = F.relu(self.conv2(F.relu(self.conv1(audio)))).transpose(1, 2)
        raw = F.relu(self.proj(audio.transpose(1, 2)))
        seq, (h, _) = self.lstm(torch.cat([fg, raw], dim=-1))
        return seq, h[-1]

    def forward(self, audio=None, imu=None):
        _, last = self.sequence(audio)
        emb = F.relu(self.fc2(F.relu(self.fc1(last))))
        logits = self.out(emb) if self.out is not None else None
        return emb, logits


class SCNNB(nn.Module):
    """Two conv + batch-norm blocks with pooling, one hidden dense layer."""

    def __init__(self, spec: ModelSpec, classify: bool = True):
        super().__init__()
        p = spec.params
        c1, c2 = p["conv_channels"]
        k = p["kernel"]
        self.steps = p["steps"]
        self.input = ImuInput()
        self.conv1 = nn.Conv2d(1, c1, k, padding=k // 2, bias=False)
        self.bn1 = nn.BatchNorm2d(c1)
        self.conv2 = nn.Conv2d(c1, c2, k, padding=k // 2, bias=False)
        self.bn2 = nn.BatchNorm2d(c2)
        self.pool_len = p["pool_len"]
        # height 6 -> 3 -> 1 after two 2x2 max pools
        self.dense = nn.Linear(c2 * self.pool_len, p["hidden"])
        self.out = nn.Linear(p["hidden"], spec.n_classes) if classify else None
        self.embedding_dim = p["hidden"]
        self.sequence_dim = c2

    def feature_maps(self, imu):
        x = self.input(imu)
        x = F.max_pool2d(F.relu(self.bn1(self.conv1(x))), 2)
        x = F.max_pool2d(F.relu(self.bn2(self.conv2(x))), 2)
        return x  # (B, c2, 1, W)

    def sequence(self, imu):
        x = self.feature_maps(imu)
        seq = F.adaptive_avg_pool1d(x.mean(dim=2), imu.shape[1])
        return seq.transpose(1, 2)  # (B, F, c2)

    def forward(self, audio=None, imu=None):
        x = self.feature_maps(imu)
        x = F.adaptive_avg_pool1d(x.flatten(1, 2), self.pool_len).flatten(1)
        emb = F.relu(self.dense(x))
        logits = self.out(emb) if self.out is not None else None
        return emb, logits


class CNNAttention(nn.Module):
    """Per-channel temporal convolutions, self-attention across sensor channels,
    mean pooling over time, one dense layer."""

    def __init__(self, spec: ModelSpec, classify: bool = True):
        super().__init__()
        p = spec.params
        c = p["channels"]
        k1, k2 = p["kernels"]
        self.steps = p["steps"]
        self.input = ImuInput()
        self.conv1 = nn.Conv2d(1, c, (1, k1), padding=(0, k1 // 2))
        self.conv2 = nn.Conv2d(c, c, (1, k2), padding=(0, k2 // 2))
        self.attention = ChannelSelfAttention(c)
        self.dense = nn.Linear(6 * c, p["hidden"])
        self.out = nn.Linear(p["hidden"], spec.n_classes) if classify else None
        self.embedding_dim = p["hidden"]
        self.sequence_dim = 6 * c

    def attended(self, imu):
        x = self.input(imu)
        x = F.relu(self.conv2(F.relu(self.conv1(x))))  # (B, C, 6, W)
        return self.attention(x.permute(0, 3, 2, 1))  # (B, W, 6, C)

    def sequence(self, imu):
        a = self.attended(imu)
        b, w, c, d = a.shape
        f = imu.shape[1]
        return a.reshape(b, f, w // f, c * d).mean(dim=2)  # (B, F, 6C)

    def forward(self, audio=None, imu=None):
        emb = F.relu(self.dense(self.attended(imu).mean(dim=1).flatten(1)))
        logits = self.out(emb) if self.out is not None else None
        return emb, logits


_MODULES = {"pure_acoustic": PureAcoustic, "scnnb": SCNNB, "cnn_attention": CNNAttention}


def init_weights(module: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform weights, zero biases, unit batch-norm scales."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if isinstance(_owner(module, name), nn.BatchNorm2d):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif p.ndim >= 2:
                fan_in = p[0].numel()
                bound = math.sqrt(3.0 / fan_in)
                p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)
            else:
                p.zero_()
                if leaf == "bias_hh_l0":
                    h = p.numel() // 4
                    p[h : 2 * h] = 1.0  # forget gate


def _owner(module: nn.Module, param_name: str) -> nn.Module:
    return module.get_submodule(param_name.rsplit(".", 1)[0]) if "." in param_name else module


def build_model(spec, seed: int = 0, dtype=torch.float64) -> nn.Module:
    """Instantiate (and seed-initialize) the network for a ModelSpec or FusionSpec."""
    from .fusion import FusionSpec, build_fusion

    if isinstance(spec, FusionSpec):
        m = build_fusion(spec)
    else:
        m = _MODULES[spec.kind](spec)
    m = m.to(dtype)
    init_weights(m, seed)
    return m


# ---------------------------------------------------------------------------
# weights


@dataclass(frozen=True)
class QuantRecord:
    scale: float
    zero_point: int
    bit_width: int = 8


@dataclass
class ModelWeights:
    """Named tensors for one network, with optional prune masks and quantization records."""

    spec: Any  # ModelSpec | FusionSpec | None
    tensors: dict[str, np.ndarray]
    trainable: tuple[str, ...]
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    quant: dict[str, QuantRecord] = field(default_factory=dict)

    @classmethod
    def from_module(cls, spec, module: nn.Module, masks=None, quant=None) -> "ModelWeights":
        state = {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
        trainable = tuple(n for n, p in module.named_parameters() if p.requires_grad)
        return cls(spec, state, trainable, dict(masks or {}), dict(quant or {}))

    def to_module(self, dtype=torch.float64) -> nn.Module:
        m = build_model(self.spec, 0, dtype)
        state = {k: torch.as_tensor(np.asarray(v)) for k, v in self.tensors.items()}
        m.load_state_dict({k: v.to(dtype) if v.is_floating_point() else v for k, v in state.items()})
        m.eval()
        return m

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            self.spec,
            {k: v.copy() for k, v in self.tensors.items()},
            self.trainable,
            {k: v.copy() for k, v in self.masks.items()},
            dict(self.quant),
        )


def param_count(w: ModelWeights | nn.Module) -> int:
    """Number of trainable entries (masked entries included)."""
    if isinstance(w, nn.Module):
        return sum(p.numel() for p in w.parameters() if p.requires_grad)
    return int(sum(w.tensors[n].size for n in w.trainable))


def _as_module(w, dtype=torch.float64) -> nn.Module:
    return w if isinstance(w, nn.Module) else w.to_module(dtype)


def _forward_numpy(w, audio=None, imu=None, dtype=torch.float64):
    m = _as_module(w, dtype)
    a = None if audio is None else torch.as_tensor(np.asarray(audio), dtype=dtype)
    i = None if imu is None else torch.as_tensor(np.asarray(imu), dtype=dtype)
    if a is not None and a.ndim == 2:
        a = a[None]
    if i is not None and i.ndim == 3:
        i = i[None]
    with torch.no_grad():
        emb, logits = m(a, i)
    return emb.numpy(), logits.numpy()


def acoustic_forward(spec_input, w, dtype=torch.float64):
    """(embedding, logits) of the acoustic network for one (128, T) or batch (B, 128, T) input."""
    return _forward_numpy(w, audio=spec_input, dtype=dtype)


def scnnb_forward(x, w, dtype=torch.float64):
    """(embedding, logits) of SCNNB for energy tensors (F, 6, S) or (B, F, 6, S)."""
    return _forward_numpy(w, imu=x, dtype=dtype)


def cnn_attention_forward(x, w, dtype=torch.float64):
    """(embedding, logits) of CNN+Attention for energy tensors (F, 6, S) or (B, F, 6, S)."""
    return _forward_numpy(w, imu=x, dtype=dtype)


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def gradients(model: nn.Module, audio, imu, labels) -> dict[str, np.ndarray]:
    """Gradient of mean cross-entropy w.r.t. every trainable tensor."""
    model.zero_grad(set_to_none=True)
    dtype = next(model.parameters()).dtype
    a = None if audio is None else torch.as_tensor(audio, dtype=dtype)
    i = None if imu is None else torch.as_tensor(imu, dtype=dtype)
    _, logits = model(a, i)
    loss = F.cross_entropy(logits, torch.as_tensor(labels, dtype=torch.long))
    loss.backward()
    return {
        n: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(p.shape))
        for n, p in model.named_parameters()
    }


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 40
    batch_size: int = 16
    seed: int = 0
    early_stop_patience: int = 6
    holdout_fraction: float = 0.1
    dtype: str = "float64"

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("learning_rate and epochs must be >= 0, batch_size > 0")
        if self.early_stop_patience <= 0 or not 0 <= self.holdout_fraction < 1:
            raise ValueError("early_stop_patience must be > 0, holdout_fraction in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    holdout_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    holdout_groups: list[str] = field(default_factory=list)
    stopped_early: bool = False


def _tensors(segs, idx, dtype, spec):
    a = torch.as_tensor(segs.audio[idx], dtype=dtype) if spec.uses_audio else None
    i = torch.as_tensor(segs.imu[idx], dtype=dtype) if spec.uses_imu else None
    y = torch.as_tensor(segs.labels[idx], dtype=torch.long)
    return a, i, y


def choose_holdout(segs, fraction: float, seed: int) -> np.ndarray:
    """Boolean mask of holdout segments: whole groups when there are enough of them."""
    n = len(segs)
    mask = np.zeros(n, dtype=bool)
    if fraction <= 0 or n < 4:
        return mask
    g = rng(seed, "holdout")
    groups = segs.group_ids
    all_classes = set(np.unique(segs.labels).tolist())
    if len(groups) >= 3:
        k = max(1, int(round(fraction * len(groups))))
        for _ in range(20):
            pick = g.choice(len(groups), size=k, replace=False)
            m = np.isin(segs.groups, [groups[j] for j in pick])
            if set(np.unique(segs.labels[~m]).tolist()) == all_classes:
                return m
        return mask
    k = max(1, int(round(fraction * n)))
    for _ in range(20):
        m = np.zeros(n, dtype=bool)
        m[g.choice(n, size=k, replace=False)] = True
        if set(np.unique(segs.labels[~m]).tolist()) == all_classes:
            return m
    return mask


def train(spec, segs, cfg: TrainConfig = TrainConfig(), module: nn.Module | None = None,
          masks: dict[str, np.ndarray] | None = None, weight_transform=None):
    """Fit ``spec`` on a SegmentSet with plain gradient descent on cross-entropy.

    Returns (ModelWeights, TrainLog). Deterministic given ``cfg.seed``.
    ``module`` resumes from existing weights; ``masks`` pins entries to zero;
    ``weight_transform(name, tensor)`` is applied to weights inside the forward
    pass (straight-through), which is how quantization-aware fine-tuning hooks in.
    """
    from .fusion import FusionSpec

    if isinstance(spec, FusionSpec) and spec.strategy == "softmax_avg":
        from .fusion import train_softmax_avg

        return train_softmax_avg(spec, segs, cfg)

    present = set(np.unique(segs.labels).tolist())
    missing = [c for c in range(N_CLASSES) if c not in present]
    if missing:
        raise ModelError(f"classes {missing} absent from training data")

    dtype = cfg.torch_dtype
    if module is None:
        model = build_model(spec, int_seed(cfg.seed, "init"), dtype)
        fit_input_stats(model, segs.imu)
    else:
        model = module.to(dtype)
    mask_t = {k: torch.as_tensor(v, dtype=dtype) for k, v in (masks or {}).items()}
    params = dict(model.named_parameters())
    with torch.no_grad():
        for k, m in mask_t.items():
            params[k].mul_(m)

    hold = choose_holdout(segs, cfg.holdout_fraction, cfg.seed)
    tr_idx, ho_idx = np.flatnonzero(~hold), np.flatnonzero(hold)
    tlog = TrainLog(holdout_groups=sorted(set(segs.groups[ho_idx].tolist())))
    order_rng = rng(cfg.seed, "batching")

    def forward(a, i):
        if weight_transform is None:
            return model(a, i)
        fq = {}
        for n, p in params.items():
            q = weight_transform(n, p)
            fq[n] = p if q is None else p + (q - p).detach()
        return torch.func.functional_call(model, fq, (a, i))

    def holdout_loss():
        model.eval()
        with torch.no_grad():
            a, i, y = _tensors(segs, ho_idx, dtype, spec)
            loss = F.cross_entropy(forward(a, i)[1], y).item()
        return loss

    trainable = [p for p in params.values() if p.requires_grad]
    opt = torch.optim.SGD(trainable, lr=cfg.learning_rate)
    best = (math.inf, copy.deepcopy(model.state_dict()), -1)
    stale = 0
    for epoch in range(cfg.epochs):
        model.train()
        perm = order_rng.permutation(tr_idx)
        losses = []
        for s in range(0, len(perm), cfg.batch_size):
            batch = perm[s : s + cfg.batch_size]
            if len(batch) < 2 and len(perm) > 1:
                continue  # batch-norm needs two samples
            a, i, y = _tensors(segs, batch, dtype, spec)
            model.zero_grad(set_to_none=True)
            loss = F.cross_entropy(forward(a, i)[1], y)
            loss.backward()
            with torch.no_grad():
                for n, m in mask_t.items():
                    if params[n].grad is not None:
                        params[n].grad.mul_(m)
            opt.step()
            with torch.no_grad():
                for n, m in mask_t.items():
                    params[n].mul_(m)
            losses.append(loss.item() * len(batch))
        tlog.train_loss.append(float(np.sum(losses) / max(1, len(perm))))
        if len(ho_idx):
            hl = holdout_loss()
            tlog.holdout_loss.append(hl)
            if hl < best[0] - 1e-9:
                best, stale = (hl, copy.deepcopy(model.state_dict()), epoch), 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    tlog.stopped_early = True
                    break
        log.debug("epoch %d loss %.4f", epoch, tlog.train_loss[-1])

    if len(ho_idx) and best[2] >= 0:
        model.load_state_dict(best[1])
        tlog.best_epoch = best[2]
    else:
        tlog.best_epoch = len(tlog.train_loss) - 1
    model.eval()
    return ModelWeights.from_module(spec, model, masks=masks), tlog


def predict_proba(w, segs, batch_size: int = 64, dtype=torch.float64) -> np.ndarray:
    """Class probabilities (N, 3) for every segment, in inference mode."""
    m = _as_module(w, dtype)
    m.eval()
    spec = w.spec if isinstance(w, ModelWeights) else getattr(m, "spec", None)
    uses_audio = spec is None or spec.uses_audio
    uses_imu = spec is None or spec.uses_imu
    out = []
    with torch.no_grad():
        for s in range(0, len(segs), batch_size):
            sl = slice(s, s + batch_size)
            a = torch.as_tensor(segs.audio[sl], dtype=dtype) if uses_audio else None
            i = torch.as_tensor(segs.imu[sl], dtype=dtype) if uses_imu else None
            out.append(torch.softmax(m(a, i)[1], dim=-1).numpy())
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES))
