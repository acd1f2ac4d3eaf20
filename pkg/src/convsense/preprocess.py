"""Turn sessions into model-ready segment tensors, with an on-disk cache."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dsp
from .dataset import AUDIO_RATE, CONTEXTS, Session, segment_session

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreprocessConfig:
    window_len_s: float = 30.0
    imu_frame_s: float = 2.0
    audio_rate_hz: int = AUDIO_RATE

    def __post_init__(self):
        if self.window_len_s <= 0 or self.imu_frame_s <= 0 or self.audio_rate_hz <= 0:
            raise ValueError(f"window, IMU frame and audio rate must be positive: {self.to_dict()}")
        if self.imu_frame_s > self.window_len_s:
            raise ValueError(f"IMU frame {self.imu_frame_s} s is longer than the {self.window_len_s} s window")

    def to_dict(self) -> dict:
        return {
            "window_len_s": float(self.window_len_s),
            "imu_frame_s": float(self.imu_frame_s),
            "audio_rate_hz": int(self.audio_rate_hz),
        }


@dataclass
class SegmentSet:
    """Stacked per-segment model inputs and bookkeeping."""

    audio: np.ndarray  # (N, 128, T) normalized spectrograms
    imu: np.ndarray  # (N, F, 6, S) energy images
    labels: np.ndarray  # (N,)
    groups: np.ndarray  # (N,) group ids
    settings: np.ndarray  # (N,) lab / semi_naturalistic
    starts: np.ndarray  # (N,) seconds
    contexts: list[tuple[str, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "SegmentSet":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return SegmentSet(
            self.audio[idx],
            self.imu[idx],
            self.labels[idx],
            self.groups[idx],
            self.settings[idx],
            self.starts[idx],
            [self.contexts[i] for i in idx],
        )

    def for_groups(self, group_ids) -> "SegmentSet":
        return self.subset(np.isin(self.groups, list(group_ids)))

    @property
    def group_ids(self) -> list[str]:
        return list(dict.fromkeys(self.groups.tolist()))

    def group_setting(self, group_id: str) -> str:
        return str(self.settings[np.flatnonzero(self.groups == group_id)[0]])

    def context_mask(self, tag: str) -> np.ndarray:
        return np.array([tag in c for c in self.contexts], dtype=bool)

    @staticmethod
    def concat(parts: Sequence["SegmentSet"]) -> "SegmentSet":
        return SegmentSet(
            np.concatenate([p.audio for p in parts]),
            np.concatenate([p.imu for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.groups for p in parts]),
            np.concatenate([p.settings for p in parts]),
            np.concatenate([p.starts for p in parts]),
            [c for p in parts for c in p.contexts],
        )

    def save(self, path: str | Path, meta: dict) -> None:
        ctx = np.array(
            [[t in c for t in CONTEXTS] for c in self.contexts], dtype=np.uint8
        ).reshape(len(self), len(CONTEXTS))
        dsp.save_tensors(
            path,
            {
                "audio": self.audio.astype(np.float32),
                "imu": self.imu.astype(np.float32),
                "labels": self.labels.astype(np.int64),
                "starts": self.starts.astype(np.float64),
                "contexts": ctx,
            },
            {**meta, "groups": self.groups.tolist(), "settings": self.settings.tolist()},
        )

    @classmethod
    def load(cls, path: str | Path) -> tuple["SegmentSet", dict]:
        t, meta = dsp.load_tensors(path)
        contexts = [tuple(c for c, on in zip(CONTEXTS, row) if on) for row in t["contexts"]]
        seg = cls(
            t["audio"],
            t["imu"],
            t["labels"],
            np.array(meta.pop("groups"), dtype=object),
            np.array(meta.pop("settings"), dtype=object),
            t["starts"],
            contexts,
        )
        return seg, meta


def preprocess_session(session: Session, cfg: PreprocessConfig = PreprocessConfig()) -> SegmentSet:
    audio = session.audio
    if cfg.audio_rate_hz < session.audio_rate:
        audio = dsp.resample_bandlimited(audio, cfg.audio_rate_hz, session.audio_rate)
    elif cfg.audio_rate_hz != session.audio_rate:
        raise ValueError(
            f"cannot raise audio rate from {session.audio_rate} to {cfg.audio_rate_hz} Hz"
        )
    imu = dsp.standardize_imu(session.imu)
    segs = segment_session(replace(session, audio=audio, imu=imu), cfg.window_len_s)
    n = len(segs)
    if n:
        spec = np.stack(
            [dsp.audio_spectrogram(s.audio_slice, cfg.window_len_s, session.audio_rate) for s in segs]
        )
        energy = np.stack(
            [dsp.imu_energy_tensor(s.imu_slice, cfg.imu_frame_s, session.imu_rate) for s in segs]
        )
    else:
        spec = np.zeros((0, dsp.SPEC_BANDS, int(round(cfg.window_len_s / dsp.SPEC_STRIDE_S))))
        energy = np.zeros((0, 1, 6, dsp.energy_steps(cfg.imu_frame_s)))
    return SegmentSet(
        spec.astype(np.float32),
        energy.astype(np.float32),
        np.array([int(s.label) for s in segs], dtype=np.int64),
        np.array([session.group_id] * n, dtype=object),
        np.array([session.setting] * n, dtype=object),
        np.array([s.start_s for s in segs], dtype=np.float64),
        [s.contexts for s in segs],
    )


def cache_dir(default: str | Path | None = None) -> Path:
    env = os.environ.get("CONVSENSE_CACHE")
    if env:
        return Path(env)
    if default is not None:
        return Path(default)
    return Path.home() / ".cache" / "convsense"


def preprocess_sessions(
    sessions: Sequence[Session],
    cfg: PreprocessConfig = PreprocessConfig(),
    cache: str | Path | None = None,
    dataset_key: str | None = None,
) -> SegmentSet:
    """Preprocess every session. With ``cache`` and ``dataset_key`` set, results
    are read from / written to ``cache/<hash>.{bin,json}``."""
    path = None
    if cache is not None and dataset_key is not None:
        key = dsp.config_hash({"dataset": dataset_key, **cfg.to_dict()})
        path = Path(cache) / f"segments-{key}"
        if path.with_suffix(".json").is_file() and path.with_suffix(".bin").is_file():
            log.info("preprocess cache hit %s", path)
            return SegmentSet.load(path)[0]
    out = SegmentSet.concat([preprocess_session(s, cfg) for s in sessions])
    if path is not None:
        out.save(path, {"config": cfg.to_dict(), "dataset": dataset_key, "hash": path.name[9:]})
        log.info("preprocess cache write %s", path)
    return out
