"""Histogram mutual information between scalar features and class labels."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

N_BINS = 10


@dataclass(frozen=True)
class FeatureScore:
    feature_name: str
    mi_nats: float


def discretize(values, n_bins: int = N_BINS) -> np.ndarray:
    """Map values to equal-width bins over [min, max]; the max lands in the last bin.

    NaNs are ignored when finding the range and are assigned bin -1.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("cannot discretize an empty array")
    finite = np.isfinite(x)
    if not finite.any():
        raise ValueError("no finite values to discretize")
    lo, hi = x[finite].min(), x[finite].max()
    out = np.full(x.shape, -1, dtype=np.int64)
    if hi <= lo:
        out[finite] = 0
        return out
    idx = np.floor((x[finite] - lo) / (hi - lo) * n_bins).astype(np.int64)
    out[finite] = np.clip(idx, 0, n_bins - 1)
    return out


def joint_table(x, y) -> np.ndarray:
    x = np.asarray(x).ravel()
    y = np.asarray(y).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    _, xi = np.unique(x, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    table = np.zeros((xi.max() + 1, yi.max() + 1))
    np.add.at(table, (xi, yi), 1)
    return table


def mi_from_counts(counts: np.ndarray) -> float:
    """Mutual information (nats) of an empirical joint count table."""
    p = np.asarray(counts, dtype=np.float64)
    p = p / p.sum()
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    # fsum is exactly rounded, so the value does not depend on table orientation
    mi = math.fsum((p[nz] * np.log(p[nz] / (px @ py)[nz])).tolist())
    return max(mi, 0.0)


def mutual_information(x_bins, y) -> float:
    """I(X;Y) in nats from paired discrete observations."""
    x_bins = np.asarray(x_bins).ravel()
    y = np.asarray(y).ravel()
    if x_bins.size != y.size:
        raise ValueError(f"length mismatch: {x_bins.size} vs {y.size}")
    if x_bins.size == 0:
        return 0.0
    return mi_from_counts(joint_table(x_bins, y))


def entropy(x) -> float:
    _, counts = np.unique(np.asarray(x).ravel(), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def rank_features(
    feature_matrix, labels, names: Sequence[str] | None = None, n_bins: int = N_BINS
) -> list[FeatureScore]:
    """Score each column against ``labels``; highest MI first, ties by name."""
    X = np.asarray(feature_matrix, dtype=np.float64)
    y = np.asarray(labels).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError(f"feature matrix rows ({X.shape[0]}) do not match labels ({y.size})")
    if names is None:
        names = [f"f{i}" for i in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ValueError("one name per feature column required")
    scores = [
        FeatureScore(str(n), mutual_information(discretize(X[:, j], n_bins), y))
        for j, n in enumerate(names)
    ]
    return sorted(scores, key=lambda s: (-s.mi_nats, s.feature_name))


def scores_csv(scores: Sequence[FeatureScore]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feature", "mi_nats"])
    for s in scores:
        w.writerow([s.feature_name, repr(s.mi_nats)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# candidate statistical features for IMU segments

CHANNELS = ("ax", "ay", "az", "gx", "gy", "gz")
STATS = ("mean", "std", "min", "max", "rms", "zcr", "energy")


def imu_statistics(imu_slice: np.ndarray, frame_s: float = 2.0, rate: int = 55):
    """Per-channel statistics of one standardized (6, N) segment.

    Returns (values, names). ``energy`` is the mean STFT energy per frame.
    """
    from .dsp import imu_energy_tensor

    x = np.asarray(imu_slice, dtype=np.float64)
    centered = x - x.mean(axis=1, keepdims=True)
    zcr = (np.diff(np.signbit(centered), axis=1) != 0).mean(axis=1)
    energy = imu_energy_tensor(x, frame_s, rate).sum(axis=-1).mean(axis=0)
    table = {
        "mean": x.mean(axis=1),
        "std": x.std(axis=1),
        "min": x.min(axis=1),
        "max": x.max(axis=1),
        "rms": np.sqrt((x**2).mean(axis=1)),
        "zcr": zcr,
        "energy": energy,
    }
    values, names = [], []
    for stat in STATS:
        for c, ch in enumerate(CHANNELS):
            values.append(table[stat][c])
            names.append(f"{ch}_{stat}")
    return np.array(values), names
