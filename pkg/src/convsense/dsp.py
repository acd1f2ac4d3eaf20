"""Signal preprocessing: resampling, audio spectrograms, IMU framing and energy images."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np
from scipy import fft as sfft

SPEC_BANDS = 128
SPEC_WINDOW_S = 0.5
SPEC_STRIDE_S = 0.25
IMU_FRAME_S = 2.0
ENERGY_STEP_S = 0.4
ENERGY_NFFT = 62  # 32 one-sided bins


def resample_bandlimited(audio: np.ndarray, target_rate_hz: float, source_rate_hz: float = 16000):
    """Remove content above ``target_rate_hz / 2`` while keeping the original length.

    Equivalent to ideal decimation to ``target_rate_hz`` followed by FFT
    interpolation back to the source rate, done in one spectral pass.
    """
    if not 0 < target_rate_hz < source_rate_hz:
        raise ValueError(
            f"target rate {target_rate_hz} Hz must be in (0, {source_rate_hz}) Hz"
        )
    x = np.asarray(audio, dtype=np.float64)
    n = x.shape[-1]
    spec = sfft.rfft(x, axis=-1)
    freqs = np.arange(spec.shape[-1]) * source_rate_hz / n
    nyq = target_rate_hz / 2
    gain = (freqs < nyq).astype(np.float64)
    gain[np.isclose(freqs, nyq)] = 0.5
    return sfft.irfft(spec * gain, n=n, axis=-1)


def spectrogram_magnitudes(audio_slice: np.ndarray, window_len_s: float, rate: int = 16000):
    """Unnormalized (128, T) band magnitudes, T = window_len_s / 0.25.

    Each 500 ms Hann window is transformed at its own length and the one-sided
    magnitude spectrum (Nyquist bin dropped) is mean-pooled into 128 equal
    linear bands. The slice is zero-padded by one stride at the end so the
    last window is complete.
    """
    win = int(round(SPEC_WINDOW_S * rate))
    hop = int(round(SPEC_STRIDE_S * rate))
    n_frames = int(round(window_len_s / SPEC_STRIDE_S))
    need = int(round(window_len_s * rate))
    x = np.asarray(audio_slice, dtype=np.float64)
    if x.ndim != 1 or x.size < need:
        raise ValueError(f"audio slice has {x.size} samples, need {need}")
    x = np.concatenate([x[:need], np.zeros((n_frames - 1) * hop + win - need)])
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    window = np.hanning(win + 1)[:-1]
    mag = np.abs(sfft.rfft(frames * window, axis=-1))[:, : win // 2]
    edges = np.linspace(0, win // 2, SPEC_BANDS + 1).round().astype(int)
    bands = np.add.reduceat(mag, edges[:-1], axis=-1) / np.diff(edges)
    return bands.T


def normalize_segment(values: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Standardize one segment to zero mean and unit variance; flat input maps to zeros."""
    mu = values.mean()
    sd = values.std()
    if sd < eps:
        return np.zeros_like(values)
    return (values - mu) / sd


def audio_spectrogram(audio_slice: np.ndarray, window_len_s: float, rate: int = 16000):
    """Normalized (128, window_len_s * 4) spectrogram of one segment."""
    return normalize_segment(spectrogram_magnitudes(audio_slice, window_len_s, rate))


def standardize_imu(imu: np.ndarray) -> np.ndarray:
    """Per-channel zero mean, unit variance. Constant channels become zeros."""
    x = np.asarray(imu, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    sd = np.sqrt((centered**2).mean(axis=-1, keepdims=True))
    const = sd[..., 0] < 1e-12 * np.maximum(1.0, np.abs(mu[..., 0]))
    sd[const] = 1.0
    out = centered / sd
    out[const] = 0.0
    return out


def frame_geometry(frame_s: float, rate: int = 55) -> tuple[int, int]:
    """(frame length, hop) in samples for frames of ``frame_s`` with 50% overlap."""
    length = int(round(frame_s * rate))
    hop = int(round(frame_s * rate / 2))
    if length < 1 or hop < 1:
        raise ValueError(f"frame of {frame_s} s is too short")
    return length, hop


def frame_imu(imu_slice: np.ndarray, frame_s: float = IMU_FRAME_S, rate: int = 55) -> np.ndarray:
    """Frame a (6, N) slice into (F, 6, L) frames with hop L/2.

    F = ceil(N / hop): every hop position inside the slice starts a frame and
    frames running past the end are zero-padded.
    """
    x = np.asarray(imu_slice, dtype=np.float64)
    length, hop = frame_geometry(frame_s, rate)
    if x.ndim != 2 or x.shape[0] != 6:
        raise ValueError(f"IMU slice must be (6, N), got {x.shape}")
    if x.shape[1] < length:
        raise ValueError(f"slice of {x.shape[1]} samples is shorter than one frame ({length})")
    n_frames = math.ceil(x.shape[1] / hop)
    padded = np.zeros((6, (n_frames - 1) * hop + length))
    padded[:, : x.shape[1]] = x
    idx = np.arange(n_frames)[:, None] * hop + np.arange(length)
    return padded[:, idx].transpose(1, 0, 2)


def energy_steps(frame_s: float) -> int:
    """Number of 400 ms energy steps per frame (at least one)."""
    return max(1, int(math.floor(frame_s / ENERGY_STEP_S + 1e-9)))


def _offset_hann(n: int) -> np.ndarray:
    # half-sample-offset Hann: nonzero at both ends, so edge samples are not discarded
    return np.sin(np.pi * (np.arange(n) + 0.5) / n) ** 2


def imu_energy(frame: np.ndarray, steps: int = 5, nfft: int = ENERGY_NFFT) -> np.ndarray:
    """(6, steps) STFT energy image of one IMU frame (or a stack of frames).

    The frame is split into ``steps`` non-overlapping windows; each is
    Hann-windowed, zero-padded to ``nfft`` and its one-sided power spectrum
    summed over frequency.
    """
    x = np.asarray(frame, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] != 6:
        raise ValueError(f"frame must have 6 channels, got shape {x.shape}")
    sub = x.shape[-1] // steps
    if sub < 1 or sub > nfft:
        raise ValueError(f"frame length {x.shape[-1]} does not fit {steps} windows of <= {nfft}")
    win = x[..., : sub * steps].reshape(*x.shape[:-1], steps, sub) * _offset_hann(sub)
    spec = sfft.rfft(win, n=nfft, axis=-1)
    return (spec.real**2 + spec.imag**2).sum(axis=-1)


def imu_energy_tensor(imu_slice: np.ndarray, frame_s: float = IMU_FRAME_S, rate: int = 55):
    """(F, 6, S) energy images for one segment; (30, 6, 5) for 30 s at the defaults."""
    frames = frame_imu(imu_slice, frame_s, rate)
    return imu_energy(frames, energy_steps(frame_s))


# ---------------------------------------------------------------------------
# tensor cache: raw little-endian data plus a JSON sidecar


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``path.bin`` (concatenated arrays) and ``path.json`` (layout + meta)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layout = []
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as f:
        for name, arr in tensors.items():
            a = np.ascontiguousarray(arr)
            dt = a.dtype.newbyteorder("<") if a.dtype.byteorder not in "|" else a.dtype
            data = a.astype(dt, copy=False).tobytes()
            layout.append(
                {"name": name, "shape": list(a.shape), "dtype": dt.str, "offset": offset,
                 "nbytes": len(data)}
            )
            f.write(data)
            offset += len(data)
    sidecar = {"tensors": layout, "meta": meta}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    out = {}
    for t in sidecar["tensors"]:
        buf = raw[t["offset"] : t["offset"] + t["nbytes"]]
        if len(buf) != t["nbytes"]:
            raise ValueError(f"{path}: truncated tensor {t['name']}")
        out[t["name"]] = np.frombuffer(buf, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
    return out, sidecar["meta"]
