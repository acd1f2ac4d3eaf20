"""Sessions, annotation aggregation, dataset I/O, synthetic data and LOGO folds.

A session directory holds::

    audio.wav    mono 16-bit PCM
    imu.csv      t_s,ax,ay,az,gx,gy,gz
    labels.csv   start_s,end_s,label[,context]
    meta.json    group_id, setting, watch_hand, handedness[, gender]
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import lfilter

from .seeding import rng

log = logging.getLogger(__name__)

AUDIO_RATE = 16000
IMU_RATE = 55
IMU_COLUMNS = ("ax", "ay", "az", "gx", "gy", "gz")
SETTINGS = ("lab", "semi_naturalistic")
CONTEXTS = (
    "regular_conversation",
    "conversation_eating",
    "reading_aloud",
    "watching_video",
    "music_background",
)
# contexts that can never co-occur on one segment
EXCLUSIVE_CONTEXTS = ("regular_conversation", "conversation_eating")


class DatasetError(ValueError):
    """Malformed or inconsistent session data."""


class ClassLabel(enum.IntEnum):
    conversation = 0
    other_speech = 1
    background_noise = 2

    @classmethod
    def parse(cls, value: str | int | "ClassLabel") -> "ClassLabel":
        if isinstance(value, str):
            try:
                return cls[value]
            except KeyError:
                raise DatasetError(f"unknown label {value!r}") from None
        return cls(int(value))


CLASS_NAMES = tuple(c.name for c in ClassLabel)


@dataclass(frozen=True)
class AnnotationSpan:
    start_s: float
    end_s: float
    label: ClassLabel
    contexts: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise DatasetError(f"span end {self.end_s} not after start {self.start_s}")
        object.__setattr__(self, "label", ClassLabel.parse(self.label))
        bad = set(self.contexts) - set(CONTEXTS)
        if bad:
            raise DatasetError(f"unknown context tags {sorted(bad)}")


def validate_spans(spans: Sequence[AnnotationSpan]) -> None:
    """Raise unless spans are sorted by start time and non-overlapping."""
    for prev, cur in zip(spans, spans[1:]):
        if cur.start_s < prev.start_s:
            raise DatasetError("annotation spans are not sorted by start time")
        if cur.start_s < prev.end_s:
            raise DatasetError(
                f"overlapping annotation spans [{prev.start_s}, {prev.end_s}) and "
                f"[{cur.start_s}, {cur.end_s})"
            )


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Session:
    """One group's synchronized audio, IMU and annotations."""

    group_id: str
    setting: str
    audio: np.ndarray
    imu: np.ndarray
    annotations: tuple[AnnotationSpan, ...]
    audio_rate: int = AUDIO_RATE
    imu_rate: int = IMU_RATE
    watch_hand: str | None = None
    handedness: str | None = None
    gender: str | None = None

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise DatasetError(f"unknown setting {self.setting!r}")
        audio = np.asarray(self.audio)
        imu = np.asarray(self.imu)
        if audio.ndim != 1:
            raise DatasetError("audio must be mono")
        if imu.ndim != 2 or imu.shape[0] != 6:
            raise DatasetError(f"IMU must have exactly 6 channels, got shape {imu.shape}")
        if abs(audio.size / self.audio_rate - imu.shape[1] / self.imu_rate) > 1.0:
            raise DatasetError(
                f"audio ({audio.size / self.audio_rate:.2f} s) and IMU "
                f"({imu.shape[1] / self.imu_rate:.2f} s) durations differ by more than 1 s"
            )
        spans = tuple(self.annotations)
        validate_spans(spans)
        object.__setattr__(self, "audio", _readonly(audio))
        object.__setattr__(self, "imu", _readonly(imu))
        object.__setattr__(self, "annotations", spans)

    @property
    def duration_s(self) -> float:
        return min(self.audio.size / self.audio_rate, self.imu.shape[1] / self.imu_rate)

    def meta(self) -> dict:
        return {
            "group_id": self.group_id,
            "setting": self.setting,
            "watch_hand": self.watch_hand,
            "handedness": self.handedness,
            "gender": self.gender,
        }


# ---------------------------------------------------------------------------
# label aggregation


def class_durations(spans: Sequence[AnnotationSpan], start: float, end: float) -> np.ndarray:
    """Seconds covered by each class inside ``[start, end)``; gaps count as background."""
    dur = np.zeros(len(ClassLabel))
    for s in spans:
        overlap = min(s.end_s, end) - max(s.start_s, start)
        if overlap > 0:
            dur[s.label] += overlap
    dur[ClassLabel.background_noise] += (end - start) - dur.sum()
    return dur


def majority_label(durations: np.ndarray, tol: float = 1e-9) -> ClassLabel:
    # lowest code wins ties: conversation > other_speech > background_noise
    best = durations.max()
    return ClassLabel(int(np.flatnonzero(durations >= best - tol)[0]))


def aggregate_labels(
    spans: Sequence[AnnotationSpan], window_len_s: float, session_len_s: float
) -> list[tuple[float, ClassLabel]]:
    """Label consecutive windows by the class covering most of each window.

    Trailing partial windows are dropped.
    """
    if window_len_s <= 0:
        raise ValueError(f"window length must be positive, got {window_len_s}")
    spans = list(spans)
    validate_spans(spans)
    n = int(math.floor(session_len_s / window_len_s + 1e-9))
    out = []
    for i in range(n):
        start = i * window_len_s
        out.append((start, majority_label(class_durations(spans, start, start + window_len_s))))
    return out


def window_contexts(spans: Sequence[AnnotationSpan], start: float, end: float) -> tuple[str, ...]:
    """Context tags covering at least half of ``[start, end)``.

    Of the two mutually exclusive conversation contexts only the one with the
    larger coverage is kept.
    """
    cover: dict[str, float] = {}
    for s in spans:
        overlap = min(s.end_s, end) - max(s.start_s, start)
        if overlap > 0:
            for tag in s.contexts:
                cover[tag] = cover.get(tag, 0.0) + overlap
    half = 0.5 * (end - start)
    tags = {t for t, d in cover.items() if d >= half - 1e-9}
    a, b = EXCLUSIVE_CONTEXTS
    if a in tags and b in tags:
        tags.discard(b if cover[a] >= cover[b] else a)
    return tuple(t for t in CONTEXTS if t in tags)


@dataclass(frozen=True, eq=False)
class LabeledSegment:
    session_ref: str
    start_s: float
    window_len_s: float
    audio_slice: np.ndarray
    imu_slice: np.ndarray
    label: ClassLabel
    contexts: tuple[str, ...] = ()


def segment_session(session: Session, window_len_s: float) -> list[LabeledSegment]:
    """Cut a session into labeled fixed-length segments (views, no copies)."""
    na = int(round(window_len_s * session.audio_rate))
    ni = int(round(window_len_s * session.imu_rate))
    segs = []
    for start, label in aggregate_labels(session.annotations, window_len_s, session.duration_s):
        a0 = int(round(start * session.audio_rate))
        i0 = int(round(start * session.imu_rate))
        audio = session.audio[a0 : a0 + na]
        imu = session.imu[:, i0 : i0 + ni]
        if audio.size < na or imu.shape[1] < ni:
            continue
        ctx = window_contexts(session.annotations, start, start + window_len_s)
        segs.append(LabeledSegment(session.group_id, start, window_len_s, audio, imu, label, ctx))
    return segs


# ---------------------------------------------------------------------------
# dataset directory I/O


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def export_session(session: Session, dir_path: str | Path) -> Path:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(np.asarray(session.audio, dtype=np.float64) * 32768.0), -32768, 32767)
    wavfile.write(d / "audio.wav", int(session.audio_rate), pcm.astype("<i2"))

    buf = io.StringIO()
    buf.write("t_s," + ",".join(IMU_COLUMNS) + "\n")
    t = np.arange(session.imu.shape[1]) / session.imu_rate
    for i in range(session.imu.shape[1]):
        buf.write(_fmt(t[i]) + "," + ",".join(_fmt(v) for v in session.imu[:, i]) + "\n")
    (d / "imu.csv").write_text(buf.getvalue())

    with open(d / "labels.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["start_s", "end_s", "label", "context"])
        for s in session.annotations:
            w.writerow([_fmt(s.start_s), _fmt(s.end_s), s.label.name, ";".join(s.contexts)])

    (d / "meta.json").write_text(json.dumps(session.meta(), indent=2, sort_keys=True) + "\n")
    return d


def _require(d: Path, name: str) -> Path:
    p = d / name
    if not p.is_file():
        raise DatasetError(f"session directory {d} is missing {name}")
    return p


def read_labels(path: str | Path) -> list[AnnotationSpan]:
    spans = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = {"start_s", "end_s", "label"} - set(reader.fieldnames or ())
        if missing:
            raise DatasetError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            ctx = tuple(t for t in (row.get("context") or "").split(";") if t)
            spans.append(
                AnnotationSpan(float(row["start_s"]), float(row["end_s"]), row["label"], ctx)
            )
    validate_spans(spans)
    return spans


def ingest_session(dir_path: str | Path) -> Session:
    """Load one session directory. Nothing is resampled."""
    d = Path(dir_path)
    if not d.is_dir():
        raise DatasetError(f"{d} is not a directory")
    meta = json.loads(_require(d, "meta.json").read_text())

    rate, pcm = wavfile.read(_require(d, "audio.wav"))
    if pcm.ndim != 1:
        raise DatasetError(f"{d}/audio.wav must be mono")
    if pcm.dtype != np.int16:
        raise DatasetError(f"{d}/audio.wav must be 16-bit PCM, got {pcm.dtype}")
    audio = pcm.astype(np.float32) / np.float32(32768.0)

    imu_path = _require(d, "imu.csv")
    with open(imu_path) as f:
        header = f.readline().strip().split(",")
    if len(header) != 7 or header[0] != "t_s":
        raise DatasetError(
            f"{imu_path}: expected t_s plus 6 IMU channels, got {len(header) - 1} channels"
        )
    table = np.loadtxt(imu_path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape[1] != 7:
        raise DatasetError(f"{imu_path}: expected 6 IMU channels, got {table.shape[1] - 1}")
    t = table[:, 0]
    if t.size < 2:
        raise DatasetError(f"{imu_path}: too few samples")
    imu_rate = int(round(1.0 / np.median(np.diff(t))))

    return Session(
        group_id=str(meta["group_id"]),
        setting=meta.get("setting", "lab"),
        audio=audio,
        imu=table[:, 1:].T.copy(),
        annotations=tuple(read_labels(_require(d, "labels.csv"))),
        audio_rate=int(rate),
        imu_rate=imu_rate,
        watch_hand=meta.get("watch_hand"),
        handedness=meta.get("handedness"),
        gender=meta.get("gender"),
    )


def ingest_dataset(root: str | Path) -> list[Session]:
    """Every session directory directly under ``root``, sorted by name."""
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").is_file())
    if not dirs:
        raise DatasetError(f"no session directories under {root}")
    return [ingest_session(p) for p in dirs]


# ---------------------------------------------------------------------------
# synthetic sessions


@dataclass(frozen=True)
class SynthSpec:
    n_groups: int = 6
    session_len_s: float = 600.0
    class_mix: tuple[float, float, float] = (0.4, 0.3, 0.3)
    audio_snr_db: float = 10.0
    gesture_rate_hz: float = 0.6
    seed: int = 0
    n_semi_naturalistic: int = 0
    music_prob: float = 0.15

    def __post_init__(self):
        mix = tuple(float(p) for p in self.class_mix)
        object.__setattr__(self, "class_mix", mix)
        if self.n_groups <= 0 or self.session_len_s <= 0:
            raise ValueError("n_groups and session_len_s must be positive")
        if len(mix) != 3 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-9:
            raise ValueError(f"class_mix must be 3 proportions summing to 1, got {mix}")
        if self.gesture_rate_hz < 0 or not 0 <= self.music_prob <= 1:
            raise ValueError("gesture_rate_hz must be >= 0 and music_prob in [0, 1]")
        if not 0 <= self.n_semi_naturalistic <= self.n_groups:
            raise ValueError("n_semi_naturalistic must be within [0, n_groups]")

    def to_dict(self) -> dict:
        return asdict(self)


SPEECH_LEVEL = 0.1  # RMS of a foreground voice
IMU_NOISE = 0.05


@dataclass
class _Voice:
    f0: float
    formant: float
    bandwidth: float
    level: float


def _speech_burst(n: int, voice: _Voice, g: np.random.Generator, fs: int) -> np.ndarray:
    t = np.arange(n, dtype=np.float32) / fs
    f0 = voice.f0 * g.uniform(0.8, 1.25)
    inst = f0 * (1 + 0.03 * np.sin(2 * np.pi * g.uniform(3, 6) * t + g.uniform(0, 2 * np.pi)))
    phase = (2 * np.pi * np.cumsum(inst) / fs).astype(np.float32)
    k = np.arange(1, int(3800 // f0) + 1)
    amp = np.exp(-0.5 * ((k * f0 - voice.formant) / voice.bandwidth) ** 2) + 0.25 / k
    keep = amp > 0.02
    sig = np.zeros(n, dtype=np.float32)
    for kk, a in zip(k[keep], amp[keep]):
        sig += np.float32(a) * np.sin(kk * phase + np.float32(g.uniform(0, 2 * np.pi)))
    # syllabic envelope
    rate = g.uniform(3.0, 5.0)
    env = np.abs(np.sin(np.pi * rate * t + g.uniform(0, np.pi))) ** 0.5
    ramp = min(n // 2, int(0.05 * fs))
    if ramp:
        w = np.linspace(0, 1, ramp, dtype=np.float32)
        env[:ramp] *= w
        env[-ramp:] *= w[::-1]
    sig *= env
    rms = float(np.sqrt(np.mean(sig**2))) or 1.0
    return sig * np.float32(voice.level / rms)


def _music(n: int, g: np.random.Generator, fs: int, level: float) -> np.ndarray:
    """Sustained notes on a steady beat with a few harmonics each."""
    out = np.zeros(n, dtype=np.float32)
    beat = g.uniform(0.4, 0.7)
    note_len = int(beat * fs)
    scale = 220.0 * 2 ** (np.array([0, 2, 4, 5, 7, 9, 11, 12]) / 12)
    t = np.arange(note_len, dtype=np.float32) / fs
    decay = np.exp(-t / (0.6 * beat)).astype(np.float32)
    for start in range(0, n, note_len):
        m = min(note_len, n - start)
        f = scale[g.integers(len(scale))] * g.choice([0.5, 1.0])
        note = sum(np.sin(2 * np.pi * h * f * t[:m]) / h for h in (1, 2, 3, 4))
        out[start : start + m] += note * decay[:m]
    rms = float(np.sqrt(np.mean(out**2))) or 1.0
    return out * np.float32(level / rms)


def _colored_noise(n: int, g: np.random.Generator, level: float) -> np.ndarray:
    w = g.standard_normal(n).astype(np.float32)
    c = g.uniform(0.3, 0.9)
    # one-pole low-pass blended with white: broadband, tilted spectrum
    y = lfilter([1 - c], [1, -c], w).astype(np.float32)
    y = 0.6 * y / (y.std() or 1.0) + 0.4 * w
    return y * np.float32(level / (y.std() or 1.0))


def _gesture(n: int, g: np.random.Generator, fs: int, freq=(1.0, 4.0), amp=(0.2, 0.5)):
    t = np.arange(n) / fs
    env = np.hanning(n) if n > 1 else np.ones(n)
    f = g.uniform(*freq)
    return g.uniform(*amp) * env * np.sin(2 * np.pi * f * t + g.uniform(0, 2 * np.pi))


# channels carrying gesture energy: accel x/y and gyro z
_GESTURE_CHANNELS = (0, 1, 5)


def _add_gestures(imu, t0, t1, rate_hz, g, fs, freq=(1.0, 4.0), amp=(0.2, 0.5), dur=(0.8, 2.0)):
    count = g.poisson(rate_hz * (t1 - t0))
    gains = np.array([1.0, 0.8, 2.0])
    for _ in range(count):
        d = g.uniform(*dur)
        s = g.uniform(t0, max(t0, t1 - d))
        i0, n = int(s * fs), int(d * fs)
        n = min(n, imu.shape[1] - i0)
        if n <= 1:
            continue
        pkt = _gesture(n, g, fs, freq, amp)
        for c, gain in zip(_GESTURE_CHANNELS, gains * g.uniform(0.6, 1.4, 3)):
            imu[c, i0 : i0 + n] += gain * pkt


def _place(audio, t0, sig, fs):
    i0 = int(round(t0 * fs))
    m = min(sig.size, audio.size - i0)
    if m > 0:
        audio[i0 : i0 + m] += sig[:m]


def _plan_blocks(total: float, mix, g: np.random.Generator) -> list[tuple[float, float, ClassLabel]]:
    """Activity blocks of 30-120 s on a 10 s grid, labelled so time shares track ``mix``.

    Blocks are labelled largest first, each going to the class furthest below
    its target share; drawing labels independently lets a short session drift
    far from the mix.
    """
    bounds, t = [], 0.0
    while t < total - 1e-9:
        dur = min(10.0 * g.integers(3, 13), total - t)
        if total - (t + dur) < 30.0:
            dur = total - t
        bounds.append((t, t + dur))
        t += dur
    mix = np.asarray(mix, dtype=np.float64)
    deficit = mix * total
    labels = [ClassLabel.background_noise] * len(bounds)
    order = sorted(g.permutation(len(bounds)), key=lambda i: -(bounds[i][1] - bounds[i][0]))
    for i in order:
        c = int(np.argmax(np.where(mix > 0, deficit, -np.inf)))
        labels[i] = ClassLabel(c)
        deficit[c] -= bounds[i][1] - bounds[i][0]
    return [(a, b, lab) for (a, b), lab in zip(bounds, labels)]


def synth_session(spec: SynthSpec, index: int = 0) -> Session:
    """Generate session ``index`` of the synthetic dataset described by ``spec``.

    Conversation blocks alternate two voices (1-4 s turns) with gesture packets
    during the wearer's turns; other-speech blocks hold one voice without turn
    changes and sparse gestures; background blocks are broadband noise, with
    optional music, and a nearly still wrist. A pure function of (spec, index).
    """
    if not 0 <= index < spec.n_groups:
        raise ValueError(f"group index {index} outside [0, {spec.n_groups})")
    g = rng(spec.seed, f"synth/{index}")
    fs, fi = AUDIO_RATE, IMU_RATE
    total = spec.session_len_s
    na, ni = int(round(total * fs)), int(round(total * fi))
    semi = index >= spec.n_groups - spec.n_semi_naturalistic
    setting = "semi_naturalistic" if semi else "lab"
    snr_db = spec.audio_snr_db - (8.0 if semi else 0.0)
    music_prob = min(1.0, spec.music_prob * (2.0 if semi else 1.0))

    low, high = g.uniform(800, 1000), g.uniform(2100, 2600)
    if g.random() < 0.5:
        low, high = high, low
    wearer = _Voice(g.uniform(100, 180), low, 0.3 * low, SPEECH_LEVEL)
    partner = _Voice(g.uniform(140, 230), high, 0.3 * high, SPEECH_LEVEL)

    audio = np.zeros(na, dtype=np.float32)
    imu = np.zeros((6, ni))
    gravity = g.normal([0.2, -0.3, 0.9], 0.1)
    imu[:3] = (gravity / np.linalg.norm(gravity))[:, None]
    drift_t = np.arange(ni) / fi
    for c in range(6):
        imu[c] += 0.02 * np.sin(2 * np.pi * g.uniform(0.005, 0.02) * drift_t + g.uniform(0, 6.3))

    spans: list[AnnotationSpan] = []
    for t, t1, label in _plan_blocks(total, spec.class_mix, g):
        music = g.random() < music_prob
        tags: list[str] = []

        if label is ClassLabel.conversation:
            eating = g.random() < 0.3
            tags.append("conversation_eating" if eating else "regular_conversation")
            speaker = int(g.integers(2))
            tt = t
            while tt < t1:
                turn = min(g.uniform(1.0, 4.0), t1 - tt)
                n = int(turn * fs)
                if n > fs // 10:
                    voice = wearer if speaker == 0 else partner
                    _place(audio, tt, _speech_burst(n, voice, g, fs), fs)
                    if speaker == 0:
                        _add_gestures(imu, tt, tt + turn, spec.gesture_rate_hz, g, fi)
                tt += turn + g.uniform(0.1, 0.6)
                speaker = 1 - speaker
            if eating:
                _add_gestures(imu, t, t1, 0.08, g, fi, (0.3, 0.6), (0.4, 0.8), (2.0, 4.0))
        elif label is ClassLabel.other_speech:
            reading = g.random() < 0.5
            tags.append("reading_aloud" if reading else "watching_video")
            if reading:
                voice = wearer
            else:
                fc = g.uniform(700, 2800)
                voice = _Voice(g.uniform(100, 230), fc, 0.3 * fc, 0.7 * SPEECH_LEVEL)
            tt = t
            while tt < t1:
                burst = min(g.uniform(1.0, 4.0), t1 - tt)
                n = int(burst * fs)
                if n > fs // 10:
                    _place(audio, tt, _speech_burst(n, voice, g, fs), fs)
                tt += burst + g.uniform(0.1, 0.6)
            _add_gestures(imu, t, t1, spec.gesture_rate_hz / 8, g, fi)
        else:
            n0, n1 = int(round(t * fs)), int(round(t1 * fs))
            audio[n0:n1] += _colored_noise(n1 - n0, g, g.uniform(0.02, 0.06))
            _add_gestures(imu, t, t1, spec.gesture_rate_hz / 40, g, fi, amp=(0.05, 0.15))

        if music:
            tags.append("music_background")
            n0, n1 = int(round(t * fs)), int(round(t1 * fs))
            audio[n0:n1] += _music(n1 - n0, g, fs, g.uniform(0.4, 0.8) * SPEECH_LEVEL)

        spans.append(AnnotationSpan(round(t, 6), round(t1, 6), label, tuple(tags)))

    noise_rms = SPEECH_LEVEL * 10 ** (-snr_db / 20)
    audio += g.standard_normal(na).astype(np.float32) * np.float32(noise_rms)
    imu += g.normal(0.0, IMU_NOISE, imu.shape)
    # store on the 16-bit PCM grid so exports are lossless
    audio = np.clip(np.round(audio * 32768.0), -32768, 32767).astype(np.float32) / np.float32(32768)

    hand = "left" if g.random() < 0.8 else "right"
    return Session(
        group_id=f"g{index:02d}",
        setting=setting,
        audio=audio,
        imu=imu,
        annotations=tuple(spans),
        watch_hand=hand,
        handedness="right" if hand == "left" else "left",
    )


def synth_dataset(spec: SynthSpec) -> list[Session]:
    return [synth_session(spec, i) for i in range(spec.n_groups)]


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class Fold:
    train: tuple[Session, ...]
    test: Session

    @property
    def group_id(self) -> str:
        return self.test.group_id


def split_logo(sessions: Iterable[Session]) -> list[Fold]:
    """Leave-one-group-out: one fold per session, holding that session out."""
    sessions = list(sessions)
    ids = [s.group_id for s in sessions]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DatasetError(f"duplicate group ids {dup}")
    if len(sessions) < 2:
        raise DatasetError("LOGO needs at least two sessions")
    return [
        Fold(tuple(s for s in sessions if s.group_id != test.group_id), test) for test in sessions
    ]
