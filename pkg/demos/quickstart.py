"""Synthesize a small dataset, look at the model inputs, run a short LOGO evaluation.

    python demos/quickstart.py

Takes about a minute on one core.
"""

import numpy as np
import torch

from convsense.dataset import CLASS_NAMES, SynthSpec, synth_dataset
from convsense.evaluation import EvalConfig, run_logo_segments
from convsense.fusion import FusionSpec
from convsense.models import ModelSpec, TrainConfig
from convsense.preprocess import preprocess_sessions

torch.set_num_threads(1)

sessions = synth_dataset(SynthSpec(n_groups=4, session_len_s=300, seed=7))
for s in sessions:
    spans = ", ".join(f"{a.label.name}[{a.start_s:.0f}-{a.end_s:.0f}]" for a in s.annotations[:3])
    print(f"{s.group_id} ({s.setting}): {s.duration_s:.0f} s, first spans {spans} ...")

segs = preprocess_sessions(sessions)
print(f"\n{len(segs)} segments of 30 s")
print(f"  spectrogram {segs.audio.shape[1:]}, IMU energy images {segs.imu.shape[1:]}")
counts = np.bincount(segs.labels, minlength=3)
print("  labels " + ", ".join(f"{n}={c}" for n, c in zip(CLASS_NAMES, counts)))

acoustic = ModelSpec.compact("pure_acoustic")
inertial = ModelSpec.compact("cnn_attention")
short = TrainConfig(epochs=15, seed=7)
for spec in (acoustic, inertial, FusionSpec("concat", acoustic, inertial)):
    rep = run_logo_segments(segs, EvalConfig(spec, train=short, seed=7))
    agg = rep.aggregate["macro_f1"]
    folds = " ".join(f"{f.metrics['macro_f1']:.2f}" for f in rep.folds)
    print(f"{rep.model:>28} {rep.fusion:>6}: macro-F1 {agg['value']:.3f} "
          f"[{agg['ci_lo']:.3f}, {agg['ci_hi']:.3f}]  folds {folds}")
