"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The end-to-end criteria (6, 7, 9) train on a seed-fixed synthetic dataset
of six 600 s lab groups with the compact model sizes. Criterion 10 needs the
released dataset; point CONVSENSE_REAL_DATA at its root to run it.
"""

import itertools
import os
import time

import numpy as np
import pytest
import torch

from convsense import dsp
from convsense.dataset import SynthSpec, ingest_dataset, synth_dataset, synth_session
from convsense.deploy import (
    load_model,
    prunable,
    qat_finetune,
    serialize_model,
    size_bytes,
)
from convsense.evaluation import (
    EvalConfig,
    bootstrap_ci,
    confusion_matrix,
    fold_plan,
    macro_scores,
    run_logo,
    weighted_f1,
)
from convsense.features import entropy, mi_from_counts, mutual_information
from convsense.fusion import FusionSpec
from convsense.models import ModelSpec, TrainConfig, build_model, param_count, predict_proba, train
from convsense.preprocess import PreprocessConfig, preprocess_session, preprocess_sessions
from gradcases import CASES
from oracles import brute_force_macro, brute_force_weighted_f1, direct_entropy, direct_mi, finite_difference_check

AUDIO = ModelSpec.compact("pure_acoustic")
IMU = ModelSpec.compact("cnn_attention")
CONCAT = FusionSpec("concat", AUDIO, IMU)
SEEDS = (0, 1, 2)

_segments: dict = {}
_logo: dict = {}
_elapsed: dict = {}


def segments(seed, rate=16000):
    key = (seed, rate)
    if key not in _segments:
        t0 = time.perf_counter()
        sessions = synth_dataset(SynthSpec(n_groups=6, session_len_s=600, seed=seed))
        _segments[key] = preprocess_sessions(sessions, PreprocessConfig(audio_rate_hz=rate))
        _elapsed[("prep", key)] = time.perf_counter() - t0
    return _segments[key]


def logo(name, seed, rate=16000):
    """LOGO fold macro-F1 scores and the per-fold trained weights, cached per run."""
    key = (name, seed, rate)
    if key not in _logo:
        spec = {"audio": AUDIO, "imu": IMU, "concat": CONCAT}[name]
        segs = segments(seed, rate)
        cfg = TrainConfig(seed=seed)
        t0 = time.perf_counter()
        folds = []
        for test, train_groups in fold_plan(segs, "lab_logo"):
            tr, te = segs.for_groups(train_groups), segs.for_groups([test])
            w, _ = train(spec, tr, cfg)
            preds = predict_proba(w, te).argmax(axis=1)
            folds.append((test, macro_scores(confusion_matrix(preds, te.labels).counts)[0], w))
        _elapsed[key] = time.perf_counter() - t0
        _logo[key] = folds
    return _logo[key]


def mean_f1(folds):
    return float(np.mean([f for _, f, _ in folds]))


# ---------------------------------------------------------------------------


def test_criterion_01_shapes(record_criterion):
    session = synth_session(SynthSpec(n_groups=1, session_len_s=90, seed=5))
    t0 = time.perf_counter()
    segs = preprocess_session(session)
    per_segment = (time.perf_counter() - t0) / len(segs)
    frames = dsp.frame_imu(dsp.standardize_imu(session.imu)[:, : 30 * 55])
    ok = (segs.audio.shape[1:] == (128, 120) and frames.shape == (30, 6, 110)
          and segs.imu.shape[1:] == (30, 6, 5) and per_segment < 1.0)
    record_criterion(1, ok, f"audio {segs.audio.shape[1:]}, frames {frames.shape}, "
                            f"energy {segs.imu.shape[1:]}, {per_segment:.2f} s/segment")
    assert ok


def test_criterion_02_mutual_information(record_criterion):
    worst = 0.0
    for shape, top in (((2, 2), 4), ((2, 3), 3), ((3, 3), 2)):
        for cells in itertools.product(range(top), repeat=shape[0] * shape[1]):
            if sum(cells):
                table = np.array(cells).reshape(shape)
                worst = max(worst, abs(mi_from_counts(table) - direct_mi(table.tolist())))
    g = np.random.default_rng(0)
    self_err = indep = 0.0
    for _ in range(200):
        x = g.integers(0, 8, 50)
        self_err = max(self_err, abs(mutual_information(x, x) - entropy(x)),
                       abs(entropy(x) - direct_entropy(x.tolist())))
        a, b = g.integers(1, 6, 4), g.integers(1, 6, 3)
        indep = max(indep, abs(mi_from_counts(np.outer(a, b))))
    ok = worst <= 1e-12 and self_err <= 1e-12 and indep <= 1e-12
    record_criterion(2, ok, f"table error {worst:.1e}, I(X;X)-H(X) {self_err:.1e}, independent {indep:.1e}")
    assert ok


def test_criterion_03_gradients(record_criterion):
    t0 = time.perf_counter()
    worst = {}
    for name, case in CASES.items():
        errors = []
        for seed in range(20):
            params, loss = case(seed)
            errors.append(finite_difference_check(loss, params, seed=seed))
        worst[name] = max(errors)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    top = max(worst, key=worst.get)
    record_criterion(3, ok, f"{len(CASES)} layer types x 20 seeds, worst {worst[top]:.1e} ({top}), {elapsed:.0f} s")
    assert ok


def test_criterion_04_metrics(record_criterion):
    g = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        cm = g.integers(0, 15, (3, 3))
        cm[0, 0] += 1
        got = (*macro_scores(cm), weighted_f1(cm))
        want = (*brute_force_macro(cm.tolist()), brute_force_weighted_f1(cm.tolist()))
        worst = max(worst, max(abs(a - b) for a, b in zip(got, want)))

    # exactly 100 of 500 predictions wrong, so the known accuracy is 0.8
    covered, deterministic = 0, True
    for outer in range(100):
        og = np.random.default_rng(10_000 + outer)
        labels = og.integers(0, 3, 500)
        preds = labels.copy()
        wrong = og.choice(500, size=100, replace=False)
        preds[wrong] = (labels[wrong] + og.integers(1, 3, 100)) % 3
        lo, hi = bootstrap_ci(preds, labels, "accuracy", rounds=200, seed=outer)
        covered += lo <= 0.8 <= hi
        if outer < 5:
            deterministic &= (lo, hi) == bootstrap_ci(preds, labels, "accuracy", rounds=200, seed=outer)

    # reported only: errors drawn independently at rate 0.2, so the sample
    # accuracy itself varies and the nominal rate is 95%
    sampled = 0
    for outer in range(100):
        og = np.random.default_rng(20_000 + outer)
        labels = og.integers(0, 3, 500)
        preds = np.where(og.random(500) < 0.2, (labels + og.integers(1, 3, 500)) % 3, labels)
        lo, hi = bootstrap_ci(preds, labels, "accuracy", rounds=200, seed=outer)
        sampled += lo <= 0.8 <= hi

    ok = worst <= 1e-12 and deterministic and covered >= 95
    record_criterion(4, ok, f"oracle error {worst:.1e}, deterministic {deterministic}, coverage {covered}/100 "
                            f"(Bernoulli-error data, not gated: {sampled}/100)")
    assert ok


def test_criterion_05_resampling(record_criterion):
    t = np.arange(16000 * 4) / 16000
    rmse, atten, same_len = 0.0, np.inf, True
    for rate in (2000, 1000):
        for f in (50.0, 0.3 * rate, 0.45 * rate):
            x = np.sin(2 * np.pi * f * t)
            y = dsp.resample_bandlimited(x, rate)
            same_len &= y.shape == x.shape
            rmse = max(rmse, float(np.sqrt(np.mean((y - x) ** 2))))
        for f in (0.55 * rate, rate, 3000.0):
            x = np.sin(2 * np.pi * f * t)
            y = dsp.resample_bandlimited(x, rate)
            same_len &= y.shape == x.shape
            atten = min(atten, 20 * np.log10(np.std(x) / max(np.std(y), 1e-300)))
    ok = same_len and rmse < 1e-2 and atten >= 20
    record_criterion(5, ok, f"length kept {same_len}, pass-band RMSE {rmse:.1e}, stop-band attenuation {atten:.0f} dB")
    assert ok


@pytest.mark.slow
def test_criterion_06_end_to_end(record_criterion):
    t0 = time.perf_counter()
    f1 = {m: mean_f1(logo(m, 0)) for m in ("audio", "imu", "concat")}
    elapsed = time.perf_counter() - t0
    best_single = max(f1["audio"], f1["imu"])
    ok = f1["concat"] >= best_single - 0.02 and f1["concat"] >= 0.70 and elapsed <= 15 * 60
    record_criterion(6, ok, f"macro-F1 concat {f1['concat']:.3f}, audio {f1['audio']:.3f}, "
                            f"IMU {f1['imu']:.3f}; {elapsed / 60:.1f} min on {torch.get_num_threads()} thread(s)")
    assert ok


@pytest.mark.slow
def test_criterion_07_sampling_rate(record_criterion):
    f1 = {(m, r): np.mean([mean_f1(logo(m, s, r)) for s in SEEDS])
          for m in ("audio", "concat") for r in (16000, 1000)}
    audio_drop = f1["audio", 16000] - f1["audio", 1000]
    multi_drop = f1["concat", 16000] - f1["concat", 1000]
    ok = f1["audio", 1000] <= f1["audio", 16000] and multi_drop < audio_drop
    record_criterion(7, ok, f"audio {f1['audio', 16000]:.3f} -> {f1['audio', 1000]:.3f} "
                            f"(drop {audio_drop:.3f}), concat {f1['concat', 16000]:.3f} -> "
                            f"{f1['concat', 1000]:.3f} (drop {multi_drop:.3f}), {len(SEEDS)} seeds")
    assert ok


def test_criterion_08_parameters(record_criterion):
    counts = {k: param_count(build_model(ModelSpec.reference(k))) for k in ("pure_acoustic", "cnn_attention")}
    fused = param_count(build_model(FusionSpec("concat", ModelSpec.reference("pure_acoustic"),
                                               ModelSpec.reference("cnn_attention"))))
    added = (fused - counts["pure_acoustic"]) / counts["pure_acoustic"]
    targets = {"cnn_attention": 2_800, "pure_acoustic": 763_200}
    within = all(abs(counts[k] - v) <= 0.2 * v for k, v in targets.items()) and abs(fused - 766_500) <= 0.2 * 766_500
    ok = added <= 0.01 and within
    record_criterion(8, ok, f"IMU {counts['cnn_attention']}, acoustic {counts['pure_acoustic']}, "
                            f"concat {fused} (+{added:.2%})")
    assert ok


@pytest.mark.slow
def test_criterion_09_optimization(record_criterion):
    segs = segments(0)
    folds = logo("concat", 0)
    tune = TrainConfig(seed=0, epochs=5, learning_rate=0.02)
    exact_half, optimized, tuned = True, [], []
    plan = dict(fold_plan(segs, "lab_logo"))
    for test, _, w in folds:
        q, _ = qat_finetune(w, segs.for_groups(plan[test]), tune, prune_fraction=0.5)
        tuned.append(q)
        for n in prunable(q):
            exact_half &= int((q.tensors[n] == 0).sum()) == q.tensors[n].size // 2
        te = segs.for_groups([test])
        preds = predict_proba(q, te).argmax(axis=1)
        optimized.append(macro_scores(confusion_matrix(preds, te.labels).counts)[0])
    f_float, f_opt = mean_f1(folds), float(np.mean(optimized))

    # size against the float32 serialization of the same fold's float model
    ratio = max(size_bytes(q) / size_bytes(w) for q, (_, _, w) in zip(tuned, folds))
    probe = segs.subset(np.arange(16))
    q = tuned[0]
    reproducible = np.array_equal(predict_proba(q, probe), predict_proba(q, probe))
    reproducible &= np.array_equal(predict_proba(load_model(serialize_model(q)), probe),
                                   predict_proba(load_model(serialize_model(q)), probe))

    ok = exact_half and f_opt >= f_float - 0.02 and ratio <= 0.30 and reproducible
    record_criterion(9, ok, f"50% zeros per layer {exact_half}, macro-F1 float {f_float:.3f} vs "
                            f"pruned+quantized {f_opt:.3f}, size {ratio:.1%} of float, bit-reproducible {reproducible}")
    assert ok


def test_criterion_10_real_data(record_criterion):
    root = os.environ.get("CONVSENSE_REAL_DATA")
    if not root:
        record_criterion(10, None, "optional real-data track; set CONVSENSE_REAL_DATA to the dataset root")
        pytest.skip("released dataset not available")
    sessions = [s for s in ingest_dataset(root) if s.setting == "lab"]
    published = {"audio": (0.744 - 0.033, 0.744 + 0.033), "concat": (0.820 - 0.030, 0.820 + 0.030)}
    specs = {"audio": ModelSpec.reference("pure_acoustic"),
             "concat": FusionSpec("concat", ModelSpec.reference("pure_acoustic"), ModelSpec.reference("cnn_attention"))}
    lines, ok = [], True
    for name, spec in specs.items():
        rep = run_logo(sessions, EvalConfig(spec))
        agg = rep.aggregate["macro_f1"]
        lo, hi = published[name]
        overlap = agg["ci_lo"] <= hi and agg["ci_hi"] >= lo
        ok &= overlap
        lines.append(f"{name} {agg['value']:.3f} [{agg['ci_lo']:.3f}, {agg['ci_hi']:.3f}]")
    record_criterion(10, ok, ", ".join(lines))
    assert ok
