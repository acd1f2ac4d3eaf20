"""Metrics, bootstrap intervals, leave-one-group-out evaluation and sensitivity sweeps."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import CONTEXTS, Session
from .models import N_CLASSES, ModelError, ModelSpec, TrainConfig, predict_proba, train
from .preprocess import PreprocessConfig, SegmentSet, preprocess_sessions
from .seeding import rng

log = logging.getLogger(__name__)

SETUPS = ("lab_logo", "lab_sn_logo", "sn_holdout")
CSV_FIELDS = ("setup", "model", "fusion", "rate", "window", "context", "metric", "value",
              "ci_lo", "ci_hi")


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # counts[true, pred]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self) -> list[list[int]]:
        return self.counts.astype(int).tolist()


def confusion_matrix(preds, labels, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    p = np.asarray(preds).ravel().astype(np.int64)
    t = np.asarray(labels).ravel().astype(np.int64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    for name, v in (("prediction", p), ("label", t)):
        if v.size and (v.min() < 0 or v.max() >= n_classes):
            raise ValueError(f"{name} outside 0..{n_classes - 1}")
    counts = np.bincount(t * n_classes + p, minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes))


def _counts(cm) -> np.ndarray:
    c = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)
    if c.sum() <= 0:
        raise ValueError("empty confusion matrix")
    return c


def _ratio(num, den):
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class_scores(cm) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(precision, recall, f1) per class; a zero denominator scores 0."""
    c = _counts(cm)
    tp = np.diag(c)
    precision = _ratio(tp, c.sum(axis=0))
    recall = _ratio(tp, c.sum(axis=1))
    f1 = _ratio(2 * precision * recall, precision + recall)
    return precision, recall, f1


def macro_scores(cm) -> tuple[float, float, float]:
    """(macro F1, macro precision, macro recall), unweighted over all classes."""
    p, r, f = per_class_scores(cm)
    return float(f.mean()), float(p.mean()), float(r.mean())


def weighted_f1(cm) -> float:
    c = _counts(cm)
    _, _, f = per_class_scores(c)
    return float((f * c.sum(axis=1)).sum() / c.sum())


def accuracy(cm) -> float:
    c = _counts(cm)
    return float(np.trace(c) / c.sum())


METRICS: dict[str, Callable] = {
    "macro_f1": lambda cm: macro_scores(cm)[0],
    "weighted_f1": weighted_f1,
    "macro_precision": lambda cm: macro_scores(cm)[1],
    "macro_recall": lambda cm: macro_scores(cm)[2],
    "accuracy": accuracy,
}


def _metric_fn(metric) -> Callable:
    if callable(metric):
        return metric
    try:
        return METRICS[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}; choose from {sorted(METRICS)}") from None


def bootstrap_ci(preds, labels, metric="macro_f1", rounds: int = 200, seed: int = 0,
                 level: float = 0.95, max_redraws: int = 1000) -> tuple[float, float]:
    """Percentile bootstrap interval of ``metric`` over resampled segments.

    ``metric`` is a name from METRICS or a callable on a ConfusionMatrix. A
    resample on which the metric is undefined (raises or is not finite) is
    redrawn.
    """
    p = np.asarray(preds).ravel()
    t = np.asarray(labels).ravel()
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} vs {t.size}")
    if p.size == 0:
        raise ValueError("bootstrap needs at least one sample")
    fn = _metric_fn(metric)
    g = rng(seed, "bootstrap")
    values = []
    redraws = 0
    while len(values) < rounds:
        idx = g.integers(0, p.size, p.size)
        try:
            v = float(fn(confusion_matrix(p[idx], t[idx])))
        except (ValueError, ZeroDivisionError):
            v = float("nan")
        if not np.isfinite(v):
            redraws += 1
            if redraws > max_redraws:
                raise ValueError("metric undefined on too many bootstrap resamples")
            continue
        values.append(v)
    if redraws:
        log.info("bootstrap redrew %d undefined resamples", redraws)
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(values, [tail, 100 - tail])
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# leave-one-group-out


@dataclass
class EvalConfig:
    model: object  # ModelSpec | FusionSpec
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    setup: str = "lab_logo"
    bootstrap_rounds: int = 200
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.setup not in SETUPS:
            raise ValueError(f"setup must be one of {SETUPS}, got {self.setup!r}")


@dataclass
class FoldResult:
    group_id: str
    setting: str
    metrics: dict[str, float]
    confusion: list[list[int]]
    preds: np.ndarray
    labels: np.ndarray
    contexts: list[tuple[str, ...]]
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "setting": self.setting,
            "metrics": self.metrics,
            "confusion": self.confusion,
            "preds": self.preds.tolist(),
            "labels": self.labels.tolist(),
            "contexts": [list(c) for c in self.contexts],
            "best_epoch": self.best_epoch,
        }


@dataclass
class EvalReport:
    setup: str
    model: str
    fusion: str
    rate: int
    window: float
    imu_frame: float
    folds: list[FoldResult]
    aggregate: dict[str, dict[str, float]]
    contexts: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)

    @property
    def macro_f1(self) -> float:
        return self.aggregate["macro_f1"]["value"]

    def pooled(self) -> tuple[np.ndarray, np.ndarray, list[tuple[str, ...]]]:
        preds = np.concatenate([f.preds for f in self.folds]) if self.folds else np.zeros(0, int)
        labels = np.concatenate([f.labels for f in self.folds]) if self.folds else np.zeros(0, int)
        return preds, labels, [c for f in self.folds for c in f.contexts]

    def rows(self) -> list[dict]:
        base = {"setup": self.setup, "model": self.model, "fusion": self.fusion,
                "rate": self.rate, "window": self.window}
        out = []
        for ctx, metrics in [("all", self.aggregate), *self.contexts.items()]:
            for m, v in metrics.items():
                out.append({**base, "context": ctx, "metric": m, "value": v["value"],
                            "ci_lo": v.get("ci_lo", ""), "ci_hi": v.get("ci_hi", "")})
        return out

    def to_dict(self) -> dict:
        return {
            "setup": self.setup,
            "model": self.model,
            "fusion": self.fusion,
            "rate": self.rate,
            "window": self.window,
            "imu_frame": self.imu_frame,
            "aggregate": self.aggregate,
            "contexts": self.contexts,
            "folds": [f.to_dict() for f in self.folds],
        }


def model_names(spec) -> tuple[str, str]:
    """(model, fusion) labels used in reports."""
    if isinstance(spec, ModelSpec):
        return spec.kind, "none"
    return f"{spec.audio_branch.kind}+{spec.imu_branch.kind}", spec.strategy


def fold_plan(segs: SegmentSet, setup: str) -> list[tuple[str, list[str]]]:
    """[(test group, train groups)] for one evaluation setup."""
    groups = segs.group_ids
    lab = [g for g in groups if segs.group_setting(g) == "lab"]
    sn = [g for g in groups if segs.group_setting(g) == "semi_naturalistic"]
    if setup == "lab_logo":
        pool = lab
        plan = [(g, [h for h in pool if h != g]) for g in pool]
    elif setup == "lab_sn_logo":
        plan = [(g, [h for h in groups if h != g]) for g in groups]
    else:
        if not sn:
            raise ValueError("sn_holdout: no semi_naturalistic sessions in the data")
        plan = [(g, list(lab)) for g in sn]
    if len(plan) < 1 or any(len(tr) < 1 for _, tr in plan):
        raise ValueError(f"setup {setup!r} needs at least 2 groups, found {len(groups)}")
    return plan


def _fold_metrics(preds, labels) -> tuple[dict[str, float], ConfusionMatrix]:
    cm = confusion_matrix(preds, labels)
    return {m: fn(cm) for m, fn in METRICS.items()}, cm


def _run_fold(segs: SegmentSet, test_group: str, train_groups: list[str], cfg: EvalConfig):
    tr = segs.for_groups(train_groups)
    te = segs.for_groups([test_group])
    overlap = set(tr.groups.tolist()) & set(te.groups.tolist())
    assert not overlap, f"group leakage between train and test: {overlap}"
    try:
        w, tlog = train(cfg.model, tr, cfg.train)
    except ModelError as e:
        raise ModelError(f"fold {test_group}: {e}") from e
    preds = predict_proba(w, te).argmax(axis=1)
    metrics, cm = _fold_metrics(preds, te.labels)
    log.info("fold %s macro-F1 %.3f", test_group, metrics["macro_f1"])
    return FoldResult(test_group, te.group_setting(test_group), metrics, cm.to_list(), preds,
                      te.labels.copy(), list(te.contexts), tlog.best_epoch)


def summarize(folds: Sequence[FoldResult], rounds: int, seed: int) -> dict[str, dict[str, float]]:
    """Fold-mean of every metric, with a bootstrap interval over pooled test segments."""
    preds = np.concatenate([f.preds for f in folds])
    labels = np.concatenate([f.labels for f in folds])
    out = {}
    for m in METRICS:
        vals = [f.metrics[m] for f in folds]
        lo, hi = bootstrap_ci(preds, labels, m, rounds, seed)
        out[m] = {"value": float(np.mean(vals)), "std": float(np.std(vals)),
                  "ci_lo": lo, "ci_hi": hi}
    return out


def run_logo_segments(segs: SegmentSet, cfg: EvalConfig) -> EvalReport:
    """Leave-one-group-out evaluation on already preprocessed segments."""
    plan = fold_plan(segs, cfg.setup)
    if cfg.jobs > 1 and len(plan) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            futs = [ex.submit(_run_fold, segs, g, tr, cfg) for g, tr in plan]
            folds = [f.result() for f in futs]
    else:
        folds = [_run_fold(segs, g, tr, cfg) for g, tr in plan]
    model, fusion = model_names(cfg.model)
    pc = cfg.preprocess
    return EvalReport(cfg.setup, model, fusion, pc.audio_rate_hz, pc.window_len_s, pc.imu_frame_s,
                      folds, summarize(folds, cfg.bootstrap_rounds, cfg.seed))


def run_logo(sessions: Sequence[Session], cfg: EvalConfig, cache=None,
             dataset_key: str | None = None) -> EvalReport:
    """Preprocess ``sessions`` and evaluate ``cfg.model`` with one fold per held-out group."""
    if len(sessions) < 2:
        raise ValueError("run_logo needs at least 2 sessions")
    segs = preprocess_sessions(sessions, cfg.preprocess, cache, dataset_key)
    return run_logo_segments(segs, cfg)


# ---------------------------------------------------------------------------
# sweeps


def sweep_window(sessions, cfg: EvalConfig, lengths=(10, 20, 30), **kw) -> list[EvalReport]:
    """Re-segment and re-label at each window length, then rerun LOGO."""
    return [
        run_logo(sessions, replace(cfg, preprocess=replace(cfg.preprocess, window_len_s=float(n))), **kw)
        for n in lengths
    ]


def sweep_imu_frame(sessions, cfg: EvalConfig, frames=tuple(range(1, 11)), **kw) -> list[EvalReport]:
    out = []
    for f in frames:
        if f > cfg.preprocess.window_len_s:
            raise ValueError(f"IMU frame {f} s is longer than the {cfg.preprocess.window_len_s} s window")
        pc = replace(cfg.preprocess, imu_frame_s=float(f))
        out.append(run_logo(sessions, replace(cfg, preprocess=pc), **kw))
    return out


def sweep_sampling_rate(sessions, cfgs: Sequence[EvalConfig], rates=(16000, 2000, 1000),
                        **kw) -> list[EvalReport]:
    """One report per (model configuration, audio rate)."""
    return [
        run_logo(sessions, replace(c, preprocess=replace(c.preprocess, audio_rate_hz=int(r))), **kw)
        for c in cfgs
        for r in rates
    ]


def context_scores(report: EvalReport, tags: Sequence[str] = CONTEXTS) -> dict:
    """Macro and weighted F1 over the pooled LOGO predictions bearing each context tag."""
    unknown = [t for t in tags if t not in CONTEXTS]
    if unknown:
        raise ValueError(f"unknown context tags {unknown}; known: {CONTEXTS}")
    preds, labels, contexts = report.pooled()
    out = {}
    for tag in tags:
        mask = np.array([tag in c for c in contexts], dtype=bool)
        if not mask.any():
            log.warning("context %s has no segments; omitted", tag)
            continue
        cm = confusion_matrix(preds[mask], labels[mask])
        out[tag] = {
            "macro_f1": {"value": macro_scores(cm)[0]},
            "weighted_f1": {"value": weighted_f1(cm)},
            "n_segments": {"value": int(mask.sum())},
        }
    return out


def eval_by_context(sessions_or_report, cfg: EvalConfig | None = None,
                    tags: Sequence[str] = CONTEXTS, **kw) -> EvalReport:
    """LOGO-evaluate (unless a report is given) and attach per-context scores."""
    if isinstance(sessions_or_report, EvalReport):
        report = sessions_or_report
    else:
        if cfg is None:
            raise ValueError("cfg is required when evaluating sessions")
        report = run_logo(sessions_or_report, cfg, **kw)
    report.contexts = context_scores(report, tags)
    return report


# ---------------------------------------------------------------------------
# report files


def write_reports(reports: Sequence[EvalReport], out_dir, config_hash: str,
                  extra: dict | None = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = {"config_hash": config_hash, "reports": [r.to_dict() for r in reports], **(extra or {})}
    jpath = out / "report.json"
    jpath.write_text(json.dumps(body, indent=1))
    cpath = out / "report.csv"
    write_csv([row for r in reports for row in r.rows()], cpath, config_hash)
    return jpath, cpath


def write_csv(rows: Sequence[dict], path, config_hash: str) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash}\n")
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in CSV_FIELDS})
    return path


def rows_from_json(body: dict) -> list[dict]:
    """Flat CSV rows from a parsed report.json."""
    rows = []
    for r in body.get("reports", []):
        base = {k: r[k] for k in ("setup", "model", "fusion", "rate", "window")}
        for ctx, metrics in [("all", r["aggregate"]), *r.get("contexts", {}).items()]:
            for m, v in metrics.items():
                rows.append({**base, "context": ctx, "metric": m, "value": v["value"],
                             "ci_lo": v.get("ci_lo", ""), "ci_hi": v.get("ci_hi", "")})
    return rows
