"""Command-line pipeline: synth, preprocess, train, eval, sweep, optimize, report.

Every stage reads one JSON config (``--config``), with ``--seed``, ``--jobs``,
``--out`` and ``--force`` overriding it, and writes artifacts that carry the
config hash. Stages refuse to consume artifacts written under another hash.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import deploy, dsp, evaluation
from .dataset import (CLASS_NAMES, DatasetError, SynthSpec, aggregate_labels, export_session,
                      ingest_dataset, synth_dataset)
from .fusion import STRATEGIES, FusionSpec
from .models import KINDS, ModelError, ModelSpec, TrainConfig, predict_proba, train
from .preprocess import PreprocessConfig, SegmentSet, cache_dir, preprocess_sessions

log = logging.getLogger("convsense")

SWEEPS = ("window", "imu_frame", "rate", "context")
DEFAULT_MODELS = ("pure_acoustic", "cnn_attention", "concat:cnn_attention")


class PipelineError(Exception):
    """A user-facing failure: bad config, missing or stale artifacts."""


@dataclass
class PipelineConfig:
    dataset_path: str | None = None
    synth: dict = field(default_factory=dict)
    window_len_s: float = 30.0
    imu_frame_s: float = 2.0
    audio_rate_hz: int = 16000
    models: list = field(default_factory=lambda: list(DEFAULT_MODELS))
    model_size: str = "compact"
    train: dict = field(default_factory=dict)
    setup: str = "lab_logo"
    bootstrap_rounds: int = 200
    seed: int = 0
    out_dir: str = "runs"
    sweep: dict = field(default_factory=dict)
    optimize: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            self.synth_spec()
            self.train_config()
            self.preprocess_config()
            for m in self.models:
                parse_model(m, self.model_size)
        except (ValueError, ModelError, TypeError) as e:
            raise PipelineError(f"invalid config: {e}") from None
        if self.setup not in evaluation.SETUPS:
            raise PipelineError(f"setup must be one of {evaluation.SETUPS}, got {self.setup!r}")
        if not self.models:
            raise PipelineError("config lists no models")

    @classmethod
    def load(cls, path: str | Path | None, **overrides) -> "PipelineConfig":
        data = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise PipelineError(f"config file {path} not found") from None
            except json.JSONDecodeError as e:
                raise PipelineError(f"config file {path} is not valid JSON: {e}") from None
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise PipelineError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.__dict__)

    def synth_spec(self) -> SynthSpec:
        kw = dict(self.synth)
        kw.setdefault("seed", self.seed)
        if "class_mix" in kw:
            kw["class_mix"] = tuple(kw["class_mix"])
        return SynthSpec(**kw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train})

    def preprocess_config(self, **kw) -> PreprocessConfig:
        base = PreprocessConfig(self.window_len_s, self.imu_frame_s, self.audio_rate_hz)
        return replace(base, **kw)

    def eval_config(self, model: str, **pre) -> evaluation.EvalConfig:
        return evaluation.EvalConfig(
            parse_model(model, self.model_size), self.preprocess_config(**pre),
            self.train_config(), self.setup, self.bootstrap_rounds, self.seed,
        )

    # hashes: each stage is keyed by everything upstream of it
    def dataset_hash(self) -> str:
        src = {"path": self.dataset_path} if self.dataset_path else {"synth": self.synth_spec().to_dict()}
        return dsp.config_hash(src)

    def preprocess_hash(self) -> str:
        return dsp.config_hash({"dataset": self.dataset_hash(), **self.preprocess_config().to_dict()})

    def full_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return dsp.config_hash(d)


def parse_model(name: str, size: str = "compact"):
    """``kind`` or ``strategy:imu_kind`` to a ModelSpec / FusionSpec."""
    if size not in ("compact", "reference"):
        raise ModelError(f"model_size must be compact or reference, got {size!r}")
    make = getattr(ModelSpec, size)
    if ":" in name:
        strategy, imu = name.split(":", 1)
        if strategy not in STRATEGIES:
            raise ModelError(f"unknown fusion strategy {strategy!r} in {name!r}")
        return FusionSpec(strategy, make("pure_acoustic"), make(imu))
    if name not in KINDS:
        raise ModelError(f"unknown model {name!r}; choose from {KINDS} or strategy:imu_kind")
    return make(name)


def model_slug(name: str) -> str:
    return name.replace(":", "-")


# ---------------------------------------------------------------------------
# artifacts


def _write_json(path: Path, body: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(body, indent=1, default=str))
    return path


def _read_manifest(path: Path, prerequisite: str) -> dict:
    if not path.is_file():
        raise PipelineError(f"missing {path}; run `convsense {prerequisite}` first")
    return json.loads(path.read_text())


def _check_hash(manifest: dict, key: str, expected: str, what: str, prerequisite: str):
    found = manifest.get(key)
    if found != expected:
        raise PipelineError(
            f"stale {what}: written with config hash {found}, current config hash is {expected}; "
            f"rerun `convsense {prerequisite}` (with --force if needed)"
        )


def load_sessions(cfg: PipelineConfig):
    out = Path(cfg.out_dir)
    if cfg.dataset_path:
        return ingest_dataset(cfg.dataset_path)
    man = _read_manifest(out / "dataset" / "manifest.json", "synth")
    _check_hash(man, "dataset_hash", cfg.dataset_hash(), "synthetic dataset", "synth")
    return ingest_dataset(out / "dataset")


def load_segments(cfg: PipelineConfig, **pre) -> SegmentSet:
    """Segments for the configured preprocessing (or an override used by sweeps)."""
    out = Path(cfg.out_dir)
    man = _read_manifest(out / "preprocess.json", "preprocess")
    _check_hash(man, "preprocess_hash", cfg.preprocess_hash(), "preprocessed tensors", "preprocess")
    cache = Path(man["cache"])
    if not pre:
        path = Path(man["segments"])
        if not path.with_suffix(".json").is_file():
            raise PipelineError(f"preprocessed tensors {path} are gone; rerun `convsense preprocess`")
        return SegmentSet.load(path)[0]
    return preprocess_sessions(load_sessions(cfg), cfg.preprocess_config(**pre), cache,
                               cfg.dataset_hash())


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: PipelineConfig, force: bool = False) -> int:
    if cfg.dataset_path:
        raise PipelineError("config sets dataset_path; synth only writes synthetic datasets")
    root = Path(cfg.out_dir) / "dataset"
    if root.exists() and any(root.iterdir()):
        if not force:
            raise PipelineError(f"{root} exists and is not empty; pass --force to overwrite")
        for p in sorted(root.rglob("*"), reverse=True):
            p.unlink() if p.is_file() else p.rmdir()
    spec = cfg.synth_spec()
    counts = np.zeros(len(CLASS_NAMES), dtype=int)
    for s in synth_dataset(spec):
        export_session(s, root / s.group_id)
        labels = aggregate_labels(s.annotations, cfg.window_len_s, s.duration_s)
        counts += np.bincount([int(c) for _, c in labels], minlength=len(CLASS_NAMES))
        log.info("wrote %s", s.group_id)
    _write_json(root / "manifest.json", {
        "dataset_hash": cfg.dataset_hash(), "config_hash": cfg.full_hash(),
        "synth": spec.to_dict(), "segment_counts": dict(zip(CLASS_NAMES, counts.tolist())),
    })
    total = max(1, counts.sum())
    for name, c in zip(CLASS_NAMES, counts):
        print(f"{name}: {c} segments ({c / total:.1%})")
    return 0


def cmd_preprocess(cfg: PipelineConfig) -> int:
    sessions = load_sessions(cfg)
    cache = cache_dir(Path(cfg.out_dir) / "cache")
    segs = preprocess_sessions(sessions, cfg.preprocess_config(), cache, cfg.dataset_hash())
    path = cache / f"segments-{cfg.preprocess_hash()}"
    _write_json(Path(cfg.out_dir) / "preprocess.json", {
        "preprocess_hash": cfg.preprocess_hash(), "config_hash": cfg.full_hash(),
        "cache": str(cache), "segments": str(path), "n_segments": len(segs),
        "audio_shape": list(segs.audio.shape[1:]), "imu_shape": list(segs.imu.shape[1:]),
    })
    print(f"{len(segs)} segments, audio {segs.audio.shape[1:]}, imu {segs.imu.shape[1:]}")
    return 0


def _split_for_training(cfg: PipelineConfig, segs: SegmentSet) -> tuple[list[str], list[str]]:
    """(train groups, test groups) for final models: the last group of the setup's pool is held out."""
    plan = evaluation.fold_plan(segs, cfg.setup)
    test, train_groups = plan[-1]
    return train_groups, [test]


def cmd_train(cfg: PipelineConfig) -> int:
    segs = load_segments(cfg)
    train_groups, test_groups = _split_for_training(cfg, segs)
    tr = segs.for_groups(train_groups)
    out = Path(cfg.out_dir) / "models"
    out.mkdir(parents=True, exist_ok=True)
    for name in cfg.models:
        spec = parse_model(name, cfg.model_size)
        w, tlog = train(spec, tr, cfg.train_config())
        meta = {"config_hash": cfg.full_hash(), "model": name, "train_groups": train_groups,
                "test_groups": test_groups, "best_epoch": tlog.best_epoch,
                "train_loss": tlog.train_loss, "holdout_loss": tlog.holdout_loss}
        path = out / f"{model_slug(name)}.ckpt"
        path.write_bytes(deploy.serialize_model(w, "float64", meta))
        print(f"{name}: best epoch {tlog.best_epoch}, wrote {path}")
    return 0


def cmd_eval(cfg: PipelineConfig, jobs: int = 1) -> int:
    segs = load_segments(cfg)
    reports = []
    for name in cfg.models:
        ec = replace(cfg.eval_config(name), jobs=jobs)
        rep = evaluation.eval_by_context(evaluation.run_logo_segments(segs, ec))
        reports.append(rep)
        agg = rep.aggregate["macro_f1"]
        print(f"{name}: macro-F1 {agg['value']:.3f} [{agg['ci_lo']:.3f}, {agg['ci_hi']:.3f}] "
              f"over {len(rep.folds)} folds")
    evaluation.write_reports(reports, cfg.out_dir, cfg.full_hash(), {"config": cfg.to_dict()})
    return 0


def cmd_sweep(cfg: PipelineConfig, kind: str | None = None, jobs: int = 1) -> int:
    kind = kind or cfg.sweep.get("kind", "window")
    if kind not in SWEEPS:
        raise PipelineError(f"sweep kind must be one of {SWEEPS}, got {kind!r}")
    defaults = {"window": [10, 20, 30], "imu_frame": list(range(1, 11)),
                "rate": [16000, 2000, 1000]}
    values = cfg.sweep.get("values", defaults.get(kind, []))
    key = {"window": "window_len_s", "imu_frame": "imu_frame_s", "rate": "audio_rate_hz"}.get(kind)
    reports = []
    for name in cfg.models:
        spec = parse_model(name, cfg.model_size)
        if kind == "imu_frame" and not spec.uses_imu:
            continue
        if kind == "context":
            settings = [{}]
        else:
            settings = [{key: (int(v) if kind == "rate" else float(v))} for v in values]
        for pre in settings:
            if kind == "imu_frame" and pre[key] > cfg.window_len_s:
                raise PipelineError(f"IMU frame {pre[key]} s is longer than the window")
            segs = load_segments(cfg, **pre) if pre and pre[key] != getattr(cfg, key) else load_segments(cfg)
            ec = replace(cfg.eval_config(name, **pre), jobs=jobs)
            rep = evaluation.run_logo_segments(segs, ec)
            if kind == "context":
                rep = evaluation.eval_by_context(rep)
            reports.append(rep)
            print(f"{name} {pre or 'contexts'}: macro-F1 {rep.macro_f1:.3f}")
    evaluation.write_reports(reports, Path(cfg.out_dir) / "sweeps" / kind, cfg.full_hash(),
                             {"config": cfg.to_dict(), "sweep": kind})
    return 0


def _f1_on(w, segs) -> float:
    preds = predict_proba(w, segs).argmax(axis=1)
    return evaluation.macro_scores(evaluation.confusion_matrix(preds, segs.labels))[0]


def cmd_optimize(cfg: PipelineConfig, model: str | None = None, quantize: bool = False,
                 prune: float | None = None, finetune_epochs: int | None = None) -> int:
    opt = cfg.optimize
    model = model or opt.get("model") or next(
        (m for m in cfg.models if ":" in m), cfg.models[0])
    quantize = quantize or opt.get("quantize", False)
    prune = prune if prune is not None else opt.get("prune")
    epochs = finetune_epochs if finetune_epochs is not None else opt.get("finetune_epochs", 0)
    ckpt = Path(cfg.out_dir) / "models" / f"{model_slug(model)}.ckpt"
    if not ckpt.is_file():
        raise PipelineError(f"missing {ckpt}; run `convsense train` first")
    blob = ckpt.read_bytes()
    meta = deploy.read_meta(blob)
    _check_hash(meta, "config_hash", cfg.full_hash(), "checkpoint", "train")
    w = deploy.load_model(blob)
    segs = load_segments(cfg)
    tr, te = segs.for_groups(meta["train_groups"]), segs.for_groups(meta["test_groups"])

    tcfg = replace(cfg.train_config(), epochs=int(epochs),
                   learning_rate=float(opt.get("learning_rate", cfg.train_config().learning_rate / 5)))
    if quantize:
        optimized, _ = deploy.qat_finetune(w, tr, tcfg, prune)
    else:
        optimized = deploy.prune_magnitude(w, prune) if prune else w.copy()
        if epochs:
            optimized, _ = train(optimized.spec, tr, tcfg, module=optimized.to_module(),
                                 masks=optimized.masks or None)
            optimized.masks = deploy.prune_magnitude(w, prune).masks if prune else {}

    out = Path(cfg.out_dir)
    body = deploy.serialize_model(optimized, "float32", {**meta, "optimized": True})
    (out / "optimized.ckpt").write_bytes(body)
    probe_a, probe_i = te.audio[0], te.imu[0]
    report = {
        "config_hash": cfg.full_hash(),
        "model": model,
        "quantize": bool(quantize),
        "prune": prune,
        "finetune_epochs": int(epochs),
        "test_groups": meta["test_groups"],
        "size_bytes": {"float": deploy.size_bytes(w, "float32"), "optimized": len(body)},
        "macro_f1": {"float": _f1_on(w, te), "optimized": _f1_on(optimized, te)},
        "sparsity": deploy.sparsity(optimized),
        "latency_ms": {
            "float": deploy.benchmark_inference(w, probe_a, probe_i).to_dict(),
            "optimized": deploy.benchmark_inference(optimized, probe_a, probe_i).to_dict(),
        },
    }
    _write_json(out / "optimize_report.json", report)
    s, f = report["size_bytes"], report["macro_f1"]
    print(f"{model}: size {s['float']} -> {s['optimized']} bytes, "
          f"macro-F1 {f['float']:.3f} -> {f['optimized']:.3f}")
    return 0


def cmd_report(cfg: PipelineConfig) -> int:
    out = Path(cfg.out_dir)
    files = sorted(p for p in out.rglob("report.json"))
    if not files:
        raise PipelineError(f"no report.json under {out}; run `convsense eval` or `convsense sweep` first")
    expected = cfg.full_hash()
    rows = []
    for p in files:
        body = json.loads(p.read_text())
        if body.get("config_hash") != expected:
            raise PipelineError(
                f"{p} was written with config hash {body.get('config_hash')}, expected {expected}; "
                "rerun it or remove it before aggregating"
            )
        rows.extend(evaluation.rows_from_json(body))
    path = evaluation.write_csv(rows, out / "report.csv", expected)
    print(f"{len(rows)} rows from {len(files)} reports -> {path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--seed", type=int, help="top-level seed (overrides config)")
    common.add_argument("--jobs", type=int, default=1, help="folds evaluated in parallel")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--out", help="output directory (overrides config out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="convsense", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    sub.add_parser("preprocess", parents=[common], help="build segment tensors")
    sub.add_parser("train", parents=[common], help="train the configured models")
    ev = sub.add_parser("eval", parents=[common], help="leave-one-group-out evaluation")
    ev.add_argument("--setup", choices=evaluation.SETUPS)
    sw = sub.add_parser("sweep", parents=[common], help="sensitivity sweep")
    sw.add_argument("--kind", choices=SWEEPS)
    sw.add_argument("--setup", choices=evaluation.SETUPS)
    op = sub.add_parser("optimize", parents=[common], help="prune / quantize a trained model")
    op.add_argument("--model", help="model name as listed in the config")
    op.add_argument("--quantize", action="store_true")
    op.add_argument("--prune", type=float)
    op.add_argument("--finetune-epochs", type=int)
    sub.add_parser("report", parents=[common], help="aggregate report.json files into report.csv")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config, seed=args.seed, out_dir=args.out,
                                  setup=getattr(args, "setup", None))
        if args.command == "synth":
            return cmd_synth(cfg, args.force)
        if args.command == "preprocess":
            return cmd_preprocess(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.jobs)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.kind, args.jobs)
        if args.command == "optimize":
            return cmd_optimize(cfg, args.model, args.quantize, args.prune, args.finetune_epochs)
        return cmd_report(cfg)
    except (PipelineError, DatasetError, ModelError, ValueError) as e:
        print(f"convsense {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
