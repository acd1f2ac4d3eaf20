"""Prune half of every weight tensor, fine-tune with fake quantization, compare.

    python demos/optimize_model.py

Trains one concat-fusion model on three synthetic groups and tests on the fourth.
"""

import numpy as np
import torch

from convsense.dataset import SynthSpec, synth_dataset
from convsense.deploy import benchmark_inference, qat_finetune, serialize_model, sparsity
from convsense.evaluation import confusion_matrix, macro_scores
from convsense.fusion import FusionSpec
from convsense.models import ModelSpec, TrainConfig, predict_proba, train
from convsense.preprocess import preprocess_sessions

torch.set_num_threads(1)

segs = preprocess_sessions(synth_dataset(SynthSpec(n_groups=4, session_len_s=300, seed=3)))
train_set, test_set = segs.for_groups(segs.group_ids[:3]), segs.for_groups(segs.group_ids[3:])

spec = FusionSpec("concat", ModelSpec.compact("pure_acoustic"), ModelSpec.compact("cnn_attention"))
w, log = train(spec, train_set, TrainConfig(epochs=25, seed=3))
q, _ = qat_finetune(w, train_set, TrainConfig(epochs=5, learning_rate=0.02, seed=3), prune_fraction=0.5)


def f1(model):
    preds = predict_proba(model, test_set).argmax(axis=1)
    return macro_scores(confusion_matrix(preds, test_set.labels))[0]


print(f"trained {len(log.train_loss)} epochs, best {log.best_epoch}")
print(f"macro-F1   float {f1(w):.3f}   pruned+int8 {f1(q):.3f}")
print(f"size       float32 {len(serialize_model(w)) / 1024:.1f} kB   "
      f"optimized {len(serialize_model(q)) / 1024:.1f} kB")
print("zeros per layer:", {k: round(v, 3) for k, v in list(sparsity(q).items())[:4]}, "...")
fb = benchmark_inference(w, test_set.audio[0], test_set.imu[0])
qb = benchmark_inference(q, test_set.audio[0], test_set.imu[0])
print(f"latency    float {fb.mean_ms:.1f} ms   optimized {qb.mean_ms:.1f} ms (host CPU, 10 runs)")
