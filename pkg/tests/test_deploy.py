import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from convsense.deploy import (
    MAGIC,
    SCALE_FLOOR,
    SerializationError,
    benchmark_inference,
    dequantize,
    load_model,
    prunable,
    prune_magnitude,
    qat_finetune,
    quantize_tensor,
    quantize_weights,
    read_meta,
    serialize_model,
    size_bytes,
    sparsity,
)
from convsense.fusion import FusionSpec
from convsense.models import ModelSpec, ModelWeights, TrainConfig, build_model, predict_proba


def weights(spec, seed=0):
    return ModelWeights.from_module(spec, build_model(spec, seed))


def logits(w, audio, imu, dtype=torch.float64):
    with torch.no_grad():
        a = None if audio is None else torch.as_tensor(audio, dtype=dtype)
        i = None if imu is None else torch.as_tensor(imu, dtype=dtype)
        return w.to_module(dtype)(a, i)[1].numpy()


@pytest.fixture(scope="module")
def probe():
    g = np.random.default_rng(0)
    return g.standard_normal((3, 128, 120)), g.random((3, 30, 6, 5))


class TestQuantize:
    def test_zeros(self):
        q, rec = quantize_tensor(np.zeros(10))
        assert (q == rec.zero_point).all()
        assert np.array_equal(dequantize(q, rec), np.zeros(10))

    def test_linspace_error_bound(self):
        x = np.linspace(-1, 1, 256)
        q, rec = quantize_tensor(x)
        assert q.dtype == np.int8
        assert np.abs(dequantize(q, rec) - x).max() <= rec.scale / 2 + 1e-12

    def test_constant(self):
        q, rec = quantize_tensor(np.full(7, 0.3))
        assert np.allclose(dequantize(q, rec), 0.3, atol=1e-6)
        q, rec = quantize_tensor(np.full(3, 2.5e-9))
        assert rec.scale == SCALE_FLOOR

    @given(arrays(np.float64, st.integers(1, 64), elements=st.floats(-1e3, 1e3)))
    @settings(max_examples=200, deadline=None)
    def test_error_bound_property(self, x):
        q, rec = quantize_tensor(x)
        assert -128 <= rec.zero_point <= 127
        assert np.all(np.abs(dequantize(q, rec) - x) <= rec.scale / 2 + 1e-12)

    def test_half_to_even(self):
        # with range [0, 255] the scale is 1 and zero point -128, so x/scale is exact
        x = np.array([0.0, 0.5, 1.5, 2.5, 255.0])
        q, rec = quantize_tensor(x)
        assert rec.scale == 1.0
        assert dequantize(q, rec).tolist() == [0.0, 0.0, 2.0, 2.0, 255.0]

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite(self, bad):
        with pytest.raises(ValueError):
            quantize_tensor(np.array([1.0, bad]))

    def test_quantize_weights_records_every_trainable(self):
        w = quantize_weights(weights(ModelSpec.compact("cnn_attention")))
        assert set(w.quant) == set(w.trainable)
        for n, rec in w.quant.items():
            levels = np.rint(w.tensors[n] / rec.scale) + rec.zero_point
            assert np.allclose(w.tensors[n], (levels - rec.zero_point) * rec.scale, atol=1e-15)


class TestPrune:
    def _single(self, values, fraction=0.5):
        w = ModelWeights(None, {"w": np.array(values, dtype=np.float64)}, ("w",))
        return prune_magnitude(w, fraction)

    def test_magnitude_order(self):
        out = self._single([[1.0, -2.0, 3.0, -4.0]])
        assert out.tensors["w"].tolist() == [[0.0, 0.0, 3.0, -4.0]]

    @pytest.mark.parametrize("fraction", [0.1, 0.5, 0.77])
    def test_exact_counts_every_layer(self, fraction):
        w = prune_magnitude(weights(ModelSpec.compact("pure_acoustic")), fraction)
        for n in prunable(w):
            t = w.tensors[n]
            assert (t == 0).sum() == int(np.floor(fraction * t.size)), n
            assert (w.masks[n] == 0).sum() == int(np.floor(fraction * t.size))

    def test_ties_count(self):
        out = self._single([[1.0, 1.0, 1.0, 1.0, 1.0]])
        assert (out.tensors["w"] == 0).sum() == 2

    def test_idempotent(self):
        w = prune_magnitude(weights(ModelSpec.compact("scnnb")), 0.5)
        again = prune_magnitude(w, 0.5)
        for n in prunable(w):
            assert np.array_equal(w.tensors[n], again.tensors[n])
            assert np.array_equal(w.masks[n], again.masks[n])

    def test_biases_untouched(self):
        w = weights(ModelSpec.compact("scnnb"))
        out = prune_magnitude(w, 0.5)
        for n in set(w.trainable) - set(prunable(w)):
            assert np.array_equal(w.tensors[n], out.tensors[n])
        assert all(v == pytest.approx(0.5, abs=0.02) for v in sparsity(out).values())

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
    def test_bad_fraction(self, fraction):
        with pytest.raises(ValueError):
            self._single([1.0, 2.0], fraction)


class TestQat:
    def test_masks_persist_and_deterministic(self, small_segments):
        spec = ModelSpec.compact("scnnb")
        cfg = TrainConfig(epochs=5, seed=2, learning_rate=0.05, early_stop_patience=10)
        a, _ = qat_finetune(weights(spec), small_segments, cfg, prune_fraction=0.5)
        b, _ = qat_finetune(weights(spec), small_segments, cfg, prune_fraction=0.5)
        for n in prunable(a):
            assert (a.tensors[n][a.masks[n] == 0] == 0).all(), n
        assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
        assert set(a.quant) == set(a.trainable)

    def test_zero_epochs_is_post_training_quantization(self, small_segments):
        w = weights(ModelSpec.compact("cnn_attention"), 4)
        out, _ = qat_finetune(w, small_segments, TrainConfig(epochs=0))
        ptq = quantize_weights(w)
        assert all(np.array_equal(out.tensors[k], ptq.tensors[k]) for k in w.tensors)


class TestSerialize:
    @pytest.mark.parametrize("kind", ["pure_acoustic", "scnnb", "cnn_attention"])
    def test_float_round_trip(self, kind, probe):
        w = weights(ModelSpec.compact(kind), 1)
        back = load_model(serialize_model(w))
        audio, imu = probe
        assert np.allclose(logits(back, audio, imu), logits(w, audio, imu), rtol=0, atol=1e-6)
        exact = load_model(serialize_model(w, float_dtype="float64"))
        assert np.array_equal(logits(exact, audio, imu), logits(w, audio, imu))

    def test_quantized_round_trip_bit_exact(self, probe):
        spec = FusionSpec("concat", ModelSpec.compact("pure_acoustic"), ModelSpec.compact("cnn_attention"))
        w = quantize_weights(prune_magnitude(weights(spec, 3), 0.5))
        back = load_model(serialize_model(w, float_dtype="float64"))
        for n in w.trainable:
            assert np.array_equal(back.tensors[n], w.tensors[n]), n
        assert set(back.masks) == set(w.masks) and back.quant == w.quant
        assert np.array_equal(logits(back, *probe), logits(w, *probe))
        # int8 storage makes the trainable tensors exact even with float32 buffers
        compact = load_model(serialize_model(w))
        assert all(np.array_equal(compact.tensors[n], w.tensors[n]) for n in w.trainable)

    def test_size_reduction(self):
        spec = FusionSpec("concat", ModelSpec.reference("pure_acoustic"), ModelSpec.reference("cnn_attention"))
        w = weights(spec)
        small = quantize_weights(prune_magnitude(w, 0.5))
        assert size_bytes(small) <= 0.30 * size_bytes(w)

    def test_empty_model(self):
        w = ModelWeights(None, {}, ())
        blob = serialize_model(w)
        assert blob.startswith(MAGIC)
        back = load_model(blob)
        assert back.tensors == {} and back.spec is None

    def test_meta(self):
        blob = serialize_model(ModelWeights(None, {}, ()), meta={"config_hash": "x1"})
        assert read_meta(blob) == {"config_hash": "x1"}

    def test_corrupt(self):
        blob = bytearray(serialize_model(weights(ModelSpec.compact("scnnb"))))
        with pytest.raises(SerializationError):
            load_model(b"nonsense")
        with pytest.raises(SerializationError):
            load_model(bytes(blob[:-10]))
        blob[len(blob) // 2] ^= 0xFF
        with pytest.raises(SerializationError, match="corrupt"):
            load_model(bytes(blob))


def test_benchmark(probe):
    audio, imu = probe
    spec = FusionSpec("concat", ModelSpec.compact("pure_acoustic"), ModelSpec.compact("scnnb"))
    w = weights(spec)
    b = benchmark_inference(w, audio[0], imu[0], n=10)
    assert len(b.times_ms) == 10 and b.deterministic
    assert min(b.times_ms) <= b.p50_ms <= b.p95_ms <= max(b.times_ms)
    q = benchmark_inference(quantize_weights(w), audio[0], imu[0], n=10)
    # host dependent, so only reported
    print(f"float {b.mean_ms:.2f} ms, quantized {q.mean_ms:.2f} ms")


def test_quantized_predictions_stable(small_segments):
    w = quantize_weights(weights(ModelSpec.compact("scnnb"), 5))
    p1 = predict_proba(w, small_segments.subset(np.arange(8)))
    p2 = predict_proba(w, small_segments.subset(np.arange(8)))
    assert np.array_equal(p1, p2)
