"""8-bit quantization, magnitude pruning, compact serialization and latency benchmarks."""

from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .models import ModelWeights, QuantRecord, TrainConfig, train
from .fusion import spec_from_dict

SCALE_FLOOR = 1e-8
QMIN, QMAX = -128, 127
MAGIC = b"CVSNMDL1"


class SerializationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# quantization


def _qparams(lo: float, hi: float) -> tuple[float, int]:
    # range always contains 0 so that zero (and pruned entries) is exactly representable
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = max((hi - lo) / (QMAX - QMIN), SCALE_FLOOR)
    zp = int(np.clip(np.rint(QMIN - lo / scale), QMIN, QMAX))
    return float(scale), zp


def quantize_tensor(t) -> tuple[np.ndarray, QuantRecord]:
    """Asymmetric per-tensor int8 quantization with round-half-to-even."""
    x = np.asarray(t, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("cannot quantize a tensor containing NaN or Inf")
    if x.size == 0:
        return np.zeros(x.shape, dtype=np.int8), QuantRecord(SCALE_FLOOR, 0)
    scale, zp = _qparams(float(x.min()), float(x.max()))
    q = np.clip(np.rint(x / scale) + zp, QMIN, QMAX).astype(np.int8)
    return q, QuantRecord(scale, zp)


def dequantize(q, rec: QuantRecord) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) - rec.zero_point) * rec.scale


def fake_quantize(t: torch.Tensor) -> torch.Tensor:
    """quantize then dequantize, in torch (no gradient through the rounding)."""
    with torch.no_grad():
        scale, zp = _qparams(float(t.min()), float(t.max())) if t.numel() else (SCALE_FLOOR, 0)
        q = torch.clamp(torch.round(t / scale) + zp, QMIN, QMAX)
        return (q - zp) * scale


def quantizable(w: ModelWeights) -> list[str]:
    """Names of the trainable float tensors (weights and biases)."""
    return [n for n in w.trainable if np.issubdtype(np.asarray(w.tensors[n]).dtype, np.floating)]


def quantize_weights(w: ModelWeights) -> ModelWeights:
    """Replace every trainable tensor by its dequantized int8 value and record the scales."""
    out = w.copy()
    for n in quantizable(w):
        q, rec = quantize_tensor(out.tensors[n])
        out.tensors[n] = dequantize(q, rec)
        out.quant[n] = rec
    return out


# ---------------------------------------------------------------------------
# pruning


def prunable(w: ModelWeights) -> list[str]:
    """Weight tensors (two or more dimensions) among the trainable ones."""
    return [n for n in w.trainable if np.asarray(w.tensors[n]).ndim >= 2]


def prune_magnitude(w: ModelWeights, fraction: float = 0.5) -> ModelWeights:
    """Zero the floor(fraction * n) smallest-magnitude entries of each weight tensor.

    Entries masked by an earlier call are preferred on ties, so repeating the
    call at the same fraction is a no-op.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    out = w.copy()
    for n in prunable(w):
        x = np.asarray(out.tensors[n], dtype=np.float64)
        k = int(np.floor(fraction * x.size))
        prev = w.masks.get(n)
        was_masked = np.zeros(x.size, bool) if prev is None else ~prev.astype(bool).ravel()
        order = np.lexsort((np.arange(x.size), np.abs(x.ravel()), ~was_masked))
        keep = np.ones(x.size, dtype=bool)
        keep[order[:k]] = False
        mask = keep.reshape(x.shape)
        out.masks[n] = mask.astype(np.float64)
        out.tensors[n] = (x * mask).astype(np.asarray(w.tensors[n]).dtype)
    return out


def sparsity(w: ModelWeights) -> dict[str, float]:
    return {n: float((np.asarray(w.tensors[n]) == 0).mean()) for n in prunable(w)}


# ---------------------------------------------------------------------------
# quantization-aware fine-tuning


def qat_finetune(w: ModelWeights, segs, cfg: TrainConfig, prune_fraction: float | None = None):
    """Optionally prune, then fine-tune with fake-quantized weights and quantize.

    Gradients pass straight through the rounding. With ``cfg.epochs == 0`` this
    reduces to post-training quantization. Returns (ModelWeights, TrainLog).
    """
    if prune_fraction:
        w = prune_magnitude(w, prune_fraction)
    names = set(quantizable(w))

    def transform(name, p):
        return fake_quantize(p) if name in names else None

    module = w.to_module(cfg.torch_dtype)
    tuned, tlog = train(w.spec, segs, cfg, module=module, masks=w.masks or None,
                        weight_transform=transform)
    tuned.masks = dict(w.masks)
    return quantize_weights(tuned), tlog


# ---------------------------------------------------------------------------
# serialization
#
# layout: MAGIC | u32 header length | JSON header | payload | u32 crc32 of all preceding bytes


def _encode(arr: np.ndarray, rec: QuantRecord | None, mask, float_dtype: str):
    entry = {"shape": list(arr.shape)}
    if rec is not None:
        q = np.clip(np.rint(arr / rec.scale) + rec.zero_point, QMIN, QMAX).astype(np.int8)
        entry.update(scale=rec.scale, zero_point=rec.zero_point, bit_width=rec.bit_width)
        values = q
    elif np.issubdtype(arr.dtype, np.floating):
        values = arr.astype(float_dtype)
    else:
        values = arr
    entry["dtype"] = values.dtype.newbyteorder("<").str if values.dtype.itemsize > 1 else values.dtype.str
    flat = values.ravel()
    if mask is not None and (mask == 0).mean() >= 0.5:
        keep = mask.ravel().astype(bool)
        entry["encoding"] = "sparse"
        data = np.packbits(keep).tobytes() + flat[keep].astype(entry["dtype"]).tobytes()
    else:
        entry["encoding"] = "dense"
        if mask is not None:
            entry["mask"] = True
            data = np.packbits(mask.ravel().astype(bool)).tobytes() + flat.astype(entry["dtype"]).tobytes()
        else:
            data = flat.astype(entry["dtype"]).tobytes()
    return entry, data


def serialize_model(w: ModelWeights, float_dtype: str = "float32", meta: dict | None = None) -> bytes:
    """Compact byte stream: int8 for quantized tensors, bitmap + values when >= 50% pruned.

    ``meta`` is stored verbatim in the header (see ``read_meta``).
    """
    entries, chunks, offset = [], [], 0
    for name, t in w.tensors.items():
        arr = np.asarray(t)
        entry, data = _encode(arr, w.quant.get(name), w.masks.get(name), float_dtype)
        entry.update(name=name, offset=offset, nbytes=len(data))
        entries.append(entry)
        chunks.append(data)
        offset += len(data)
    header = {
        "spec": None if w.spec is None else w.spec.to_dict(),
        "trainable": list(w.trainable),
        "tensors": entries,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def size_bytes(w: ModelWeights, float_dtype: str = "float32") -> int:
    return len(serialize_model(w, float_dtype))


def _header(blob: bytes) -> tuple[dict, bytes]:
    blob = bytes(blob)
    if len(blob) < len(MAGIC) + 8 or not blob.startswith(MAGIC):
        raise SerializationError("not a serialized model (bad magic or too short)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise SerializationError("checksum mismatch: stream is corrupt")
    (hlen,) = struct.unpack("<I", body[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        header = json.loads(body[start : start + hlen])
    except ValueError as e:
        raise SerializationError(f"bad header: {e}") from None
    return header, body[start + hlen :]


def read_meta(blob: bytes) -> dict:
    return _header(blob)[0].get("meta", {})


def load_model(blob: bytes) -> ModelWeights:
    header, payload = _header(blob)
    tensors, masks, quant = {}, {}, {}
    for e in header["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise SerializationError(f"truncated tensor {e['name']}")
        shape = tuple(e["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        dt = np.dtype(e["dtype"])
        mask = None
        if e["encoding"] == "sparse" or e.get("mask"):
            nb = (n + 7) // 8
            mask = np.unpackbits(np.frombuffer(raw[:nb], np.uint8), count=n).astype(bool)
            raw = raw[nb:]
        if e["encoding"] == "sparse":
            flat = np.zeros(n, dtype=dt)
            flat[mask] = np.frombuffer(raw, dtype=dt)
            if "zero_point" in e:
                flat[~mask] = e["zero_point"]
        else:
            flat = np.frombuffer(raw, dtype=dt).copy()
        if flat.size != n:
            raise SerializationError(f"tensor {e['name']} has {flat.size} entries, expected {n}")
        values = flat.reshape(shape)
        if "zero_point" in e:
            rec = QuantRecord(e["scale"], e["zero_point"], e.get("bit_width", 8))
            quant[e["name"]] = rec
            values = dequantize(values, rec)
        elif np.issubdtype(dt, np.floating):
            values = values.astype(np.float64)
        tensors[e["name"]] = values
        if mask is not None:
            masks[e["name"]] = mask.reshape(shape).astype(np.float64)
    spec = None if header["spec"] is None else spec_from_dict(header["spec"])
    return ModelWeights(spec, tensors, tuple(header["trainable"]), masks, quant)


# ---------------------------------------------------------------------------
# benchmarking


@dataclass(frozen=True)
class Benchmark:
    times_ms: tuple[float, ...]
    mean_ms: float
    p50_ms: float
    p95_ms: float
    deterministic: bool

    def to_dict(self) -> dict:
        return {"n": len(self.times_ms), "mean_ms": self.mean_ms, "p50_ms": self.p50_ms,
                "p95_ms": self.p95_ms, "deterministic": self.deterministic,
                "times_ms": list(self.times_ms)}


def benchmark_inference(w: ModelWeights, audio=None, imu=None, n: int = 10,
                        dtype=torch.float32) -> Benchmark:
    """Time ``n`` single-segment inferences after one untimed warm-up, on one thread."""
    m = w.to_module(dtype)
    a = None if audio is None or not w.spec.uses_audio else torch.as_tensor(np.asarray(audio)[None], dtype=dtype)
    i = None if imu is None or not w.spec.uses_imu else torch.as_tensor(np.asarray(imu)[None], dtype=dtype)
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        with torch.no_grad():
            ref = m(a, i)[1].numpy().copy()
            times, same = [], True
            for _ in range(n):
                t0 = time.perf_counter()
                out = m(a, i)[1]
                times.append((time.perf_counter() - t0) * 1e3)
                same &= bool(np.array_equal(out.numpy(), ref))
    finally:
        torch.set_num_threads(threads)
    t = np.array(times)
    return Benchmark(tuple(times), float(t.mean()), float(np.percentile(t, 50)),
                     float(np.percentile(t, 95)), same)
