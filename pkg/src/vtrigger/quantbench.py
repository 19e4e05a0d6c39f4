"""Int8 weight-only quantization, size accounting and the forward benchmark."""

from __future__ import annotations

import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint, models
from .errors import FormatError

QMAX = 127


@dataclass(frozen=True)
class QuantizedTensor:
    q: np.ndarray  # int8
    scale: float

    @property
    def shape(self):
        return self.q.shape


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(w) -> QuantizedTensor:
    """Symmetric per-tensor int8: scale = max|w| / 127 (1 for an all-zero tensor)."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantize a tensor with non-finite values")
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = peak / QMAX if peak > 0 else 1.0
    q = np.clip(round_half_away(w / scale), -QMAX, QMAX).astype(np.int8)
    return QuantizedTensor(q, scale)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    return qt.q.astype(np.float64) * qt.scale


def is_quantized_name(name: str, shape) -> bool:
    """Matrices (and the embedding table) are quantized; vectors stay float."""
    return len(shape) == 2


@dataclass
class QuantizedModel:
    """Int8 matrices plus the float residue (biases, LN gains/shifts).

    ``graph`` is a template carrying configs and normalization stats; its
    parameter table is rebuilt on demand by :meth:`dequantized`.
    """
    graph: models.ModelGraph
    qtensors: dict[str, QuantizedTensor]
    floats: dict[str, np.ndarray]
    _cache: models.ModelGraph | None = field(default=None, repr=False, compare=False)

    def dequantized(self) -> models.ModelGraph:
        if self._cache is None:
            m = models.ModelGraph(self.graph.arch, self.graph.config, {}, self.graph.decoder, self.graph.mtl,
                                  self.graph.norm_mean, self.graph.norm_std, self.graph.frontend,
                                  dict(self.graph.meta))
            for name in models.param_shapes(m.arch, m.config, m.decoder, m.mtl):
                m.params[name] = (dequantize(self.qtensors[name]) if name in self.qtensors
                                  else self.floats[name].astype(np.float64))
            self._cache = m
        return self._cache

    def n_quantized(self) -> int:
        return int(sum(t.q.size for t in self.qtensors.values()))

    def n_float(self) -> int:
        return int(sum(v.size for v in self.floats.values()))


def quantize_model(m: models.ModelGraph) -> QuantizedModel:
    qt, fl = {}, {}
    for name, w in m.params.items():
        if is_quantized_name(name, w.shape):
            qt[name] = quantize_tensor(w)
        else:
            fl[name] = np.asarray(w, dtype=np.float64)
    template = models.ModelGraph(m.arch, m.config, {}, m.decoder, m.mtl, m.norm_mean, m.norm_std,
                                 m.frontend, dict(m.meta))
    return QuantizedModel(template, qt, fl)


def quantized_forward(qm: QuantizedModel, x, lengths=None) -> np.ndarray:
    """Dequantize weights, then the ordinary float forward pass."""
    return models.forward(qm.dequantized(), x, lengths)


# ---------------------------------------------------------------------------
# serialization and sizes


def quantized_bytes(qm: QuantizedModel) -> bytes:
    header = models._header(qm.graph)
    header["kind"] = "int8"
    tensors, extra = {}, {}
    for name in models.param_shapes(qm.graph.arch, qm.graph.config, qm.graph.decoder, qm.graph.mtl):
        if name in qm.qtensors:
            tensors[name] = qm.qtensors[name].q
            extra[name] = {"scale": qm.qtensors[name].scale}
        else:
            tensors[name] = qm.floats[name].astype(np.float32)
    return checkpoint.encode(header, tensors, extra)


def save_quantized(qm: QuantizedModel, path) -> int:
    blob = quantized_bytes(qm)
    Path(path).write_bytes(blob)
    return len(blob)


def load_quantized(path) -> QuantizedModel:
    header, tensors = checkpoint.read(path)
    if header.get("kind") != "int8":
        raise FormatError(f"{path}: expected an int8 checkpoint, found kind {header.get('kind')!r}")
    entries = {e["name"]: e for e in header["tensors"]}
    # validate names/shapes through the float loader on a float view
    view = {k: v.astype(np.float64) for k, v in tensors.items()}
    graph = models.graph_from_header(header, view)
    qt, fl = {}, {}
    for name, arr in tensors.items():
        if arr.dtype == np.int8:
            if "scale" not in entries[name]:
                raise FormatError(f"{path}: int8 tensor {name!r} has no scale")
            qt[name] = QuantizedTensor(arr, float(entries[name]["scale"]))
        else:
            fl[name] = arr.astype(np.float64)
    graph.params = {}
    return QuantizedModel(graph, qt, fl)


@dataclass
class SizeReport:
    total_bytes: int
    header_bytes: int
    int8_payload_bytes: int
    float_payload_bytes: int
    n_quantized_params: int
    n_float_params: int

    @property
    def payload_bytes(self) -> int:
        return self.int8_payload_bytes + self.float_payload_bytes


def size_report(blob: bytes) -> SizeReport:
    header, _ = checkpoint.decode(blob)
    i8 = fl = nq = nf = 0
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["dtype"] == "i1":
            i8 += e["nbytes"]
            nq += n
        else:
            fl += e["nbytes"]
            nf += n
    return SizeReport(len(blob), checkpoint.header_size(blob), i8, fl, nq, nf)


def model_bytes(m) -> int:
    """Serialized size: float models as float32, quantized ones as int8 + float32 residue."""
    if isinstance(m, QuantizedModel):
        return len(quantized_bytes(m))
    return len(models.checkpoint_bytes(m, np.float32))


# ---------------------------------------------------------------------------
# benchmark


def machine_info() -> dict:
    return {"platform": platform.platform(), "machine": platform.machine(),
            "processor": platform.processor(), "python": platform.python_version(),
            "numpy": np.__version__, "cpu_count": os.cpu_count()}


@dataclass
class BenchReport:
    model: str
    frames: int
    runs: int
    warmup: int
    threads: int | None
    median_ms: float
    p90_ms: float
    min_ms: float
    mean_ms: float
    n_params: int
    float_bytes: int
    quantized_bytes: int
    dtype: str
    machine: dict = field(default_factory=machine_info)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def time_callable(fn, runs: int = 30, warmup: int = 3, threads: int | None = None) -> np.ndarray:
    """Wall times in seconds of ``fn()`` over ``runs`` calls after ``warmup`` calls."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            fn()
        times = np.empty(runs)
        for i in range(runs):
            t0 = time.perf_counter()
            fn()
            times[i] = time.perf_counter() - t0
    return times


def bench_forward(model, frames: int = 60, runs: int = 30, threads: int | None = None, warmup: int = 3,
                  dtype=np.float32, seed: int = 0, tag: str | None = None) -> BenchReport:
    """Median / p90 time of one forward pass on a ``frames``-long random input.

    ``model`` is a float :class:`ModelGraph` or a :class:`QuantizedModel`;
    inputs and weights are prepared outside the timed region.
    """
    if runs < 30:
        raise ValueError("a benchmark needs at least 30 timed runs")
    if isinstance(model, QuantizedModel):
        graph = model.dequantized()
        qbytes = model_bytes(model)
        fbytes = len(models.checkpoint_bytes(graph, np.float32))
    else:
        graph = model
        fbytes = model_bytes(model)
        qbytes = model_bytes(quantize_model(model))
    graph = graph.astype(dtype)
    x = np.random.default_rng(seed).normal(size=(frames, graph.config.input_dim)).astype(dtype)
    times = time_callable(lambda: models.forward(graph, x), runs, warmup, threads) * 1e3
    return BenchReport(
        model=tag or graph.arch, frames=frames, runs=runs, warmup=warmup, threads=threads,
        median_ms=float(np.median(times)), p90_ms=float(np.percentile(times, 90)),
        min_ms=float(times.min()), mean_ms=float(times.mean()),
        n_params=models.count_params(graph), float_bytes=fbytes, quantized_bytes=qbytes,
        dtype=np.dtype(dtype).name)


__all__ = [
    "QuantizedTensor", "QuantizedModel", "quantize_tensor", "dequantize", "round_half_away",
    "quantize_model", "quantized_forward", "save_quantized", "load_quantized", "quantized_bytes",
    "model_bytes", "size_report", "SizeReport", "BenchReport", "bench_forward", "time_callable",
    "machine_info",
]
