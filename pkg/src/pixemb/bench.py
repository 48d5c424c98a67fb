"""Wall-clock benchmarks with round-robin alternation between methods."""

from __future__ import annotations

import csv
import io
import os
import platform
import time
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from . import autodiff as ad
from .bitpack import PackedWeights, embed_pack, output_affine, packed_conv2d, plane_table
from .embedding import EmbeddingTable, merge_table
from .network import ModelGraph, forward, freeze, rescale
from .quant import QuantConfig

DEFAULT_REPEATS = 20


@dataclass
class BenchRecord:
    method: str
    samples_ms: list[float]

    @property
    def runs(self) -> int:
        return len(self.samples_ms)

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.samples_ms))

    @property
    def std_ms(self) -> float:
        # population std: a single run reports 0
        return float(np.std(self.samples_ms))


@dataclass
class BenchReport:
    records: list[BenchRecord]
    threads: int
    machine: str = field(default_factory=lambda: machine_description())

    def record(self, method: str) -> BenchRecord:
        return next(r for r in self.records if r.method == method)

    def speedup(self, slow: str, fast: str) -> float:
        return self.record(slow).mean_ms / self.record(fast).mean_ms

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "mean_ms", "std_ms", "runs"])
        for r in self.records:
            w.writerow([r.method, f"{r.mean_ms:.6f}", f"{r.std_ms:.6f}", r.runs])
        return buf.getvalue()

    def environment(self) -> dict:
        return {"threads": self.threads, "machine": self.machine}


def machine_description() -> str:
    return (f"{platform.machine()} {platform.processor() or 'cpu'}, "
            f"{os.cpu_count()} logical cpus, python {platform.python_version()}, "
            f"numpy {np.__version__}, numba {numba.__version__}")


def set_threads(n: int | None) -> int:
    if n is not None:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
    return numba.get_num_threads()


def run_bench(methods: dict[str, Callable[[], object]], repeats: int = DEFAULT_REPEATS,
              warmup: int = 2, threads: int | None = None) -> BenchReport:
    """Time each callable ``repeats`` times, cycling through the methods in turn.

    Alternating per repetition spreads thermal and cache drift evenly over all
    methods. Warm-up calls (JIT compilation, caches) are not recorded.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    n_threads = set_threads(threads)
    for fn in methods.values():
        for _ in range(warmup):
            fn()
    samples: dict[str, list[float]] = {name: [] for name in methods}
    for _ in range(repeats):
        for name, fn in methods.items():
            t0 = time.perf_counter()
            fn()
            samples[name].append((time.perf_counter() - t0) * 1e3)
    return BenchReport([BenchRecord(k, v) for k, v in samples.items()], n_threads)


def first_layer_methods(d: int = 8, out_channels: int = 64, size: int = 32, batch: int = 1,
                        seed: int = 0, quant: QuantConfig | None = None) -> dict[str, Callable]:
    """First convolution only: pixel embedding into a packed binary 3x3 conv
    versus a float 3x3 conv on the three rescaled colour channels.

    Inputs are prepared up front so the timed region starts at the layer input.
    """
    quant = quant or QuantConfig()
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (batch, size, size, 3), dtype=np.uint8)

    merged = merge_table(EmbeddingTable.random(d, rng, quant))
    planes = plane_table(merged)
    wb = PackedWeights.from_float(rng.standard_normal((out_channels, 3 * d, 3, 3)).astype(ad.DTYPE))
    wb.dense()
    affine = output_affine(wb, quant)

    x = ad.Tensor(rescale(images))
    wf = ad.Tensor(rng.standard_normal((out_channels, 3, 3, 3)).astype(ad.DTYPE))

    def packed():
        return packed_conv2d(embed_pack(images, merged, planes), wb, quant, 1, 1, affine)

    def dense():
        return ad.conv2d(x, wf, 1, 1).data

    return {"pixemb-packed": packed, "float-conv": dense}


def model_methods(models: dict[str, ModelGraph], images: np.ndarray) -> dict[str, Callable]:
    """Whole-network inference per model: packed where available, else float."""
    out = {}
    for name, m in models.items():
        if m.layer("conv") is None:
            frozen = freeze(m)
            out[name] = lambda m=m, f=frozen: forward(m, images, "infer-packed", frozen=f)
        else:
            out[name] = lambda m=m: forward(m, images, "infer-float")
    return out
