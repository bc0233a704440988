"""Wall-clock scaling of the sequence mixers at fixed width."""
from __future__ import annotations

import csv
import gc
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import rng as rngmod
from ._alloc import tune_allocator
from .metrics import format_value
from .model import attention_baseline_forward
from .ssm import SsmHeadParams, init_head_params, scan_parallel, scan_sequential
from .tensor import Tensor, no_grad

MIXERS = ("scan_sequential", "scan_parallel", "attention")
COLUMNS = ("mixer", "L", "mean_ms", "sd_ms")


@dataclass
class Timing:
    mixer: str
    length: int
    samples_ms: list[float]

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.samples_ms))

    @property
    def sd_ms(self) -> float:
        return float(np.std(self.samples_ms, ddof=1)) if len(self.samples_ms) > 1 else 0.0

    def row(self) -> dict:
        return {"mixer": self.mixer, "L": self.length, "mean_ms": self.mean_ms, "sd_ms": self.sd_ms}


def _mixer_fn(name: str, params: SsmHeadParams):
    if name == "scan_sequential":
        return lambda u: scan_sequential(Tensor(u), params).data
    if name == "scan_parallel":
        return lambda u: scan_parallel(Tensor(u), params).data
    if name == "attention":
        return attention_baseline_forward
    raise ValueError(f"unknown mixer {name!r}")


def time_call(fn, arg, reps: int, warmup: int = 1) -> list[float]:
    for _ in range(warmup):
        fn(arg)
    return time_interleaved([fn], [arg], reps, warmup=0)[0]


def time_interleaved(fns, args, reps: int, warmup: int = 1) -> list[list[float]]:
    """Time ``fns[i](args[i])`` round-robin, one call of each per rep.

    Interleaving spreads slow drifts of the machine (frequency changes,
    neighbours on a shared host) evenly over all cases, so ratios between
    cases are not skewed by when each case happened to run.
    """
    for fn, arg in zip(fns, args):
        for _ in range(warmup):
            fn(arg)
    out = [[] for _ in fns]
    # collector pauses land on random reps otherwise; timeit does the same
    enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(reps):
            for samples, fn, arg in zip(out, fns, args):
                t0 = time.perf_counter()
                fn(arg)
                samples.append((time.perf_counter() - t0) * 1e3)
    finally:
        if enabled:
            gc.enable()
    return out


def run(lengths=(512, 1024, 2048, 4096), reps: int = 10, channels: int = 16, state_dim: int = 16,
        seed: int = 0, mixers=MIXERS) -> list[Timing]:
    """Time every mixer at every length on one BLAS thread; warmup calls are not recorded.

    Lengths of one mixer are timed interleaved, since the doubling ratios
    compare them against each other.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    tune_allocator()
    gen = rngmod.derive(seed, "bench")
    params = SsmHeadParams.from_arrays(init_head_params(gen, channels, state_dim, max(4, channels)))
    results = []
    with threadpool_limits(limits=1), no_grad():
        for name in mixers:
            fn = _mixer_fn(name, params)
            inputs = [rngmod.derive(seed, "bench-input", length).normal(size=(1, channels, length))
                      for length in lengths]
            samples = time_interleaved([fn] * len(inputs), inputs, reps)
            results.extend(Timing(name, int(length), s) for length, s in zip(lengths, samples))
    return results


def doubling_ratios(results: list[Timing]) -> dict[str, dict[int, float]]:
    """time(L) / time(L/2) per mixer, keyed by the larger length."""
    by = {}
    for t in results:
        by.setdefault(t.mixer, {})[t.length] = t.mean_ms
    return {m: {L: v[L] / v[L // 2] for L in sorted(v) if L // 2 in v} for m, v in by.items()}


def write_csv(path, results: list[Timing]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for t in results:
            r = t.row()
            writer.writerow([format_value(r[k]) for k in COLUMNS])
