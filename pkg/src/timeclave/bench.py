"""Benchmark drivers behind ``timeclave bench``.

Four experiment families, each returning :class:`BenchRow` lists:

* ``grid``: latency over query range x block size, per store variant;
* ``rfreq``: latency of a fixed 32-block range as the eviction frequency R varies;
* ``interval``: latency of a fixed wall-clock span as the aggregation interval varies;
* ``variants``: read-heavy closed-loop throughput of the three stores.

Sweep parameters that are not range or block size are folded into the
variant label (``roram:R=8``, ``roram:T=20s``).
"""

from __future__ import annotations

import csv
import gc
import io
import threading
import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .oblivious import READ, o_access
from .pathoram import WORD
from .roram import RoOramConfig
from .tsengine import (NUM_AGGS, Engine, EngineConfig, PathOramStore, PlainStore, RoOramStore,
                       VARIANTS, merge_all)

RANGES = (1, 10, 20, 30, 40, 50)
BLOCK_SIZES = (8, 16, 32, 64, 128)
R_SWEEP = (1, 2, 4, 8, 16, 32, 64, 128)
INTERVALS_S = (1, 5, 10, 20)
CSV_HEADER = ("variant", "range", "block_bytes", "p50_us", "p95_us", "throughput_ops")
# report labels for store variants
LABELS = {"roram": "roram", "pathoram": "pathoram-baseline", "nonoblivious": "nonoblivious"}


@dataclass
class BenchRow:
    variant: str
    range: int
    block_bytes: int
    p50_us: float
    p95_us: float
    throughput_ops: float


def write_csv(rows: Iterable[BenchRow], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.variant, r.range, r.block_bytes, f"{r.p50_us:.3f}", f"{r.p95_us:.3f}",
                    f"{r.throughput_ops:.1f}"])


def read_csv(text: str) -> List[BenchRow]:
    rdr = csv.DictReader(io.StringIO(text))
    out = []
    for rec in rdr:
        out.append(BenchRow(rec["variant"], int(rec["range"]), int(rec["block_bytes"]),
                            float(rec["p50_us"]), float(rec["p95_us"]),
                            float(rec["throughput_ops"])))
    return out


def make_store(variant: str, n: int, block_bytes: int, *, z: int = 4, r: int = 32,
               seed: Optional[int] = 0):
    width = block_bytes // WORD
    if variant == "roram":
        height = RoOramConfig(n, z, block_bytes, 1).height
        return RoOramStore(RoOramConfig(n, z, block_bytes, min(r, 1 << height), seed))
    if variant == "pathoram":
        return PathOramStore(n, z, width, seed)
    if variant == "nonoblivious":
        return PlainStore(n, width)
    raise ValueError(f"unknown variant {variant!r}")


def fill_store(store, n: int, width: int, rng: np.random.Generator) -> None:
    """Write ``n`` blocks whose leading words are plausible aggregate vectors."""
    for i in range(n):
        vals = rng.normal(10.0, 2.0, 4)
        agg = np.array([4.0, vals.sum(), (vals ** 2).sum(), vals.min(), vals.max(),
                        vals.mean(), vals.var(), vals.std()])
        row = np.zeros(width, dtype=np.uint64)
        k = min(width, NUM_AGGS)
        row[:k] = agg[:k].view(np.uint64)
        store.write_words(i, row)


def range_query(store, first: int, length: int, n: int, f: int = 5) -> float:
    """Read ``length`` consecutive blocks and extract aggregate ``f``.

    Blocks narrower than eight aggregates are zero-padded before merging.
    """
    rows = []
    for k in range(length):
        row, _ = store.read_words((first + k) % n)
        vec = np.zeros(NUM_AGGS)
        m = min(row.shape[0], NUM_AGGS)
        vec[:m] = row[:m].view(np.float64)
        rows.append(vec.tolist())
    return float(o_access(READ, merge_all(rows), f))


def _summarise(variant: str, rng_len: int, block_bytes: int, lat_s: Sequence[float]) -> BenchRow:
    lat = np.asarray(lat_s) * 1e6
    return BenchRow(variant, rng_len, block_bytes, float(np.percentile(lat, 50)),
                    float(np.percentile(lat, 95)), float(1e6 / lat.mean()))


def grid_samples(variant: str, ranges: Sequence[int] = RANGES,
                 block_sizes: Sequence[int] = BLOCK_SIZES, *, n: int = 8640, reps: int = 30,
                 seed: int = 0) -> Dict[Tuple[int, int], List[float]]:
    """Per-repetition latencies (s) for every ``(range, block_bytes)`` cell.

    All block sizes replay the same query sequence against stores built from
    the same seed, so they differ only in payload width; sample ``i`` of every
    cell comes from repetition ``i``.  Each repetition visits the ranges, and
    the block sizes within a range, in a fresh random order so drift in
    machine speed spreads evenly over the grid.
    """
    stores = {}
    for b in block_sizes:
        st = make_store(variant, n, b, seed=seed)
        fill_store(st, n, b // WORD, np.random.default_rng(seed))
        stores[b] = st
    samples: Dict[Tuple[int, int], List[float]] = {(rl, b): [] for rl in ranges
                                                   for b in block_sizes}
    qrng = np.random.default_rng(seed + 1)
    gc_was = gc.isenabled()
    gc.disable()
    try:
        for _ in range(reps):
            for rl in qrng.permutation(ranges).tolist():
                first = int(qrng.integers(n))
                for b in qrng.permutation(block_sizes).tolist():
                    t0 = time.perf_counter()
                    range_query(stores[b], first, rl, n)
                    samples[(rl, b)].append(time.perf_counter() - t0)
    finally:
        if gc_was:
            gc.enable()
    return samples


def latency_grid(variants: Sequence[str] = VARIANTS, ranges: Sequence[int] = RANGES,
                 block_sizes: Sequence[int] = BLOCK_SIZES, *, n: int = 8640, reps: int = 30,
                 seed: int = 0, progress: Optional[Callable[[str], None]] = None
                 ) -> List[BenchRow]:
    """Range x block-size latency grid (single worker), one row per cell."""
    rows: List[BenchRow] = []
    for variant in variants:
        samples = grid_samples(variant, ranges, block_sizes, n=n, reps=reps, seed=seed)
        for rl in ranges:
            for b in block_sizes:
                rows.append(_summarise(LABELS[variant], rl, b, samples[(rl, b)]))
        if progress:
            progress(f"grid {variant} done")
    return rows


def eviction_sweep(r_values: Sequence[int] = R_SWEEP, *, n: int = 8640, range_len: int = 32,
                   block_bytes: int = 64, reps: int = 30, seed: int = 0) -> List[BenchRow]:
    rows = []
    for r in r_values:
        rng = np.random.default_rng(seed)
        st = make_store("roram", n, block_bytes, r=r, seed=seed)
        fill_store(st, n, block_bytes // WORD, rng)
        lat = []
        for _ in range(reps):
            first = int(rng.integers(n))
            t0 = time.perf_counter()
            range_query(st, first, range_len, n)
            lat.append(time.perf_counter() - t0)
        rows.append(_summarise(f"roram:R={r}", range_len, block_bytes, lat))
    return rows


def interval_engine(interval_s: int, span_s: int, *, variant: str = "roram", seed: int = 0,
                    retention_s: Optional[int] = None) -> Engine:
    """Engine holding ``retention_s`` seconds of one-point-per-second data at one interval."""
    retention_s = retention_s or 2 * span_s
    eng = Engine(EngineConfig(intervals_ms=(interval_s * 1000,), retention_ms=retention_s * 1000,
                              seed=seed, variant=variant))
    rng = np.random.default_rng(seed)
    vals = rng.normal(20.0, 3.0, retention_s)
    for t in range(retention_s):
        eng.ingest(t * 1000, float(vals[t]))
    eng.advance(retention_s * 1000)
    return eng


def interval_sweep(intervals_s: Sequence[int] = INTERVALS_S, *, span_s: int = 600,
                   reps: int = 10, seed: int = 0) -> List[BenchRow]:
    """Latency of a mean over a fixed ``span_s`` window as the interval T varies."""
    rows = []
    for T in intervals_s:
        eng = interval_engine(T, span_s, seed=seed)
        rng = np.random.default_rng(seed + T)
        lat = []
        for _ in range(reps):
            start = int(rng.integers(0, span_s // T + 1)) * T
            t0 = time.perf_counter()
            eng.execute("mean", start * 1000, (start + span_s) * 1000)
            lat.append(time.perf_counter() - t0)
        rows.append(_summarise(f"roram:T={T}s", span_s // T, eng.cfg.block_bytes, lat))
    return rows


def throughput(store, n: int, *, ops: int = 20_000, read_frac: float = 0.95, workers: int = 4,
               block_bytes: int = 64, seed: int = 0, warmup: int = 2000):
    """Closed-loop mixed workload; returns ``(ops_per_s, per-op latencies in s)``."""
    rng = np.random.default_rng(seed)
    width = block_bytes // WORD
    payload = rng.integers(0, 2 ** 63, width).astype(np.uint64)
    plan = list(zip((rng.random(ops + warmup) < read_frac).tolist(),
                    rng.integers(0, n, ops + warmup).tolist()))
    lock = threading.Lock()

    def do(is_read: bool, bid: int) -> None:
        with lock:
            if is_read:
                store.read_words(bid)
            else:
                store.write_words(bid, payload)

    for is_read, bid in plan[:warmup]:
        do(is_read, bid)
    work = plan[warmup:]
    lat: List[List[float]] = [[] for _ in range(workers)]

    def worker(k: int) -> None:
        mine = lat[k]
        for is_read, bid in work[k::workers]:
            t0 = time.perf_counter()
            do(is_read, bid)
            mine.append(time.perf_counter() - t0)

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(workers)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t0
    store.flush()
    return len(work) / elapsed, [x for part in lat for x in part]


def variant_comparison(variants: Sequence[str] = VARIANTS, *, n: int = 1 << 14, r: int = 32,
                       ops: int = 20_000, read_frac: float = 0.95, workers: int = 4,
                       block_bytes: int = 64, seed: int = 0) -> List[BenchRow]:
    rows = []
    for variant in variants:
        st = make_store(variant, n, block_bytes, r=r, seed=seed)
        tput, lat = throughput(st, n, ops=ops, read_frac=read_frac, workers=workers,
                               block_bytes=block_bytes, seed=seed)
        lat_us = np.asarray(lat) * 1e6
        rows.append(BenchRow(LABELS[variant], 1, block_bytes, float(np.percentile(lat_us, 50)),
                             float(np.percentile(lat_us, 95)), float(tput)))
    return rows


FAMILIES = ("grid", "rfreq", "interval", "variants")


def run_bench(families: Sequence[str] = FAMILIES, *, quick: bool = False, workers: int = 4,
              seed: int = 0, progress: Optional[Callable[[str], None]] = None) -> List[BenchRow]:
    reps = 8 if quick else 30
    rows: List[BenchRow] = []
    for fam in families:
        if fam == "grid":
            rows += latency_grid(n=2048 if quick else 8640, reps=reps, seed=seed,
                                 progress=progress)
        elif fam == "rfreq":
            rows += eviction_sweep(n=2048 if quick else 8640, reps=reps, seed=seed)
        elif fam == "interval":
            rows += interval_sweep(span_s=300 if quick else 600, reps=max(reps // 3, 3), seed=seed)
        elif fam == "variants":
            rows += variant_comparison(ops=3000 if quick else 20_000, workers=workers, seed=seed)
        else:
            raise ValueError(f"unknown bench family {fam!r}")
        if progress:
            progress(f"{fam} done")
    return rows
