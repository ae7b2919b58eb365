"""Time-series layer: per-interval summary blocks stored in ORAM.

Raw points are buffered until an aggregation interval closes, then condensed
into a block of eight aggregates and written to that interval level's store.
Queries are answered by covering the range with as few blocks as possible
across the interval ladder and merging the blocks' aggregates.
"""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (EmptyRange, InvalidParam, InvalidRange, LatePoint, NonFiniteValue,
                     OutOfRetention, UnalignedRange)
from .oblivious import READ, o_access
from .pathoram import WORD, PathOram
from .roram import RoOram, RoOramConfig


class Agg(IntEnum):
    COUNT = 0
    SUM = 1
    SUM_SQ = 2
    MIN = 3
    MAX = 4
    MEAN = 5
    VARIANCE = 6
    STDV = 7


NUM_AGGS = len(Agg)
AGG_BYTES = NUM_AGGS * 8
BIG = float(np.finfo(np.float64).max)

_ALIASES = {"avg": Agg.MEAN, "average": Agg.MEAN, "var": Agg.VARIANCE,
            "std": Agg.STDV, "stddev": Agg.STDV, "stdev": Agg.STDV, "sumsq": Agg.SUM_SQ}

# aggregates that are undefined over zero points
_NEEDS_POINTS = frozenset({Agg.MIN, Agg.MAX, Agg.MEAN, Agg.VARIANCE, Agg.STDV})


def parse_agg(name) -> Agg:
    """Aggregate from a wire code or a (case-insensitive) name."""
    if isinstance(name, (int, np.integer)):
        try:
            return Agg(int(name))
        except ValueError:
            raise InvalidParam(f"unknown aggregate code {name}") from None
    key = str(name).strip().lower()
    if key.isdigit():
        return parse_agg(int(key))
    if key in _ALIASES:
        return _ALIASES[key]
    try:
        return Agg[key.upper()]
    except KeyError:
        raise InvalidParam(f"unknown aggregate {name!r}") from None


def parse_duration_ms(text) -> int:
    """``"10s"``, ``"5m"``, ``"1h"``, ``"1d"``, ``"250ms"`` or bare seconds -> milliseconds."""
    s = str(text).strip().lower()
    for suffix, scale in (("ms", 1), ("s", 1000), ("m", 60_000), ("h", 3_600_000),
                          ("d", 86_400_000)):
        if s.endswith(suffix):
            num = s[:-len(suffix)]
            break
    else:
        num, scale = s, 1000
    try:
        value = float(num)
    except ValueError:
        raise InvalidParam(f"bad duration {text!r}") from None
    ms = value * scale
    if ms <= 0 or ms != int(ms):
        raise InvalidParam(f"duration {text!r} must be a positive whole number of ms")
    return int(ms)


@dataclass(frozen=True)
class DataPoint:
    ts: int
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise NonFiniteValue(f"value {self.value!r} at ts {self.ts}")


@dataclass
class SummaryBlock:
    interval_start: int
    aggregates: np.ndarray

    @property
    def count(self) -> int:
        return int(self.aggregates[Agg.COUNT])

    def __getitem__(self, f) -> float:
        return float(self.aggregates[int(f)])

    def to_words(self, width: int) -> np.ndarray:
        row = np.zeros(width, dtype=np.uint64)
        row[:NUM_AGGS] = self.aggregates.astype(np.float64).view(np.uint64)
        return row

    @classmethod
    def from_words(cls, row: np.ndarray, interval_start: int = 0) -> "SummaryBlock":
        return cls(interval_start, np.asarray(row[:NUM_AGGS], dtype=np.uint64).view(np.float64).copy())

    @classmethod
    def empty(cls, interval_start: int = 0) -> "SummaryBlock":
        agg = np.zeros(NUM_AGGS)
        agg[Agg.MIN] = BIG
        agg[Agg.MAX] = -BIG
        return cls(interval_start, agg)


def seal_interval(points: Iterable[DataPoint], t_start: int, interval_ms: int) -> SummaryBlock:
    """Condense the points of ``[t_start, t_start + interval_ms)`` into one block."""
    vals = np.array([p.value for p in points if t_start <= p.ts < t_start + interval_ms],
                    dtype=np.float64)
    if vals.size == 0:
        return SummaryBlock.empty(t_start)
    agg = np.empty(NUM_AGGS)
    n = vals.size
    mean = math.fsum(vals) / n
    var = math.fsum((vals - mean) ** 2) / n
    agg[Agg.COUNT] = n
    agg[Agg.SUM] = math.fsum(vals)
    agg[Agg.SUM_SQ] = math.fsum(vals * vals)
    agg[Agg.MIN] = vals.min()
    agg[Agg.MAX] = vals.max()
    agg[Agg.MEAN] = mean
    agg[Agg.VARIANCE] = var
    agg[Agg.STDV] = math.sqrt(var)
    return SummaryBlock(t_start, agg)


def merge_all(rows: Sequence[Sequence[float]]) -> List[float]:
    """All eight merged aggregates of ``rows`` (each an 8-slot aggregate vector).

    Every slot of every row is read, whichever aggregate the caller wants.
    Mean is the count-weighted average; variance combines per-block
    second moments about the overall mean.  Undefined results (no points)
    come back as NaN.
    """
    n = 0.0
    sums: List[float] = []
    sqs: List[float] = []
    lo, hi = BIG, -BIG
    parts = []
    for row in rows:
        c, s, q, mn, mx, mu, var = (row[0], row[1], row[2], row[3], row[4], row[5], row[6])
        _ = row[7]
        n += c
        sums.append(s)
        sqs.append(q)
        lo = min(lo, mn)
        hi = max(hi, mx)
        parts.append((c, mu, var))
    if n > 0:
        mean = math.fsum(c * mu for c, mu, _ in parts) / n
        m2 = math.fsum(c * var + c * (mu - mean) ** 2 for c, mu, var in parts)
        var = max(m2 / n, 0.0)
        std = math.sqrt(var)
    else:
        mean = var = std = lo = hi = math.nan
    return [n, math.fsum(sums), math.fsum(sqs), lo, hi, mean, var, std]


def extract(f, rows: Sequence[Sequence[float]], wrap=None) -> float:
    """Merge ``rows`` and pick aggregate ``f`` with a full sweep over the results.

    ``wrap`` lets tests put the eight merged values in an instrumented
    container.
    """
    f = parse_agg(f)
    merged = merge_all(rows)
    value = o_access(READ, wrap(merged) if wrap else merged, int(f))
    if f in _NEEDS_POINTS and not merged[Agg.COUNT] > 0:
        raise EmptyRange(f"no points in range for {f.name.lower()}")
    return float(value)


def merge(f, blocks: Sequence[SummaryBlock]) -> float:
    if not blocks:
        raise InvalidParam("merge needs at least one block")
    return extract(f, [b.aggregates for b in blocks])


# -- query planning ----------------------------------------------------------

@dataclass(frozen=True)
class PlanItem:
    interval_ms: int
    t_start: int

    @property
    def t_end(self) -> int:
        return self.t_start + self.interval_ms


@dataclass
class QueryPlan:
    items: List[PlanItem] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


def check_ladder(intervals: Sequence[int]) -> List[int]:
    levels = sorted(int(t) for t in intervals)
    if not levels or levels[0] <= 0:
        raise InvalidParam("interval ladder needs positive intervals")
    if len(set(levels)) != len(levels):
        raise InvalidParam("interval ladder has duplicates")
    for a, b in zip(levels, levels[1:]):
        if b % a:
            raise InvalidParam(f"interval {b} is not a multiple of {a}")
    return levels


def plan_query(t_a: int, t_b: int, ladder: Sequence[int],
               available: Optional[Callable[[int, int], bool]] = None) -> QueryPlan:
    """Cover ``[t_a, t_b)`` with the fewest blocks from the ladder.

    Coarsest level first: every whole coarse block inside the range is taken
    (if ``available`` allows it), the remainders are covered by finer levels.
    ``t_a == t_b`` is a point query and maps to the finest block holding it.
    """
    levels = check_ladder(ladder)
    fine = levels[0]
    if t_a > t_b:
        raise InvalidRange(f"t_a={t_a} > t_b={t_b}")
    if t_a == t_b:
        start = (t_a // fine) * fine
        return QueryPlan([PlanItem(fine, start)])
    if t_a % fine or t_b % fine:
        raise UnalignedRange(f"[{t_a}, {t_b}) not aligned to {fine} ms")
    ok = available or (lambda T, s: True)
    items: List[PlanItem] = []

    def cover(a: int, b: int, idx: int) -> None:
        if a >= b:
            return
        T = levels[idx]
        if idx == 0:
            items.extend(PlanItem(T, s) for s in range(a, b, T))
            return
        s = -(-a // T) * T
        e = (b // T) * T
        if s >= e:
            cover(a, b, idx - 1)
            return
        cover(a, s, idx - 1)
        for start in range(s, e, T):
            if ok(T, start):
                items.append(PlanItem(T, start))
            else:
                cover(start, start + T, idx - 1)
        cover(e, b, idx - 1)

    cover(t_a, t_b, len(levels) - 1)
    items.sort(key=lambda it: it.t_start)
    return QueryPlan(items)


# -- block stores --------------------------------------------------------------

class PlainStore:
    """Directly indexed block array; the non-oblivious variant."""

    def __init__(self, n: int, width: int):
        self.data = np.zeros((n, width), dtype=np.uint64)
        self.present = np.zeros(n, dtype=bool)

    def read_words(self, block_id: int):
        return self.data[block_id].copy(), bool(self.present[block_id])

    def write_words(self, block_id: int, row: np.ndarray) -> None:
        self.data[block_id] = row
        self.present[block_id] = True

    def memory_bytes(self) -> int:
        return self.data.nbytes

    def flush(self) -> None:
        pass


class PathOramStore:
    def __init__(self, n: int, z: int, width: int, seed):
        self.oram = PathOram(n, z, width=width, seed=seed)

    def read_words(self, block_id: int):
        return self.oram._access(block_id, 0)

    def write_words(self, block_id: int, row: np.ndarray) -> None:
        self.oram._access(block_id, 1, np.ascontiguousarray(row, dtype=np.uint64))

    def memory_bytes(self) -> int:
        return self.oram.tree.payload_bytes

    def flush(self) -> None:
        pass


class RoOramStore:
    def __init__(self, cfg: RoOramConfig, trace=None):
        self.oram = RoOram(cfg, trace=trace)

    def read_words(self, block_id: int):
        return self.oram.read_words(block_id)

    def write_words(self, block_id: int, row: np.ndarray) -> None:
        self.oram.write_words(block_id, row)

    def memory_bytes(self) -> int:
        return self.oram.memory_bytes()["trees"]

    def flush(self) -> None:
        self.oram.flush()


VARIANTS = ("roram", "pathoram", "nonoblivious")


@dataclass
class EngineConfig:
    intervals_ms: Tuple[int, ...] = (10_000,)
    retention_ms: int = 86_400_000
    z: int = 4
    block_bytes: int = AGG_BYTES
    r: int = 32
    seed: Optional[int] = None
    variant: str = "roram"
    epoch_ms: int = 0
    concurrent: bool = False

    def __post_init__(self):
        self.intervals_ms = tuple(check_ladder(self.intervals_ms))
        if self.variant not in VARIANTS:
            raise InvalidParam(f"variant must be one of {VARIANTS}")
        if self.block_bytes < AGG_BYTES or self.block_bytes % WORD:
            raise InvalidParam(f"block size must be a multiple of {WORD} bytes and >= {AGG_BYTES}")
        if self.retention_ms < self.intervals_ms[-1]:
            raise InvalidParam("retention shorter than the coarsest interval")
        if self.epoch_ms % self.intervals_ms[-1]:
            raise InvalidParam("epoch must be aligned to the coarsest interval")


def blocks_for_retention(retention_ms: int, interval_ms: int) -> int:
    return -(-retention_ms // interval_ms)


@dataclass
class _Level:
    interval_ms: int
    n: int
    store: object
    open_start: int

    def block_id(self, t_start: int, epoch: int) -> int:
        return ((t_start - epoch) // self.interval_ms) % self.n


class Engine:
    """Ingests points, seals blocks per ladder level, answers aggregate queries."""

    def __init__(self, cfg: EngineConfig, trace=None):
        self.cfg = cfg
        self.width = cfg.block_bytes // WORD
        self.levels: List[_Level] = []
        for i, T in enumerate(cfg.intervals_ms):
            n = max(blocks_for_retention(cfg.retention_ms, T), 2)
            seed = None if cfg.seed is None else cfg.seed + 7919 * i
            if cfg.variant == "roram":
                r = min(cfg.r, 1 << RoOramConfig(n, cfg.z, cfg.block_bytes, 1).height)
                store = RoOramStore(RoOramConfig(n, cfg.z, cfg.block_bytes, r, seed,
                                                 concurrent=cfg.concurrent), trace)
            elif cfg.variant == "pathoram":
                store = PathOramStore(n, cfg.z, self.width, seed)
            else:
                store = PlainStore(n, self.width)
            self.levels.append(_Level(T, n, store, cfg.epoch_ms))
        self._buffer: List[DataPoint] = []
        self._lock = threading.RLock()

    # -- ingestion -----------------------------------------------------

    @property
    def frontier(self) -> int:
        """Everything before this timestamp is sealed at the finest level."""
        return self.levels[0].open_start

    def ingest(self, ts: int, value: float) -> None:
        point = DataPoint(int(ts), float(value))
        with self._lock:
            if point.ts < self.frontier:
                raise LatePoint(f"ts {point.ts} is before the sealed frontier {self.frontier}")
            self.advance(point.ts)
            self._buffer.append(point)

    def ingest_many(self, points: Iterable[Tuple[int, float]]) -> int:
        n = 0
        for ts, value in points:
            self.ingest(ts, value)
            n += 1
        return n

    def advance(self, now_ms: int) -> None:
        """Seal every interval that ends at or before ``now_ms``."""
        with self._lock:
            for lvl in self.levels:
                T = lvl.interval_ms
                closable = (now_ms - lvl.open_start) // T
                if closable <= 0:
                    continue
                if closable > lvl.n:
                    # older blocks would be overwritten within this call anyway
                    lvl.open_start += (closable - lvl.n) * T
                while lvl.open_start + T <= now_ms:
                    block = seal_interval(self._buffer, lvl.open_start, T)
                    lvl.store.write_words(lvl.block_id(lvl.open_start, self.cfg.epoch_ms),
                                          block.to_words(self.width))
                    lvl.open_start += T
            keep_from = min(lvl.open_start for lvl in self.levels)
            if self._buffer and self._buffer[0].ts < keep_from:
                self._buffer = [p for p in self._buffer if p.ts >= keep_from]

    # -- queries -------------------------------------------------------

    def _level(self, T: int) -> _Level:
        for lvl in self.levels:
            if lvl.interval_ms == T:
                return lvl
        raise InvalidParam(f"no level with interval {T} ms")

    def _available(self, T: int, t_start: int) -> bool:
        lvl = self._level(T)
        return (t_start + T <= lvl.open_start
                and t_start >= lvl.open_start - lvl.n * T
                and t_start >= self.cfg.epoch_ms)

    def plan(self, t_a: int, t_b: int) -> QueryPlan:
        return plan_query(t_a, t_b, self.cfg.intervals_ms, self._available)

    def execute(self, f, t_a: int, t_b: int) -> float:
        f = parse_agg(f)
        t_a, t_b = int(t_a), int(t_b)
        with self._lock:
            if t_a > t_b:
                raise InvalidRange(f"t_a={t_a} > t_b={t_b}")
            fine = self.cfg.intervals_ms[0]
            end = t_a - t_a % fine + fine if t_a == t_b else t_b
            if end > self.frontier:
                # a query closes the intervals it asks about
                self.advance(-(-end // fine) * fine)
            plan = self.plan(t_a, t_b)
            for it in plan:
                if not self._available(it.interval_ms, it.t_start):
                    raise OutOfRetention(
                        f"[{it.t_start}, {it.t_end}) is outside the retained window")
            rows = []
            for it in plan:
                lvl = self._level(it.interval_ms)
                row, found = lvl.store.read_words(lvl.block_id(it.t_start, self.cfg.epoch_ms))
                block = SummaryBlock.from_words(row) if found else SummaryBlock.empty()
                rows.append(block.aggregates.tolist())
            return extract(f, rows)

    query = execute

    def read_block(self, interval_ms: int, t_start: int) -> SummaryBlock:
        lvl = self._level(interval_ms)
        with self._lock:
            row, found = lvl.store.read_words(lvl.block_id(t_start, self.cfg.epoch_ms))
        return SummaryBlock.from_words(row, t_start) if found else SummaryBlock.empty(t_start)

    def flush(self) -> None:
        for lvl in self.levels:
            lvl.store.flush()

    def memory_bytes(self) -> Dict[int, int]:
        return {lvl.interval_ms: lvl.store.memory_bytes() for lvl in self.levels}


def read_csv_points(path) -> Iterator[Tuple[int, float]]:
    """``ts_ms,value`` rows; a non-numeric first row is taken as a header."""
    with open(Path(path), newline="") as fh:
        for i, rec in enumerate(csv.reader(fh)):
            if not rec or not "".join(rec).strip() or rec[0].lstrip().startswith("#"):
                continue
            try:
                ts, value = int(rec[0]), float(rec[1])
            except (ValueError, IndexError):
                if i == 0:
                    continue
                raise InvalidParam(f"{path}: bad record on line {i + 1}: {rec!r}") from None
            yield ts, value
