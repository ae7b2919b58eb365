"""Access-trace recording and the obliviousness checks run over it.

A trace is a flat stream of ``(kind, index, seq)`` events.  On disk each
event is a 17-byte little-endian record ``<B Q Q``.  The first record of a
file is a ``META`` event whose index is the tree height, so offline checks
know the leaf count without side information.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .errors import InsufficientSamples

RECORD = struct.Struct("<BQQ")


class EventKind(IntEnum):
    PATH_READ = 0
    DUMMY_PATH_READ = 1
    BUCKET_WRITE = 2
    FAKE_BUCKET_ACCESS = 3
    STASH_SWEEP = 4
    POSMAP_WALK = 5
    SYNC_COPY = 6
    PHASE = 7
    OP = 8
    META = 255


# PHASE event indices
PHASE_SWAP = 1
PHASE_SYNC = 2
PHASE_DONE = 3

# OP event indices
OP_READ = 0
OP_WRITE = 1

# kinds an observer cannot tell apart; folded together by ``shape``
_OBSERVABLE = {
    EventKind.DUMMY_PATH_READ: EventKind.PATH_READ,
    EventKind.FAKE_BUCKET_ACCESS: EventKind.BUCKET_WRITE,
}

Event = Tuple[int, int, int]


class TraceRecorder:
    """Append-only event sink handed to the ORAM controllers.

    With ``debug_labels`` off (the default) dummy path reads and fake bucket
    touches are logged under the same kind as their real counterparts, which
    is what an outside observer would see.
    """

    def __init__(self, debug_labels: bool = False):
        self.debug_labels = debug_labels
        self.events: List[Event] = []
        self._seq = 0

    def emit(self, kind: int, index: int = 0) -> None:
        if not self.debug_labels:
            kind = _OBSERVABLE.get(kind, kind)
        self.events.append((int(kind), int(index), self._seq))
        self._seq += 1

    def clear(self) -> None:
        self.events.clear()
        self._seq = 0

    def to_bytes(self, height: Optional[int] = None) -> bytes:
        out = bytearray()
        if height is not None:
            out += RECORD.pack(EventKind.META, height, 0)
        for kind, index, seq in self.events:
            out += RECORD.pack(kind, index & 0xFFFFFFFFFFFFFFFF, seq)
        return bytes(out)

    def save(self, path, height: Optional[int] = None) -> None:
        Path(path).write_bytes(self.to_bytes(height))


@dataclass
class TraceRun:
    cfg_digest: str
    events: List[Event]
    op_log: List[Tuple[str, str]] = field(default_factory=list)
    height: Optional[int] = None

    @property
    def num_leaves(self) -> int:
        if self.height is None:
            raise ValueError("trace carries no tree height")
        return 1 << self.height


def decode_records(blob: bytes) -> Tuple[Optional[int], List[Event]]:
    if len(blob) % RECORD.size:
        raise ValueError(f"trace length {len(blob)} is not a multiple of {RECORD.size}")
    height = None
    events: List[Event] = []
    for kind, index, seq in RECORD.iter_unpack(blob):
        if kind == EventKind.META:
            height = index
            continue
        events.append((kind, index, seq))
    return height, events


def load_run(path) -> TraceRun:
    blob = Path(path).read_bytes()
    height, events = decode_records(blob)
    return TraceRun(cfg_digest=hashlib.sha256(blob[:RECORD.size]).hexdigest(),
                    events=events, height=height)


def _split_ops(events: Sequence[Event]) -> List[List[Event]]:
    ops: List[List[Event]] = [[]]
    for ev in events:
        if ev[0] == EventKind.OP:
            ops.append([])
        ops[-1].append(ev)
    if not ops[0]:
        ops.pop(0)
    return ops


def shape(run: TraceRun) -> bytes:
    """Index-free signature of a trace.

    Each operation becomes a run-length list of observable event kinds; leaf
    and bucket indices are dropped, except for the read/write label on OP
    markers and the phase number on PHASE markers, which are public.
    """
    h = hashlib.sha256()
    for op in _split_ops(run.events):
        runs: List[Tuple[int, int, int]] = []
        for kind, index, _ in op:
            kind = int(_OBSERVABLE.get(kind, kind))
            label = index if kind in (EventKind.OP, EventKind.PHASE) else 0
            if runs and runs[-1][0] == kind and runs[-1][1] == label:
                runs[-1] = (kind, label, runs[-1][2] + 1)
            else:
                runs.append((kind, label, 1))
        h.update(struct.pack("<I", len(runs)))
        for kind, label, count in runs:
            h.update(struct.pack("<BQI", kind, label, count))
    return h.digest()


def _path_windows(events: Iterable[Event]) -> List[List[int]]:
    windows: List[List[int]] = [[]]
    for kind, index, _ in events:
        if kind == EventKind.PHASE and index == PHASE_SWAP:
            windows.append([])
        elif kind in (EventKind.PATH_READ, EventKind.DUMMY_PATH_READ):
            windows[-1].append(index)
    return windows


def distinct_path_violations(run: TraceRun) -> int:
    """Number of repeated leaves summed over all inter-eviction windows."""
    bad = 0
    for leaves in _path_windows(run.events):
        bad += len(leaves) - len(set(leaves))
    return bad


def check_distinct_paths(run: TraceRun) -> bool:
    return distinct_path_violations(run) == 0


def path_leaves(runs: Sequence[TraceRun]) -> np.ndarray:
    return np.array([idx for r in runs for kind, idx, _ in r.events
                     if kind in (EventKind.PATH_READ, EventKind.DUMMY_PATH_READ)],
                    dtype=np.int64)


def uniformity_pvalue(leaves: np.ndarray, num_leaves: int) -> float:
    observed = np.bincount(leaves, minlength=num_leaves)
    if observed.size != num_leaves:
        raise ValueError("leaf index outside the tree")
    return float(stats.chisquare(observed).pvalue)


def check_uniformity(runs: Sequence[TraceRun], alpha: float = 0.01,
                     min_samples: int = 10_000) -> Tuple[bool, float]:
    """Chi-square goodness of fit of path-read leaves against uniform.

    Returns ``(passed, p_value)``.
    """
    leaves = path_leaves(runs)
    if leaves.size < min_samples:
        raise InsufficientSamples(f"{leaves.size} path reads < {min_samples}")
    p = uniformity_pvalue(leaves, runs[0].num_leaves)
    return p > alpha, p
