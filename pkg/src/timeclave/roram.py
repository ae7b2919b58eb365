"""Read-optimised ORAM with dual trees and batched eviction.

Reads pull a path of the read tree ``tr_r`` into the stash ``s`` and are
served from there; nothing is written back per access.  Every ``r`` path
accesses the batch is evicted: the stash is swapped into ``s_tmp``, its
blocks are written greedily into the write tree ``tr_w`` along the recorded
paths, and the written buckets are then copied into ``tr_r``.

Writes also fetch one path (the block's current path, or an unused dummy path
when the block is already stashed) so that the block's old tree copy is
folded into the stash and read/write traces have the same shape.

In ``concurrent`` mode the path-writing phase runs on a worker thread while
reads continue against ``tr_r`` and a read-only ``s_tmp``; the foreground
thread performs the synchronisation before its next operation.
"""

from __future__ import annotations

import bisect
import hashlib
import threading
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from . import kernels as K
from .errors import CapacityExceeded, IndexOutOfRange, InvalidParam
from .pathoram import (DUMMY, WORD, LeafSource, OramTree, RecursivePositionMap,
                       bytes_to_words, mix_state, side_rng, tree_height,
                       tree_payload_bytes, words_to_bytes)
from .trace import (OP_READ, OP_WRITE, PHASE_DONE, PHASE_SWAP, PHASE_SYNC,
                    EventKind, TraceRecorder)


@dataclass(frozen=True)
class RoOramConfig:
    n: int
    z: int = 4
    block_bytes: int = 64
    r: int = 32
    seed: Optional[int] = None
    stash_factor: Optional[int] = None
    concurrent: bool = False

    def __post_init__(self):
        if self.n < 2:
            raise InvalidParam("N must be >= 2")
        if self.z < 1:
            raise InvalidParam("Z must be >= 1")
        if self.block_bytes < WORD or self.block_bytes % WORD:
            raise InvalidParam(f"block size must be a positive multiple of {WORD} bytes")
        if self.stash_factor is None:
            # reads during a background batch plus their post-sync refolds need twice the room
            object.__setattr__(self, "stash_factor", 4 if self.concurrent else 2)
        if self.stash_factor < 2:
            raise InvalidParam("stash_factor must be >= 2")
        if not 1 <= self.r <= 1 << self.height:
            raise InvalidParam(f"R must lie in [1, {1 << self.height}] for N={self.n}")

    @property
    def height(self) -> int:
        return tree_height(self.n)

    @property
    def num_leaves(self) -> int:
        return 1 << self.height

    @property
    def path_slots(self) -> int:
        return (self.height + 1) * self.z

    @property
    def stash_capacity(self) -> int:
        return self.stash_factor * self.path_slots * self.r

    def digest(self) -> str:
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()


class Stash:
    """Fixed-capacity block buffer; ``used`` is the swept prefix."""

    def __init__(self, capacity: int, width: int):
        self.ids = np.full(capacity, DUMMY, dtype=np.int64)
        self.leaves = np.full(capacity, DUMMY, dtype=np.int64)
        self.data = np.zeros((capacity, width), dtype=np.uint64)
        self.used = 0

    @property
    def capacity(self) -> int:
        return self.ids.shape[0]

    def clear(self) -> None:
        self.ids[:self.used] = DUMMY
        self.leaves[:self.used] = DUMMY
        self.used = 0

    def real_count(self) -> int:
        return int(np.count_nonzero(self.ids[:self.used] != DUMMY))

    def real_ids(self) -> np.ndarray:
        ids = self.ids[:self.used]
        return ids[ids != DUMMY]


class _Batch:
    """State handed to the path-writing phase."""

    def __init__(self, paths: List[int]):
        self.paths = np.array(paths, dtype=np.int64)
        self.placed: Optional[np.ndarray] = None
        self.written: Optional[np.ndarray] = None
        self.ev_kind: Optional[np.ndarray] = None
        self.ev_bucket: Optional[np.ndarray] = None
        self.done = threading.Event()
        self.error: Optional[BaseException] = None


class RoOram:
    def __init__(self, cfg: RoOramConfig, trace: Optional[TraceRecorder] = None):
        self.cfg = cfg
        self.trace = trace
        self.height = cfg.height
        self.num_leaves = cfg.num_leaves
        self.width = cfg.block_bytes // WORD
        rng = np.random.default_rng(cfg.seed)
        self.rng = rng
        # dummy payloads come from a side stream so leaf choices do not depend on B
        fill = side_rng(rng)
        self.tr_r = OramTree(self.height, cfg.z, self.width, fill)
        self.tr_w = OramTree(self.height, cfg.z, self.width, fill)
        np.copyto(self.tr_w.data, self.tr_r.data)
        self.s = Stash(cfg.stash_capacity, self.width)
        self.s_tmp = Stash(cfg.stash_capacity, self.width)
        self.p_l: List[int] = []
        self._p_l_sorted: List[int] = []
        initial = rng.integers(0, self.num_leaves, cfg.n)
        self.pos = RecursivePositionMap(initial, self.num_leaves, rng=rng, trace=trace)
        self.pos_tmp = RecursivePositionMap(initial, self.num_leaves, rng=rng, trace=trace)
        self.leaf_source = LeafSource(rng, self.num_leaves)
        self._mix = mix_state(rng)
        self._zero_row = np.zeros(self.width, dtype=np.uint64)
        self._lock = threading.RLock()
        self._inflight: Optional[_Batch] = None
        self._x_live = False
        self.last_written = np.zeros(0, dtype=np.int64)
        self.evictions = 0
        self.forced_evictions = 0
        self.max_stash_used = 0

    # -- public API ----------------------------------------------------

    def read(self, block_id: int) -> Optional[bytes]:
        row, found = self.read_words(block_id)
        return words_to_bytes(row, self.cfg.block_bytes) if found else None

    def write(self, block_id: int, payload: bytes) -> None:
        self.write_words(block_id, bytes_to_words(payload, self.width))

    def access(self, op: str, block_id: int, in_val: Optional[bytes] = None):
        if op == "read":
            return self.read(block_id)
        if op != "write" or in_val is None:
            raise InvalidParam("write needs a payload")
        self.write(block_id, in_val)
        return None

    def read_words(self, block_id: int):
        """Read block ``block_id``; returns ``(row, found)`` with ``row`` as uint64 words."""
        self._check(block_id)
        with self._lock:
            self._maybe_sync()
            self._emit(EventKind.OP, OP_READ)
            self._ensure_room()
            out = np.empty(self.width, dtype=np.uint64)
            new_leaf = self._fetch(block_id)
            s = self.s
            found = K.ro_select(s.ids, s.leaves, s.data, s.used, block_id, True, new_leaf, out)
            carry = False
            if self._x_live:
                x = self.s_tmp
                tmp_row = np.empty(self.width, dtype=np.uint64)
                in_x = K.ro_select(x.ids, x.leaves, x.data, x.used, block_id, False, 0, tmp_row)
                carry = bool(in_x) and not found
                if carry:
                    out = tmp_row
                found = bool(found) or carry
                s.used = K.ro_append(s.ids, s.leaves, s.data, s.used, carry, block_id,
                                     new_leaf, tmp_row)
            else:
                s.used = K.ro_append(s.ids, s.leaves, s.data, s.used, False, block_id,
                                     new_leaf, self._zero_row)
            self._emit(EventKind.STASH_SWEEP, 0)
            self._after_access()
            return out, bool(found)

    def write_words(self, block_id: int, row: np.ndarray) -> None:
        self._check(block_id)
        row = np.ascontiguousarray(row, dtype=np.uint64)
        if row.shape != (self.width,):
            raise InvalidParam(f"row must have {self.width} words")
        with self._lock:
            self._drain()
            self._emit(EventKind.OP, OP_WRITE)
            self._ensure_room()
            new_leaf = self._fetch(block_id)
            s = self.s
            found = K.ro_overwrite(s.ids, s.leaves, s.data, s.used, block_id, new_leaf, row)
            s.used = K.ro_append(s.ids, s.leaves, s.data, s.used, not found, block_id,
                                 new_leaf, row)
            self._emit(EventKind.STASH_SWEEP, 0)
            self._after_access()

    def evict(self) -> None:
        """Run a batch eviction over the paths recorded so far and wait for it."""
        with self._lock:
            self._drain()
            self._start_eviction()
            self._drain()

    def flush(self) -> None:
        """Wait for any in-flight eviction and synchronise."""
        with self._lock:
            self._drain()

    close = flush

    def stash_size(self) -> int:
        return self.s.real_count()

    def memory_bytes(self) -> Dict[str, int]:
        tree = tree_payload_bytes(self.height, self.cfg.z, self.cfg.block_bytes)
        stash = self.cfg.stash_capacity * self.cfg.block_bytes
        return {"trees": 2 * tree, "stashes": 2 * stash, "total": 2 * tree + 2 * stash}

    # -- access internals ----------------------------------------------

    def _check(self, block_id: int) -> None:
        if not 0 <= block_id < self.cfg.n:
            raise IndexOutOfRange(f"block id {block_id} outside [0, {self.cfg.n})")

    def _emit(self, kind: int, index: int) -> None:
        if self.trace is not None:
            self.trace.emit(kind, index)

    def _fetch(self, block_id: int) -> int:
        """Remap ``block_id`` in pos_tmp and fold one path of tr_r into s.

        The path is the block's current one unless the block is already
        stashed or that leaf was read earlier this batch, in which case an
        unused leaf is read instead.  Returns the new leaf.
        """
        x = self.pos.get(block_id)
        new_leaf = self.leaf_source.draw()
        self.pos_tmp.set(block_id, new_leaf)
        s, xs = self.s, self.s_tmp
        stashed = K.count_matches(s.ids, s.used, block_id) > 0
        if self._x_live:
            stashed = stashed or K.count_matches(xs.ids, xs.used, block_id) > 0
        dummy = self._dummy_leaf()
        use_dummy = stashed or self._path_used(x)
        leaf = dummy if use_dummy else x
        self._emit(EventKind.DUMMY_PATH_READ if use_dummy else EventKind.PATH_READ, leaf)
        self.p_l.append(leaf)
        bisect.insort(self._p_l_sorted, leaf)
        self._fold(leaf)
        return new_leaf

    def _fold(self, leaf: int) -> None:
        s, xs = self.s, self.s_tmp
        t = self.tr_r
        used = K.ro_fold(t.ids, t.leaves, t.data, self.height, leaf, s.ids, s.leaves,
                         s.data, s.used, xs.ids, xs.used if self._x_live else 0)
        if used < 0:
            raise CapacityExceeded("stash cannot hold another path")
        s.used = used
        self.max_stash_used = max(self.max_stash_used, used)

    def _path_used(self, leaf: int) -> bool:
        i = bisect.bisect_left(self._p_l_sorted, leaf)
        return i < len(self._p_l_sorted) and self._p_l_sorted[i] == leaf

    def _dummy_leaf(self) -> int:
        """Uniform leaf among those not yet read this batch."""
        k = self.leaf_source.draw_below(self.num_leaves - len(self._p_l_sorted))
        for u in self._p_l_sorted:
            if u <= k:
                k += 1
        return k

    def _room(self) -> bool:
        return self.s.used + self.cfg.path_slots + 1 <= self.s.capacity

    def _ensure_room(self) -> None:
        if self._room():
            return
        self._drain()
        if self._room():
            return
        self.forced_evictions += 1
        self._start_eviction()
        self._drain()
        if not self._room():
            raise CapacityExceeded(
                f"stash holds {self.s.real_count()} blocks after eviction; "
                f"capacity {self.s.capacity} too small")

    def _after_access(self) -> None:
        if len(self.p_l) >= self.cfg.r:
            self._drain()
            self._start_eviction()
            if not self.cfg.concurrent:
                self._drain()

    # -- eviction ------------------------------------------------------

    def _start_eviction(self) -> None:
        """Swap s and s_tmp, hand the recorded paths to the path-writing phase."""
        self._emit(EventKind.PHASE, PHASE_SWAP)
        self.s, self.s_tmp = self.s_tmp, self.s
        x = self.s_tmp
        # stash size is public at sync anyway; dropping dummies here shortens every bucket fill
        x.used = K.compact(x.ids, x.leaves, x.data, x.used)
        batch = _Batch(self.p_l)
        self.p_l = []
        self._p_l_sorted = []
        self._inflight = batch
        self.evictions += 1
        if self.cfg.concurrent:
            self._x_live = True
            threading.Thread(target=self._write_paths, args=(batch,), daemon=True).start()
        else:
            self._write_paths(batch)

    def _write_paths(self, batch: _Batch) -> None:
        try:
            x = self.s_tmp
            n_ev = len(batch.paths) * (self.height + 1)
            batch.placed = np.zeros(x.used, dtype=np.bool_)
            batch.ev_kind = np.zeros(n_ev, dtype=np.int64)
            batch.ev_bucket = np.zeros(n_ev, dtype=np.int64)
            w = self.tr_w
            batch.written = K.ro_evict_paths(
                x.ids, x.leaves, x.data, x.used, batch.paths, len(batch.paths), self.height,
                w.ids, w.leaves, w.data, self._mix, batch.placed, batch.ev_kind,
                batch.ev_bucket)
        except BaseException as exc:  # surfaced on the foreground thread
            batch.error = exc
        finally:
            batch.done.set()

    def _maybe_sync(self) -> None:
        if self._inflight is not None and self._inflight.done.is_set():
            self._sync()

    def _drain(self) -> None:
        if self._inflight is not None:
            self._inflight.done.wait()
            self._sync()

    def _sync(self) -> None:
        batch, self._inflight = self._inflight, None
        if batch.error is not None:
            raise batch.error
        if self.trace is not None:
            for kind, bucket in zip(batch.ev_kind.tolist(), batch.ev_bucket.tolist()):
                self.trace.emit(kind, bucket)
        self._emit(EventKind.PHASE, PHASE_SYNC)
        s, x = self.s, self.s_tmp
        written = batch.written
        if self._x_live:
            # blocks re-stashed while the batch was being written win over their old copies
            K.ro_purge(self.tr_w.ids, self.tr_w.leaves, written, s.ids, s.used)
        self.tr_r.copy_buckets_from(self.tr_w, written)
        if self.trace is not None:
            for b in batch.ev_bucket.tolist():
                self.trace.emit(EventKind.SYNC_COPY, b)
        self.pos.copy_from(self.pos_tmp)
        used = K.ro_merge_leftovers(x.ids, x.leaves, x.data, x.used, batch.placed,
                                    s.ids, s.leaves, s.data, s.used)
        if used < 0:
            raise CapacityExceeded("stash cannot absorb eviction leftovers")
        s.used = used
        x.clear()
        was_live, self._x_live = self._x_live, False
        if was_live and self.p_l:
            # paths read during the batch saw tr_r before the copy; pick up what landed there
            s.used = K.compact(s.ids, s.leaves, s.data, s.used)
            for leaf in self.p_l:
                self._fold(leaf)
        s.used = K.compact(s.ids, s.leaves, s.data, s.used)
        self.last_written = written
        self._emit(EventKind.PHASE, PHASE_DONE)

    # -- audit helpers -------------------------------------------------

    def audit(self, written: Optional[np.ndarray] = None,
              expected_ids=None) -> List[str]:
        """Placement and tree-agreement violations in the current state.

        Call when no eviction is in flight.  Every real block in ``tr_r`` that
        is not superseded by a stashed copy must sit on the path of its
        ``pos`` leaf with a matching tag; ``tr_r`` and ``tr_w`` must agree on
        ``written`` (default: the buckets of the last eviction).  Ids in
        ``expected_ids`` must be present somewhere.
        """
        problems: List[str] = []
        stashed = np.union1d(self.s.real_ids(), self.s_tmp.real_ids())
        pos = self.pos.snapshot()
        bucket, _ = np.nonzero(self.tr_r.ids != DUMMY)
        real = self.tr_r.ids != DUMMY
        ids = self.tr_r.ids[real]
        tags = self.tr_r.leaves[real]
        keep = ~np.isin(ids, stashed)
        bucket, ids, tags = bucket[keep], ids[keep], tags[keep]
        uniq, counts = np.unique(ids, return_counts=True)
        for bid in uniq[counts > 1].tolist():
            problems.append(f"block {bid} twice in the read tree")
        want = pos[ids]
        level = np.frexp((bucket + 1).astype(np.float64))[1] - 1
        on_path = (1 << level) - 1 + (want >> (self.height - level))
        for i in np.nonzero((tags != want) | (bucket != on_path))[0].tolist():
            problems.append(f"block {ids[i]} in bucket {bucket[i]}, mapped to leaf {want[i]}")
        if expected_ids is not None:
            exp = np.fromiter(expected_ids, dtype=np.int64)
            for bid in exp[~np.isin(exp, np.union1d(stashed, ids))].tolist():
                problems.append(f"block {bid} lost")
        if written is None:
            written = self.last_written
        for b in np.asarray(written).tolist():
            if not (np.array_equal(self.tr_r.ids[b], self.tr_w.ids[b])
                    and np.array_equal(self.tr_r.leaves[b], self.tr_w.leaves[b])
                    and np.array_equal(self.tr_r.data[b], self.tr_w.data[b])):
                problems.append(f"trees disagree on bucket {b}")
        return problems

    def locate(self, block_id: int) -> List[str]:
        """Where copies of ``block_id`` live (debug helper)."""
        out = []
        for name, st in (("s", self.s), ("s_tmp", self.s_tmp)):
            if np.any(st.ids[:st.used] == block_id):
                out.append(name)
        for name, tree in (("tr_r", self.tr_r), ("tr_w", self.tr_w)):
            b, _ = np.nonzero(tree.ids == block_id)
            out.extend(f"{name}[{x}]" for x in b.tolist())
        return out
