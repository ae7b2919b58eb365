"""Tree-based ORAM plumbing and the classic PathORAM.

Trees use a heap layout with the root at index 0 and children ``2i+1`` /
``2i+2``.  A bucket slot holds ``(id, leaf, payload)``; empty slots carry
``DUMMY`` ids and random payload words.  Payloads are rows of 8-byte words.
"""

from __future__ import annotations

import math
from typing import List, Optional, Tuple

import numpy as np

from .errors import CapacityExceeded, IndexOutOfRange, InvalidParam
from .kernels import flat_swap, po_access, select_word
from .trace import EventKind

DUMMY = -1
WORD = 8


def tree_height(n: int) -> int:
    """L = ceil(log2 n) - 1, clamped at 0 for n <= 2."""
    return max((int(n) - 1).bit_length() - 1, 0)


def path_indices(leaf: int, height: int) -> List[int]:
    """Heap indices of the buckets on the path of ``leaf``, leaf first."""
    return [(1 << lvl) - 1 + (leaf >> (height - lvl)) for lvl in range(height, -1, -1)]


def path_index_array(leaf: int, height: int) -> np.ndarray:
    levels = np.arange(height, -1, -1)
    return (1 << levels) - 1 + (int(leaf) >> (height - levels))


def tree_payload_bytes(height: int, bucket_size: int, block_bytes: int) -> int:
    """Payload memory of one tree: (2^(L+1) - 1) * Z * B."""
    return ((1 << (height + 1)) - 1) * bucket_size * block_bytes


def random_words(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, np.iinfo(np.uint64).max, size=shape, dtype=np.uint64,
                        endpoint=True)


def side_rng(rng: np.random.Generator) -> np.random.Generator:
    """Child generator taking exactly one draw from ``rng``."""
    return np.random.default_rng(int(rng.integers(0, 2 ** 63)))


def mix_state(rng: np.random.Generator) -> np.ndarray:
    """Seed cell for the in-kernel dummy-payload generator."""
    return random_words(rng, 1)


class LeafSource:
    """Uniform leaf labels drawn from ``rng`` in chunks."""

    def __init__(self, rng: np.random.Generator, num_leaves: int, chunk: int = 4096):
        self.rng = rng
        self.num_leaves = num_leaves
        self.chunk = chunk
        self._buf: List[int] = []

    def draw(self) -> int:
        if not self._buf:
            self._buf = self.rng.integers(0, self.num_leaves, self.chunk).tolist()
            self._buf.reverse()
        return self._buf.pop()

    def draw_below(self, bound: int) -> int:
        """Uniform integer in ``[0, bound)``, not buffered."""
        return int(self.rng.integers(0, bound))


def bytes_to_words(payload: bytes, width: int) -> np.ndarray:
    if len(payload) > width * WORD:
        raise InvalidParam(f"payload of {len(payload)} bytes exceeds block size {width * WORD}")
    buf = bytes(payload).ljust(width * WORD, b"\0")
    return np.frombuffer(buf, dtype=np.uint64).copy()


def words_to_bytes(row: np.ndarray, nbytes: int) -> bytes:
    return np.ascontiguousarray(row, dtype=np.uint64).tobytes()[:nbytes]


class OramTree:
    """Complete binary tree of ``2^(L+1) - 1`` buckets with ``Z`` slots each."""

    def __init__(self, height: int, bucket_size: int, width: int,
                 rng: np.random.Generator):
        self.height = height
        self.bucket_size = bucket_size
        self.width = width
        self.rng = rng
        nb = (1 << (height + 1)) - 1
        self.ids = np.full((nb, bucket_size), DUMMY, dtype=np.int64)
        self.leaves = np.full((nb, bucket_size), DUMMY, dtype=np.int64)
        self.data = random_words(rng, (nb, bucket_size, width))

    @property
    def num_buckets(self) -> int:
        return self.ids.shape[0]

    @property
    def num_leaves(self) -> int:
        return 1 << self.height

    @property
    def payload_bytes(self) -> int:
        return self.data.nbytes

    def read_buckets(self, idx: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.ids[idx].reshape(-1), self.leaves[idx].reshape(-1),
                self.data[idx].reshape(-1, self.width))

    def write_buckets(self, idx: np.ndarray, ids: np.ndarray, leaves: np.ndarray,
                      data: np.ndarray) -> None:
        z = self.bucket_size
        self.ids[idx] = ids.reshape(-1, z)
        self.leaves[idx] = leaves.reshape(-1, z)
        self.data[idx] = data.reshape(-1, z, self.width)

    def clear_buckets(self, idx: np.ndarray) -> None:
        """Reset buckets to all-dummy with fresh random payloads."""
        self.ids[idx] = DUMMY
        self.leaves[idx] = DUMMY
        self.data[idx] = random_words(self.rng, (len(idx), self.bucket_size, self.width))

    def refresh_dummies(self, idx: np.ndarray) -> None:
        empty = self.ids[idx] == DUMMY
        fresh = random_words(self.rng, empty.shape + (self.width,))
        self.data[idx] = np.where(empty[..., None], fresh, self.data[idx])

    def copy_buckets_from(self, other: "OramTree", idx: np.ndarray) -> None:
        self.ids[idx] = other.ids[idx]
        self.leaves[idx] = other.leaves[idx]
        self.data[idx] = other.data[idx]

    def copy_from(self, other: "OramTree") -> None:
        np.copyto(self.ids, other.ids)
        np.copyto(self.leaves, other.leaves)
        np.copyto(self.data, other.data)

    def real_blocks(self):
        """Yield ``(bucket, id, leaf)`` for every real block (audit helper)."""
        b, s = np.nonzero(self.ids != DUMMY)
        for bi, si in zip(b.tolist(), s.tolist()):
            yield bi, int(self.ids[bi, si]), int(self.leaves[bi, si])


class FlatPositionMap:
    """Dense block-id -> leaf array.

    With ``oblivious`` set, every lookup and update sweeps the whole array;
    otherwise entries are indexed directly (the PathORAM baseline keeps its
    map in plaintext).
    """

    def __init__(self, initial: np.ndarray, num_leaves: int, oblivious: bool = False):
        self.leaves = np.array(initial, dtype=np.int64)
        self.num_leaves = num_leaves
        self.oblivious = oblivious

    def __len__(self) -> int:
        return len(self.leaves)

    def _check(self, block_id: int) -> None:
        if not 0 <= block_id < len(self.leaves):
            raise IndexOutOfRange(f"block id {block_id} outside [0, {len(self.leaves)})")

    def get(self, block_id: int) -> int:
        self._check(block_id)
        if self.oblivious:
            return int(flat_swap(self.leaves, block_id, 0, False))
        return int(self.leaves[block_id])

    def set(self, block_id: int, leaf: int) -> None:
        self.swap(block_id, leaf)

    def swap(self, block_id: int, leaf: int) -> int:
        self._check(block_id)
        if self.oblivious:
            return int(flat_swap(self.leaves, block_id, leaf, True))
        old = int(self.leaves[block_id])
        self.leaves[block_id] = leaf
        return old

    def copy_from(self, other: "FlatPositionMap") -> None:
        np.copyto(self.leaves, other.leaves)


class PathOram:
    """PathORAM with eviction after every access.

    ``access`` follows the classic recipe: look up and remap the block's leaf,
    pull the path into the stash, serve/update the block, then greedily write
    the same path back, deepest level first.
    """

    def __init__(self, n: int, bucket_size: int = 4, block_bytes: int = 8, *,
                 width: Optional[int] = None, seed=None,
                 rng: Optional[np.random.Generator] = None, stash_capacity: int = 256,
                 position_map=None, initial_leaves: Optional[np.ndarray] = None):
        if n < 1 or bucket_size < 1:
            raise InvalidParam("PathORAM needs N >= 1 and Z >= 1")
        if width is None:
            if block_bytes < 1 or block_bytes % WORD:
                raise InvalidParam(f"block size must be a positive multiple of {WORD} bytes")
            width = block_bytes // WORD
        self.n = n
        self.bucket_size = bucket_size
        self.width = width
        self.block_bytes = width * WORD
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.height = tree_height(n)
        self.num_leaves = 1 << self.height
        # dummy payloads come from a side stream so leaf choices do not depend on the width
        self.tree = OramTree(self.height, bucket_size, width, side_rng(self.rng))
        if position_map is None:
            if initial_leaves is None:
                initial_leaves = self.rng.integers(0, self.num_leaves, n)
            position_map = FlatPositionMap(initial_leaves, self.num_leaves)
        self.posmap = position_map
        self.stash_capacity = stash_capacity
        self.stash_ids = np.full(stash_capacity, DUMMY, dtype=np.int64)
        self.stash_leaves = np.full(stash_capacity, DUMMY, dtype=np.int64)
        self.stash_data = np.zeros((stash_capacity, width), dtype=np.uint64)
        self.leaf_source = LeafSource(self.rng, self.num_leaves)
        self._mix_state = mix_state(self.rng)
        self._zero_row = np.zeros(width, dtype=np.uint64)
        self.max_stash = 0
        self.last_leaf: Optional[int] = None

    # -- public API ----------------------------------------------------

    def read(self, block_id: int) -> Optional[bytes]:
        row, found = self._access(block_id)
        return words_to_bytes(row, self.block_bytes) if found else None

    def write(self, block_id: int, payload: bytes) -> None:
        self._access(block_id, 1, bytes_to_words(payload, self.width))

    def access(self, op: str, block_id: int, in_val: Optional[bytes] = None) -> Optional[bytes]:
        """``op`` is ``"read"`` or ``"write"``; returns the previous payload or None."""
        if op == "read":
            return self.read(block_id)
        if op != "write" or in_val is None:
            raise InvalidParam("write needs a payload")
        row, found = self._access(block_id, 1, bytes_to_words(in_val, self.width))
        return words_to_bytes(row, self.block_bytes) if found else None

    def stash_size(self) -> int:
        return int(np.count_nonzero(self.stash_ids != DUMMY))

    # -- internals -----------------------------------------------------

    def _access(self, block_id: int, mode: int = 0, row: Optional[np.ndarray] = None,
                off: int = 0, val: int = 0):
        """Run one access; ``mode`` as in :func:`kernels.po_access`."""
        if not 0 <= block_id < self.n:
            raise IndexOutOfRange(f"block id {block_id} outside [0, {self.n})")
        new_leaf = self.leaf_source.draw()
        leaf = self.posmap.swap(block_id, new_leaf)
        self.last_leaf = leaf
        out = np.empty(self.width, dtype=np.uint64)
        t = self.tree
        found, m = po_access(t.ids, t.leaves, t.data, self.stash_ids, self.stash_leaves,
                             self.stash_data, self.height, leaf, block_id, new_leaf, mode,
                             self._zero_row if row is None else row, off,
                             np.uint64(val), out, self._mix_state)
        if m < 0:
            raise CapacityExceeded(f"PathORAM stash overflow (capacity {self.stash_capacity})")
        self.max_stash = max(self.max_stash, m)
        return out, bool(found)

    def bulk_load(self, rows: np.ndarray, leaves: np.ndarray) -> None:
        """Place block ``i`` (payload ``rows[i]``) on the path of ``leaves[i]``.

        Each block goes into the deepest bucket of its path with a free slot;
        used once at construction, before any access.
        """
        fill = np.zeros(self.tree.num_buckets, dtype=np.int64)
        stash_n = 0
        for i, leaf in enumerate(np.asarray(leaves).tolist()):
            for b in path_indices(leaf, self.height):
                if fill[b] < self.bucket_size:
                    s = fill[b]
                    self.tree.ids[b, s] = i
                    self.tree.leaves[b, s] = leaf
                    self.tree.data[b, s] = rows[i]
                    fill[b] += 1
                    break
            else:
                if stash_n >= self.stash_capacity:
                    raise CapacityExceeded("bulk load overflowed the stash")
                self.stash_ids[stash_n] = i
                self.stash_leaves[stash_n] = leaf
                self.stash_data[stash_n] = rows[i]
                stash_n += 1

    def copy_state_from(self, other: "PathOram") -> None:
        self.tree.copy_from(other.tree)
        np.copyto(self.stash_ids, other.stash_ids)
        np.copyto(self.stash_leaves, other.stash_leaves)
        np.copyto(self.stash_data, other.stash_data)
        self.posmap.copy_from(other.posmap)

    def audit(self) -> List[str]:
        """Placement-invariant violations: real blocks off their mapped path."""
        problems = []
        for bucket, bid, tag in self.tree.real_blocks():
            want = self._peek_leaf(bid)
            if tag != want or bucket not in path_indices(want, self.height):
                problems.append(f"block {bid} in bucket {bucket}, mapped to leaf {want}")
        return problems

    def _peek_leaf(self, block_id: int) -> int:
        if isinstance(self.posmap, FlatPositionMap):
            return int(self.posmap.leaves[block_id])
        return self.posmap.peek(block_id)


class RecursivePositionMap:
    """Block-id -> leaf map stored in a chain of PathORAMs.

    Entries are packed ``fan_out`` to a block; the inner ORAM's own position
    map is again recursive until it fits in ``base_size`` entries, where a
    flat map swept on every access takes over.
    """

    def __init__(self, initial: np.ndarray, num_leaves: int, *, fan_out: int = 64,
                 base_size: int = 256, bucket_size: int = 4,
                 rng: Optional[np.random.Generator] = None, seed=None,
                 stash_capacity: int = 64, trace=None, depth: int = 0):
        if fan_out < 2 or base_size < 1:
            raise InvalidParam("fan_out must be >= 2 and base_size >= 1")
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.n = len(initial)
        self.num_leaves = num_leaves
        self.fan_out = fan_out
        self.trace = trace
        self.depth = depth
        self._flat: Optional[FlatPositionMap] = None
        self._inner: Optional[PathOram] = None
        if self.n <= base_size:
            self._flat = FlatPositionMap(initial, num_leaves, oblivious=True)
            return
        nblocks = math.ceil(self.n / fan_out)
        rows = np.zeros(nblocks * fan_out, dtype=np.int64)
        rows[:self.n] = initial
        rows = rows.reshape(nblocks, fan_out)
        inner_height = tree_height(nblocks)
        inner_leaves = self.rng.integers(0, 1 << inner_height, nblocks)
        inner_map = RecursivePositionMap(
            inner_leaves, 1 << inner_height, fan_out=fan_out, base_size=base_size,
            bucket_size=bucket_size, rng=self.rng, stash_capacity=stash_capacity,
            trace=trace, depth=depth + 1)
        self._inner = PathOram(nblocks, bucket_size, width=fan_out,
                               rng=self.rng, stash_capacity=stash_capacity,
                               position_map=inner_map)
        self._inner.bulk_load(rows.view(np.uint64), inner_leaves)

    @classmethod
    def random(cls, n: int, num_leaves: int, rng: np.random.Generator, **kw):
        return cls(rng.integers(0, num_leaves, n), num_leaves, rng=rng, **kw)

    @property
    def levels(self) -> int:
        """Recursion depth below this map (0 for a flat map)."""
        return 0 if self._inner is None else 1 + self._inner.posmap.levels

    def __len__(self) -> int:
        return self.n

    def _check(self, block_id: int) -> None:
        if not 0 <= block_id < self.n:
            raise IndexOutOfRange(f"block id {block_id} outside [0, {self.n})")

    def get(self, block_id: int) -> int:
        self._check(block_id)
        if self.trace is not None:
            self.trace.emit(EventKind.POSMAP_WALK, self.depth)
        if self._flat is not None:
            return self._flat.get(block_id)
        blk, off = divmod(block_id, self.fan_out)
        row, _ = self._inner._access(blk, 0)
        return int(select_word(row, off))

    def set(self, block_id: int, leaf: int) -> None:
        self.swap(block_id, leaf)

    def swap(self, block_id: int, leaf: int) -> int:
        self._check(block_id)
        if self.trace is not None:
            self.trace.emit(EventKind.POSMAP_WALK, self.depth)
        if self._flat is not None:
            return self._flat.swap(block_id, leaf)
        blk, off = divmod(block_id, self.fan_out)
        row, _ = self._inner._access(blk, 2, off=off, val=leaf)
        return int(select_word(row, off))

    def peek(self, block_id: int) -> int:
        """Non-oblivious read for audits and tests; leaves ORAM state untouched."""
        if self._flat is not None:
            return int(self._flat.leaves[block_id])
        blk, off = divmod(block_id, self.fan_out)
        inner = self._inner
        hit = inner.stash_ids == blk
        if hit.any():
            return int(inner.stash_data[np.argmax(hit), off].view(np.int64))
        b, s = np.nonzero(inner.tree.ids == blk)
        return int(inner.tree.data[b[0], s[0], off].view(np.int64))

    def snapshot(self) -> np.ndarray:
        """All entries at once (non-oblivious; for audits and tests)."""
        if self._flat is not None:
            return self._flat.leaves.copy()
        inner = self._inner
        rows = np.zeros((inner.n, self.fan_out), dtype=np.int64)
        for ids, data in ((inner.tree.ids.reshape(-1), inner.tree.data.reshape(-1, inner.width)),
                          (inner.stash_ids, inner.stash_data)):
            real = ids != DUMMY
            rows[ids[real]] = data[real].view(np.int64)
        return rows.reshape(-1)[:self.n]

    def copy_from(self, other: "RecursivePositionMap") -> None:
        """Become a logical and physical clone of ``other`` (full-state copy)."""
        if self._flat is not None:
            self._flat.copy_from(other._flat)
        else:
            self._inner.copy_state_from(other._inner)
