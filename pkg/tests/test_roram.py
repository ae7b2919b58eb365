import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timeclave.errors import CapacityExceeded, IndexOutOfRange, InvalidParam
from timeclave.pathoram import path_indices
from timeclave.roram import RoOram, RoOramConfig
from timeclave.trace import (PHASE_DONE, PHASE_SWAP, PHASE_SYNC, EventKind, TraceRecorder,
                             TraceRun, distinct_path_violations)


def run_against_dict(oram, n, ops, rng, audit=False, write_frac=0.5):
    """Random read/write mix checked against a dict; optionally audit after each eviction."""
    ref = {}
    width = oram.cfg.block_bytes
    seen = oram.evictions
    audits = 0
    for _ in range(ops):
        bid = int(rng.integers(n))
        if rng.random() < write_frac:
            payload = rng.bytes(width)
            oram.write(bid, payload)
            ref[bid] = payload
        else:
            assert oram.read(bid) == ref.get(bid), f"block {bid}"
        if audit and oram.evictions != seen:
            oram.flush()
            seen = oram.evictions
            assert oram.audit(expected_ids=ref.keys()) == []
            audits += 1
    oram.flush()
    for bid in range(n):
        assert oram.read(bid) == ref.get(bid)
    return audits


class TestConfig:
    def test_defaults(self):
        cfg = RoOramConfig(1024)
        assert (cfg.z, cfg.block_bytes, cfg.r) == (4, 64, 32)
        assert cfg.height == 9 and cfg.num_leaves == 512
        assert cfg.path_slots == 40
        assert cfg.stash_capacity == 2 * 40 * 32
        assert RoOramConfig(1024, concurrent=True).stash_capacity == 4 * 40 * 32

    @pytest.mark.parametrize("kw", [dict(n=1), dict(n=8, z=0), dict(n=8, block_bytes=12),
                                    dict(n=8, block_bytes=0), dict(n=8, r=0),
                                    dict(n=8, r=5), dict(n=8, stash_factor=1)])
    def test_invalid(self, kw):
        with pytest.raises(InvalidParam):
            RoOramConfig(**kw)

    def test_edge_values_accepted(self):
        o = RoOram(RoOramConfig(2, z=1, block_bytes=8, r=1, seed=0))
        o.write(1, b"a")
        assert o.read(1) == b"a".ljust(8, b"\0")
        assert o.read(0) is None

    def test_digest_stable(self):
        assert RoOramConfig(64, seed=1).digest() == RoOramConfig(64, seed=1).digest()
        assert RoOramConfig(64, seed=1).digest() != RoOramConfig(64, seed=2).digest()


def test_small_example():
    o = RoOram(RoOramConfig(16, block_bytes=16, r=2, seed=3))
    o.write(5, b"five")
    o.write(6, b"six")
    assert o.read(5) == b"five".ljust(16, b"\0")
    o.write(5, b"FIVE")
    assert o.read(5) == b"FIVE".ljust(16, b"\0")
    assert o.read(7) is None
    with pytest.raises(IndexOutOfRange):
        o.read(16)
    with pytest.raises(InvalidParam):
        o.write_words(0, np.zeros(3, dtype=np.uint64))


@pytest.mark.parametrize("n,r", [(64, 1), (64, 4), (64, 32), (300, 8), (1024, 32)])
def test_random_ops_match_dict(n, r):
    o = RoOram(RoOramConfig(n, block_bytes=16, r=r, seed=n + r))
    run_against_dict(o, n, 4000, np.random.default_rng(r))


@pytest.mark.parametrize("r", [1, 4, 32])
def test_audit_after_every_eviction(r):
    o = RoOram(RoOramConfig(256, block_bytes=8, r=r, seed=r))
    audits = run_against_dict(o, 256, 3000, np.random.default_rng(0), audit=True)
    assert audits >= 3000 // r - 1


@pytest.mark.parametrize("r", [1, 4, 32])
def test_concurrent_mode_matches_dict(r):
    o = RoOram(RoOramConfig(256, block_bytes=8, r=r, seed=9, concurrent=True))
    run_against_dict(o, 256, 4000, np.random.default_rng(r), write_frac=0.3)
    o.flush()
    assert o.audit() == []


def test_read_heavy_hot_block_keeps_value():
    o = RoOram(RoOramConfig(64, block_bytes=8, r=4, seed=0))
    o.write(0, b"hot")
    for _ in range(500):
        assert o.read(0) == b"hot".ljust(8, b"\0")
    assert o.stash_size() < o.s.capacity


def test_forced_eviction_when_stash_full():
    # with Z=1 most blocks stay stashed, so the stash fills before R paths are read
    o = RoOram(RoOramConfig(256, z=1, block_bytes=8, r=8, seed=1))
    rng = np.random.default_rng(1)
    ref = {}
    for _ in range(3000):
        bid = int(rng.integers(256))
        o.write(bid, bid.to_bytes(8, "little"))
        ref[bid] = bid.to_bytes(8, "little")
    assert o.forced_evictions > 0
    for bid, v in ref.items():
        assert o.read(bid) == v


def test_undersized_stash_raises():
    with pytest.raises(CapacityExceeded):
        o = RoOram(RoOramConfig(1 << 12, z=1, block_bytes=8, r=1, seed=0))
        for bid in range(1 << 12):
            o.write(bid, b"x")


def test_evict_on_fresh_state_only_marks_phases():
    rec = TraceRecorder()
    o = RoOram(RoOramConfig(64, r=4, seed=0), trace=rec)
    o.evict()
    kinds = [(k, i) for k, i, _ in rec.events]
    assert kinds == [(EventKind.PHASE, PHASE_SWAP), (EventKind.PHASE, PHASE_SYNC),
                     (EventKind.PHASE, PHASE_DONE)]
    assert o.audit() == []


def eviction_windows(events):
    """Split debug-labelled events into per-eviction (paths, write/fake buckets, copies)."""
    out = []
    paths = []
    cur = None
    for kind, idx, _ in events:
        if kind in (EventKind.PATH_READ, EventKind.DUMMY_PATH_READ):
            paths.append(idx)
        elif kind == EventKind.PHASE and idx == PHASE_SWAP:
            cur = {"paths": paths, "write": [], "fake": [], "copy": []}
            paths = []
        elif cur is not None and kind == EventKind.BUCKET_WRITE:
            cur["write"].append(idx)
        elif cur is not None and kind == EventKind.FAKE_BUCKET_ACCESS:
            cur["fake"].append(idx)
        elif cur is not None and kind == EventKind.SYNC_COPY:
            cur["copy"].append(idx)
        elif kind == EventKind.PHASE and idx == PHASE_DONE:
            out.append(cur)
            cur = None
    return out


@pytest.mark.parametrize("r", [2, 8])
def test_eviction_touches_each_bucket_once(r):
    rec = TraceRecorder(debug_labels=True)
    o = RoOram(RoOramConfig(256, block_bytes=8, r=r, seed=4), trace=rec)
    rng = np.random.default_rng(4)
    for _ in range(20 * r):
        o.read(int(rng.integers(256)))
    windows = eviction_windows(rec.events)
    assert len(windows) == 20
    for w in windows:
        assert len(w["paths"]) == r
        expect = [b for leaf in w["paths"] for b in path_indices(leaf, o.height)]
        assert sorted(w["write"] + w["fake"]) == sorted(expect)
        assert sorted(w["write"]) == sorted(set(expect))
        assert len(w["copy"]) == r * (o.height + 1)


def test_two_paths_share_root():
    rec = TraceRecorder(debug_labels=True)
    o = RoOram(RoOramConfig(8, block_bytes=8, r=2, seed=0), trace=rec)
    o.read(0)
    o.read(1)
    (w,) = eviction_windows(rec.events)
    a, b = w["paths"]
    shared = set(path_indices(a, o.height)) & set(path_indices(b, o.height))
    assert 0 in shared
    assert sorted(w["fake"]) == sorted(shared)


@pytest.mark.parametrize("r", [4, 32])
def test_hot_block_paths_distinct(r):
    rec = TraceRecorder()
    o = RoOram(RoOramConfig(1024, r=r, seed=r), trace=rec)
    for _ in range(5000):
        o.read(0)
    run = TraceRun(o.cfg.digest(), rec.events, height=o.height)
    assert distinct_path_violations(run) == 0


@pytest.mark.parametrize("height", [3, 6, 9, 12])
def test_bucket_touches_linear_in_height(height):
    n = 2 << height
    rec = TraceRecorder(debug_labels=True)
    o = RoOram(RoOramConfig(n, block_bytes=8, r=4, seed=0), trace=rec)
    assert o.height == height
    for bid in range(64):
        o.read(bid % n)
    paths = sum(1 for k, _, _ in rec.events
                if k in (EventKind.PATH_READ, EventKind.DUMMY_PATH_READ))
    writes = sum(1 for k, _, _ in rec.events
                 if k in (EventKind.BUCKET_WRITE, EventKind.FAKE_BUCKET_ACCESS))
    assert paths == 64
    # each read costs one path of L+1 buckets now, and L+1 bucket writes at eviction
    assert writes == 64 * (height + 1)


def test_memory_accounting():
    o = RoOram(RoOramConfig(8640, z=4, block_bytes=64, r=32))
    m = o.memory_bytes()
    assert m["trees"] == 2 * (2 ** 14 - 1) * 4 * 64
    assert m["total"] == m["trees"] + m["stashes"]
    assert o.tr_r.data.nbytes == m["trees"] // 2


def test_same_seed_same_leaves_across_block_size():
    def leaves(b):
        rec = TraceRecorder()
        o = RoOram(RoOramConfig(128, block_bytes=b, r=4, seed=7), trace=rec)
        for bid in range(40):
            o.read(bid)
        return [(k, i) for k, i, _ in rec.events]

    assert leaves(8) == leaves(128)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 16), st.lists(st.tuples(st.booleans(), st.integers(0, 31)), max_size=150))
def test_property_matches_dict(r, ops):
    o = RoOram(RoOramConfig(32, block_bytes=8, r=r, seed=r))
    ref = {}
    for is_write, bid in ops:
        if is_write:
            o.write(bid, bytes([bid, len(ref)]))
            ref[bid] = bytes([bid, len(ref)]).ljust(8, b"\0")
        else:
            assert o.read(bid) == ref.get(bid)
    o.flush()
    assert o.audit(expected_ids=ref.keys()) == []
