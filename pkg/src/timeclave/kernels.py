"""Compiled inner loops for the ORAM controllers.

Every sweep here visits the full (used part of the) buffer in index order and
folds matches in with masks, so the number and order of element visits depend
only on buffer sizes.  Payload rows are ``uint64`` words; ids and leaf tags
are ``int64`` with ``-1`` marking an empty slot.
"""

from __future__ import annotations

import numpy as np
from numba import njit

DUMMY = -1
EV_WRITE = 2
EV_FAKE = 3

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_ZERO = np.uint64(0)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)


@njit(cache=True)
def splitmix64(state):
    state[0] += _GOLDEN
    z = state[0]
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@njit(cache=True)
def _mask(flag):
    return _ZERO - np.uint64(flag)


@njit(cache=True)
def _bucket(height, leaf, lvl):
    return (1 << lvl) - 1 + (leaf >> (height - lvl))


@njit(cache=True)
def _bitlen(x, height):
    # fixed trip count: x < 2**height
    n = 0
    for b in range(height):
        n += (x >> b) != 0
    return n


@njit(cache=True)
def _clear_bucket(t_ids, t_leaves, t_data, b, rng_state):
    for z in range(t_ids.shape[1]):
        t_ids[b, z] = DUMMY
        t_leaves[b, z] = DUMMY
        for w in range(t_data.shape[2]):
            t_data[b, z, w] = splitmix64(rng_state)


@njit(cache=True)
def po_access(t_ids, t_leaves, t_data, s_ids, s_leaves, s_data, height, leaf,
              block_id, new_leaf, mode, in_row, off, val, out_row, rng_state):
    """One PathORAM access on the path of ``leaf``.

    mode 0 reads, 1 replaces the payload with ``in_row``, 2 sets word ``off``
    of the payload to ``val``.  The previous payload lands in ``out_row``.
    Returns ``(found, stash_count)``; ``stash_count`` is -1 on overflow.
    """
    Z = t_ids.shape[1]
    W = t_data.shape[2]
    C = s_ids.shape[0]
    K = (height + 1) * Z
    M = C + K
    ws_ids = np.empty(M, np.int64)
    ws_leaves = np.empty(M, np.int64)
    ws_data = np.empty((M, W), np.uint64)
    for i in range(C):
        ws_ids[i] = s_ids[i]
        ws_leaves[i] = s_leaves[i]
        for w in range(W):
            ws_data[i, w] = s_data[i, w]
    for r in range(height + 1):
        b = _bucket(height, leaf, height - r)
        for z in range(Z):
            j = C + r * Z + z
            ws_ids[j] = t_ids[b, z]
            ws_leaves[j] = t_leaves[b, z]
            for w in range(W):
                ws_data[j, w] = t_data[b, z, w]

    found = False
    for w in range(W):
        out_row[w] = _ZERO
    for i in range(M):
        hit = ws_ids[i] == block_id
        m = _mask(hit)
        found |= hit
        for w in range(W):
            out_row[w] |= ws_data[i, w] & m

    if mode != 0:
        new_row = np.empty(W, np.uint64)
        for w in range(W):
            new_row[w] = in_row[w] if mode == 1 else out_row[w]
        if mode == 2:
            new_row[off] = val
        taken = found
        for i in range(M):
            hit = ws_ids[i] == block_id
            take = (ws_ids[i] == DUMMY) & (not taken)
            taken |= take
            sel = hit | take
            m = _mask(sel)
            ws_ids[i] = block_id if sel else ws_ids[i]
            for w in range(W):
                ws_data[i, w] = (new_row[w] & m) | (ws_data[i, w] & ~m)
        if not taken:
            return found, -1

    for i in range(M):
        hit = ws_ids[i] == block_id
        ws_leaves[i] = new_leaf if hit else ws_leaves[i]

    # greedy write-back: stable counting sort by shared depth, deepest first
    depth = np.empty(M, np.int64)
    cnt = np.zeros(height + 1, np.int64)
    nreal = 0
    for i in range(M):
        real = ws_ids[i] != DUMMY
        d = height - _bitlen(ws_leaves[i] ^ leaf, height)
        depth[i] = d if real else -1
        if real:
            cnt[d] += 1
            nreal += 1
    start = np.empty(height + 1, np.int64)
    acc = 0
    for d in range(height, -1, -1):
        start[d] = acc
        acc += cnt[d]
    order = np.empty(nreal, np.int64)
    for i in range(M):
        d = depth[i]
        if d >= 0:
            order[start[d]] = i
            start[d] += 1

    for r in range(height + 1):
        _clear_bucket(t_ids, t_leaves, t_data, _bucket(height, leaf, height - r), rng_state)
    p = 0
    avail = 0
    for lvl in range(height, -1, -1):
        avail += cnt[lvl]
        take = min(Z, avail)
        avail -= take
        b = _bucket(height, leaf, lvl)
        for k in range(take):
            i = order[p]
            t_ids[b, k] = ws_ids[i]
            t_leaves[b, k] = ws_leaves[i]
            for w in range(W):
                t_data[b, k, w] = ws_data[i, w]
            p += 1

    rest = nreal - p
    if rest > C:
        return found, -1
    for i in range(C):
        s_ids[i] = DUMMY
        s_leaves[i] = DUMMY
    for k in range(rest):
        i = order[p + k]
        s_ids[k] = ws_ids[i]
        s_leaves[k] = ws_leaves[i]
        for w in range(W):
            s_data[k, w] = ws_data[i, w]
    return found, rest


@njit(cache=True)
def count_matches(ids, used, key):
    n = 0
    for i in range(used):
        n += ids[i] == key
    return n


@njit(cache=True)
def leaf_in(list_, n, leaf):
    hit = False
    for i in range(n):
        hit |= list_[i] == leaf
    return hit


@njit(cache=True)
def ro_fold(t_ids, t_leaves, t_data, height, leaf, s_ids, s_leaves, s_data, used,
            x_ids, x_used):
    """Append every slot of the path of ``leaf`` to the stash at ``used``.

    Ids already present in ``s[:used]`` or ``x[:x_used]`` are turned into
    dummies.  Returns the new fill mark, or -1 if the stash is too small.
    """
    Z = t_ids.shape[1]
    W = t_data.shape[2]
    K = (height + 1) * Z
    if used + K > s_ids.shape[0]:
        return -1
    for r in range(height + 1):
        b = _bucket(height, leaf, height - r)
        for z in range(Z):
            j = used + r * Z + z
            s_ids[j] = t_ids[b, z]
            s_leaves[j] = t_leaves[b, z]
            for w in range(W):
                s_data[j, w] = t_data[b, z, w]
    dup = np.zeros(K, np.bool_)
    for i in range(used):
        sid = s_ids[i]
        live = sid != DUMMY
        for k in range(K):
            dup[k] |= (sid == s_ids[used + k]) & live
    for i in range(x_used):
        sid = x_ids[i]
        live = sid != DUMMY
        for k in range(K):
            dup[k] |= (sid == s_ids[used + k]) & live
    for k in range(K):
        s_ids[used + k] = DUMMY if dup[k] else s_ids[used + k]
    return used + K


@njit(cache=True)
def ro_select(s_ids, s_leaves, s_data, used, block_id, retag, new_leaf, out_row):
    """Copy the payload of ``block_id`` into ``out_row``; optionally retag its leaf."""
    W = s_data.shape[1]
    for w in range(W):
        out_row[w] = _ZERO
    found = False
    for i in range(used):
        hit = s_ids[i] == block_id
        m = _mask(hit)
        found |= hit
        for w in range(W):
            out_row[w] |= s_data[i, w] & m
        s_leaves[i] = new_leaf if (hit & retag) else s_leaves[i]
    return found


@njit(cache=True)
def ro_overwrite(s_ids, s_leaves, s_data, used, block_id, new_leaf, row):
    W = s_data.shape[1]
    found = False
    for i in range(used):
        hit = s_ids[i] == block_id
        m = _mask(hit)
        found |= hit
        for w in range(W):
            s_data[i, w] = (row[w] & m) | (s_data[i, w] & ~m)
        s_leaves[i] = new_leaf if hit else s_leaves[i]
    return found


@njit(cache=True)
def ro_append(s_ids, s_leaves, s_data, used, cond, block_id, leaf, row):
    if used >= s_ids.shape[0]:
        return -1
    s_ids[used] = block_id if cond else DUMMY
    s_leaves[used] = leaf if cond else DUMMY
    for w in range(s_data.shape[1]):
        s_data[used, w] = row[w]
    return used + 1


@njit(cache=True, nogil=True)
def ro_evict_paths(x_ids, x_leaves, x_data, x_used, pl, n_pl, height,
                   w_ids, w_leaves, w_data, rng_state, placed, ev_kind, ev_bucket):
    """Batch path writing into the write tree.

    For each recorded path and each level from leaf to root, a bucket not yet
    written this batch is refilled with up to Z unplaced stash blocks whose
    leaf routes through it; an already written bucket gets a fake touch.
    Returns the array of written bucket indices.
    """
    Z = w_ids.shape[1]
    W = w_data.shape[2]
    written = np.empty(n_pl * (height + 1), np.int64)
    n_written = 0
    e = 0
    for pi in range(n_pl):
        p = pl[pi]
        for lvl in range(height, -1, -1):
            b = _bucket(height, p, lvl)
            seen = False
            for q in range(n_written):
                seen |= written[q] == b
            ev_bucket[e] = b
            if seen:
                ev_kind[e] = EV_FAKE
                e += 1
                for z in range(Z):
                    w_ids[b, z] = w_ids[b, z]
                continue
            ev_kind[e] = EV_WRITE
            e += 1
            written[n_written] = b
            n_written += 1
            _clear_bucket(w_ids, w_leaves, w_data, b, rng_state)
            shift = height - lvl
            key = p >> shift
            filled = 0
            for i in range(x_used):
                ok = ((x_ids[i] != DUMMY) & (not placed[i])
                      & ((x_leaves[i] >> shift) == key) & (filled < Z))
                if ok:
                    w_ids[b, filled] = x_ids[i]
                    w_leaves[b, filled] = x_leaves[i]
                    for w in range(W):
                        w_data[b, filled, w] = x_data[i, w]
                    placed[i] = True
                    filled += 1
    return written[:n_written]


@njit(cache=True)
def ro_merge_leftovers(x_ids, x_leaves, x_data, x_used, placed,
                       s_ids, s_leaves, s_data, used):
    """Append unplaced real blocks of ``x`` to ``s`` unless ``s`` already has the id."""
    W = x_data.shape[1]
    base = used
    for i in range(x_used):
        if x_ids[i] == DUMMY or placed[i]:
            continue
        dup = False
        for j in range(base):
            dup |= s_ids[j] == x_ids[i]
        if dup:
            continue
        if used >= s_ids.shape[0]:
            return -1
        s_ids[used] = x_ids[i]
        s_leaves[used] = x_leaves[i]
        for w in range(W):
            s_data[used, w] = x_data[i, w]
        used += 1
    return used


@njit(cache=True)
def ro_purge(w_ids, w_leaves, buckets, s_ids, used):
    """Dummy out blocks in ``buckets`` whose id also lives in ``s[:used]``."""
    n = 0
    for bi in range(buckets.shape[0]):
        b = buckets[bi]
        for z in range(w_ids.shape[1]):
            bid = w_ids[b, z]
            dup = False
            for j in range(used):
                dup |= (s_ids[j] == bid) & (bid != DUMMY)
            if dup:
                w_ids[b, z] = DUMMY
                w_leaves[b, z] = DUMMY
                n += 1
    return n


@njit(cache=True)
def compact(s_ids, s_leaves, s_data, used):
    """Squeeze dummies out of ``s[:used]``; returns the new fill mark."""
    W = s_data.shape[1]
    k = 0
    for i in range(used):
        if s_ids[i] != DUMMY:
            if k != i:
                s_ids[k] = s_ids[i]
                s_leaves[k] = s_leaves[i]
                for w in range(W):
                    s_data[k, w] = s_data[i, w]
            k += 1
    for i in range(k, used):
        s_ids[i] = DUMMY
        s_leaves[i] = DUMMY
    return k


@njit(cache=True)
def select_word(row, off):
    """Word ``off`` of ``row`` as int64, reading every word."""
    acc = _ZERO
    for w in range(row.shape[0]):
        acc |= row[w] & _mask(w == off)
    return np.int64(acc)


@njit(cache=True)
def flat_swap(leaves, block_id, new_leaf, write):
    """Return ``leaves[block_id]``; store ``new_leaf`` there when ``write``."""
    old = np.int64(0)
    for i in range(leaves.shape[0]):
        hit = i == block_id
        old = leaves[i] if hit else old
        leaves[i] = new_leaf if (hit & write) else leaves[i]
    return old
