"""Data-oblivious building blocks.

Scalar primitives (``o_less``, ``o_equal``, ``o_assign``) are written with
arithmetic and bit masks only, so no Python-level control flow depends on the
operand values.  Sequence primitives (``o_access``, ``o_exists``) visit every
element of the sequence exactly once, in index order, regardless of the index
or value being looked for.

The ``*_rows`` / ``*_vec`` helpers are the numpy counterparts used by the ORAM
controllers: each is a whole-array operation over a fixed-size buffer.
"""

from __future__ import annotations

import struct
from typing import Any, List, MutableSequence, Sequence

import numpy as np

from .errors import IndexOutOfRange

READ = "read"
WRITE = "write"

_MASK64 = (1 << 64) - 1
_SIGN64 = 1 << 63


def _float_bits(x: float) -> int:
    return struct.unpack("<Q", struct.pack("<d", x))[0]


def _bits_float(b: int) -> float:
    return struct.unpack("<d", struct.pack("<Q", b & _MASK64))[0]


def _ult(x: int, y: int) -> int:
    # unsigned 64-bit x < y (Hacker's Delight 2-12)
    d = (x - y) & _MASK64
    return ((((~x) & y) | (((~x) | y) & d)) & _MASK64) >> 63


def _slt(x: int, y: int) -> int:
    return _ult((x & _MASK64) ^ _SIGN64, (y & _MASK64) ^ _SIGN64)


def _ieq(x: int, y: int) -> int:
    d = (x ^ y) & _MASK64
    return 1 ^ (((d | (-d & _MASK64)) & _MASK64) >> 63)


def o_less(x, y) -> bool:
    """``x < y`` for 64-bit signed integers or IEEE-754 doubles.

    NaN operands compare false.
    """
    if isinstance(x, float) or isinstance(y, float):
        return bool(float(x) < float(y))
    return bool(_slt(int(x), int(y)))


def o_greater(x, y) -> bool:
    return o_less(y, x)


def o_equal(x, y) -> bool:
    """Equality on raw 64-bit patterns.

    Doubles are normalised first (``-0.0`` folds onto ``0.0``) and a NaN
    operand forces the result to false.
    """
    if isinstance(x, float) or isinstance(y, float):
        fx, fy = float(x) + 0.0, float(y) + 0.0
        not_nan = 1 ^ (int(fx != fx) | int(fy != fy))
        return bool(_ieq(_float_bits(fx), _float_bits(fy)) & not_nan)
    return bool(_ieq(int(x), int(y)))


def o_assign(cond, dst, src):
    """Return ``src`` when ``cond`` holds, else ``dst``, via a masked blend."""
    c = int(bool(cond))
    if isinstance(dst, np.ndarray) or isinstance(src, np.ndarray):
        return np.where(bool(c), src, dst)
    if isinstance(dst, float) or isinstance(src, float):
        a, b = _float_bits(float(dst)), _float_bits(float(src))
        return _bits_float(a ^ ((a ^ b) & -c))
    if isinstance(dst, (bytes, bytearray)):
        if len(dst) != len(src):
            raise ValueError("o_assign on byte strings of unequal width")
        a, b = int.from_bytes(dst, "little"), int.from_bytes(src, "little")
        return (a ^ ((a ^ b) & -c)).to_bytes(len(dst), "little")
    if isinstance(dst, bool) and isinstance(src, bool):
        return bool(int(dst) ^ ((int(dst) ^ int(src)) & c))
    return dst ^ ((dst ^ src) & -c)


def o_access(op: str, arr: MutableSequence, index: int, in_val: Any = None):
    """Read or write ``arr[index]`` while touching every element once.

    For ``WRITE`` every element is rewritten, untouched ones with their own
    value.  numpy arrays go through the vectorised path (one full-array
    blend), any other mutable sequence through an explicit sweep.
    """
    n = len(arr)
    if not 0 <= index < n:
        raise IndexOutOfRange(f"index {index} outside [0, {n})")
    if op not in (READ, WRITE):
        raise ValueError(f"unknown op {op!r}")
    if isinstance(arr, np.ndarray):
        return _o_access_np(op, arr, index, in_val)
    result = None
    for i in range(n):
        hit = o_equal(i, index)
        v = arr[i]
        if op == READ:
            result = v if i == 0 else o_assign(hit, result, v)
        else:
            arr[i] = o_assign(hit, v, in_val)
    return result if op == READ else None


def _o_access_np(op, arr: np.ndarray, index: int, in_val):
    mask = np.arange(arr.shape[0]) == index
    if op == READ:
        return o_select_rows(mask, arr)
    shaped = mask.reshape((-1,) + (1,) * (arr.ndim - 1))
    arr[...] = np.where(shaped, np.asarray(in_val, dtype=arr.dtype), arr)
    return None


def o_exists(arr: Sequence, x) -> bool:
    """True iff some element equals ``x``; always scans the whole sequence."""
    if isinstance(arr, np.ndarray):
        return o_exists_vec(arr, x)
    found = 0
    for i in range(len(arr)):
        found |= int(o_equal(arr[i], x))
    return bool(found)


# -- vectorised helpers ----------------------------------------------------

def _as_bits(a: np.ndarray) -> np.ndarray:
    if a.dtype.itemsize == 8:
        return a.view(np.uint64)
    if a.dtype.itemsize == 4:
        return a.view(np.uint32)
    if a.dtype.itemsize == 1:
        return a.view(np.uint8)
    return a.view(np.uint16)


def o_select_rows(mask: np.ndarray, rows: np.ndarray):
    """OR-reduce of the rows selected by ``mask`` (at most one is expected).

    Every row is read; the result is bit-exact for any 1/2/4/8-byte dtype.
    With no selected row the result is all-zero bits.
    """
    bits = _as_bits(np.ascontiguousarray(rows))
    shaped = mask.reshape((-1,) + (1,) * (rows.ndim - 1))
    picked = np.bitwise_or.reduce(np.where(shaped, bits, 0).astype(bits.dtype), axis=0)
    out = np.asarray(picked, dtype=bits.dtype).view(rows.dtype)
    if rows.ndim == 1:
        return out.reshape(()).item()
    return out


def o_exists_vec(arr: np.ndarray, x) -> bool:
    return bool(np.any(arr == x))


def o_blend_rows(mask: np.ndarray, new, old: np.ndarray) -> np.ndarray:
    """Rows of ``new`` where ``mask`` holds, else rows of ``old`` (full sweep)."""
    shaped = mask.reshape((-1,) + (1,) * (old.ndim - 1))
    return np.where(shaped, new, old)


class RecordingArray(MutableSequence):
    """List wrapper that logs every element offset it hands out or stores.

    Used to check that a primitive's touch sequence is independent of the
    index and values involved.
    """

    def __init__(self, items):
        self._items: List[Any] = list(items)
        self.touched: List[int] = []

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        self.touched.append(i)
        return self._items[i]

    def __setitem__(self, i, v):
        self.touched.append(i)
        self._items[i] = v

    def __delitem__(self, i):
        raise TypeError("fixed-length array")

    def insert(self, i, v):
        raise TypeError("fixed-length array")

    def snapshot(self) -> list:
        return list(self._items)
