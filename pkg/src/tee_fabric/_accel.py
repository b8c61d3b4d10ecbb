"""
Hot byte-level kernels.

Every kernel has a numba ``@njit`` implementation and a pure-numpy twin with
identical results. Set ``TEE_FABRIC_DISABLE_NUMBA=1`` (or run without numba
installed) to use the numpy path. Both paths are importable directly through
:data:`NUMBA_KERNELS` and :data:`NUMPY_KERNELS` for benchmarking and
equivalence tests.
"""

from __future__ import annotations

import os

import numpy as np

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX_C1 = np.uint64(0xBF58476D1CE4E5B9)
MIX_C2 = np.uint64(0x94D049BB133111EB)

WINDOW = 8


def _env_disabled() -> bool:
    return os.environ.get("TEE_FABRIC_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def _np_keystream_xor(data: np.ndarray, seed: np.uint64) -> np.ndarray:
    n = data.shape[0]
    words = (n + 7) // 8
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + (np.arange(1, words + 1, dtype=np.uint64) * GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * MIX_C1
        z = (z ^ (z >> np.uint64(27))) * MIX_C2
        z = z ^ (z >> np.uint64(31))
    stream = z.astype("<u8").view(np.uint8)[:n]
    return np.bitwise_xor(data, stream)


def _np_window_codes(data: np.ndarray) -> np.ndarray:
    n = data.shape[0]
    if n < WINDOW:
        return np.empty(0, dtype=np.uint64)
    win = np.lib.stride_tricks.sliding_window_view(data.astype(np.uint64), WINDOW)
    shifts = np.arange(0, 64, 8, dtype=np.uint64)
    return np.bitwise_or.reduce(win << shifts, axis=1)


def _np_count_hits(table: np.ndarray, codes: np.ndarray) -> int:
    if table.shape[0] == 0 or codes.shape[0] == 0:
        return 0
    idx = np.searchsorted(table, codes)
    idx[idx == table.shape[0]] = 0
    return int(np.count_nonzero(table[idx] == codes))


def _np_count_foreign(labels: np.ndarray, allowed: int) -> int:
    return int(np.count_nonzero((labels != 0) & (labels != allowed)))


def _np_all_zero(data: np.ndarray) -> bool:
    return not bool(data.any())


def _np_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b


NUMPY_KERNELS = {
    "keystream_xor": _np_keystream_xor,
    "window_codes": _np_window_codes,
    "count_hits": _np_count_hits,
    "count_foreign": _np_count_foreign,
    "all_zero": _np_all_zero,
    "matmul": _np_matmul,
}


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------


def _build_numba_kernels():
    import numba

    @numba.njit(cache=True)
    def keystream_xor(data, seed):
        n = data.shape[0]
        out = np.empty(n, dtype=np.uint8)
        gamma = np.uint64(0x9E3779B97F4A7C15)
        c1 = np.uint64(0xBF58476D1CE4E5B9)
        c2 = np.uint64(0x94D049BB133111EB)
        s = np.uint64(seed)
        words = (n + 7) // 8
        for w in range(words):
            z = s + np.uint64(w + 1) * gamma
            z = (z ^ (z >> np.uint64(30))) * c1
            z = (z ^ (z >> np.uint64(27))) * c2
            z = z ^ (z >> np.uint64(31))
            base = w * 8
            for k in range(8):
                i = base + k
                if i >= n:
                    break
                out[i] = data[i] ^ np.uint8((z >> np.uint64(8 * k)) & np.uint64(0xFF))
        return out

    @numba.njit(cache=True)
    def window_codes(data):
        n = data.shape[0]
        if n < 8:
            return np.empty(0, dtype=np.uint64)
        m = n - 8 + 1
        out = np.empty(m, dtype=np.uint64)
        for i in range(m):
            code = np.uint64(0)
            for k in range(8):
                code |= np.uint64(data[i + k]) << np.uint64(8 * k)
            out[i] = code
        return out

    @numba.njit(cache=True)
    def count_hits(table, codes):
        t = table.shape[0]
        if t == 0:
            return 0
        hits = 0
        for i in range(codes.shape[0]):
            c = codes[i]
            lo = 0
            hi = t
            while lo < hi:
                mid = (lo + hi) // 2
                if table[mid] < c:
                    lo = mid + 1
                else:
                    hi = mid
            if lo < t and table[lo] == c:
                hits += 1
        return hits

    @numba.njit(cache=True)
    def count_foreign(labels, allowed):
        bad = 0
        for i in range(labels.shape[0]):
            v = labels[i]
            if v != 0 and v != allowed:
                bad += 1
        return bad

    @numba.njit(cache=True)
    def all_zero(data):
        n = data.shape[0]
        head = n - n % 8
        # eight bytes per step through a word view, then the tail
        words = data[:head].view(np.uint64)
        for i in range(words.shape[0]):
            if words[i] != 0:
                return False
        for i in range(head, n):
            if data[i] != 0:
                return False
        return True

    @numba.njit(cache=True)
    def matmul(a, b):
        n, k = a.shape
        m = b.shape[1]
        out = np.zeros((n, m), dtype=np.float64)
        for i in range(n):
            for p in range(k):
                av = a[i, p]
                for j in range(m):
                    out[i, j] += av * b[p, j]
        return out

    return {
        "keystream_xor": keystream_xor,
        "window_codes": window_codes,
        "count_hits": count_hits,
        "count_foreign": count_foreign,
        "all_zero": all_zero,
        "matmul": matmul,
    }


try:
    NUMBA_KERNELS = _build_numba_kernels()
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_KERNELS = {}

USE_NUMBA = bool(NUMBA_KERNELS) and not _env_disabled()
BACKEND = "numba" if USE_NUMBA else "numpy"
_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


def keystream_xor(data: bytes | np.ndarray, seed: int) -> bytes:
    """XOR ``data`` with a splitmix64 stream started at ``seed``."""
    arr = np.frombuffer(bytes(data), dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    if arr.shape[0] == 0:
        return b""
    return _ACTIVE["keystream_xor"](arr, np.uint64(seed & 0xFFFFFFFFFFFFFFFF)).tobytes()


def window_codes(data: bytes | np.ndarray) -> np.ndarray:
    arr = np.frombuffer(bytes(data), dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    return _ACTIVE["window_codes"](np.ascontiguousarray(arr, dtype=np.uint8))


def count_hits(table: np.ndarray, codes: np.ndarray) -> int:
    return int(_ACTIVE["count_hits"](table, codes))


def count_foreign(labels: np.ndarray, allowed: int) -> int:
    """Number of labelled entries whose label differs from ``allowed``."""
    return int(_ACTIVE["count_foreign"](labels, np.int32(allowed)))


def all_zero(data: np.ndarray) -> bool:
    return bool(_ACTIVE["all_zero"](data))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _ACTIVE["matmul"](np.ascontiguousarray(a, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64))
