"""GF(2^8) arithmetic for the erasure codec.

Field with primitive polynomial x^8 + x^4 + x^3 + x^2 + 1 (0x11d), the
usual choice for byte-oriented storage codes.  Parity generation and
reconstruction both reduce to matrix products over the field, and those
inner loops over payload bytes are the hot path of the whole package:
everything else is control logic.  The product kernel therefore has two
interchangeable implementations, a numba-compiled loop and a pure-numpy
gather, selected once at import.  Set CASPR_NUMBA=0 to force the numpy
path (``benchmarks/bench_codec.py`` times the two against each other).
"""

from __future__ import annotations

import os

import numpy as np

POLY = 0x11D
ORDER = 255

# exp table doubled so log[a]+log[b] never needs a modulo
EXP = np.zeros(512, dtype=np.uint8)
LOG = np.zeros(256, dtype=np.int32)
_x = 1
for _i in range(ORDER):
    EXP[_i] = _x
    LOG[_x] = _i
    _x <<= 1
    if _x & 0x100:
        _x ^= POLY
EXP[ORDER:2 * ORDER] = EXP[:ORDER]
EXP[2 * ORDER:] = EXP[:512 - 2 * ORDER]

# full 256x256 product table, 64 KiB; MUL[a, b] == gf_mul(a, b)
MUL = np.zeros((256, 256), dtype=np.uint8)
_nz = np.arange(1, 256)
MUL[1:, 1:] = EXP[(LOG[_nz][:, None] + LOG[_nz][None, :]) % ORDER]


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return int(EXP[LOG[a] + LOG[b]])


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("gf_inv(0)")
    return int(EXP[ORDER - LOG[a]])


def gf_pow(a: int, n: int) -> int:
    if a == 0:
        return 0 if n else 1
    return int(EXP[(LOG[a] * n) % ORDER])


def _matmul_numpy(mat: np.ndarray, data: np.ndarray) -> np.ndarray:
    """GF matrix product, (p,k) x (k,L) -> (p,L), via table gathers."""
    p, k = mat.shape
    out = np.zeros((p, data.shape[1]), dtype=np.uint8)
    for i in range(p):
        for j in range(k):
            c = mat[i, j]
            if c:
                out[i] ^= MUL[c][data[j]]
    return out


try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via CASPR_NUMBA=0 instead
    HAS_NUMBA = False

if HAS_NUMBA:

    @njit(cache=True)
    def _matmul_jit(mat, data, mul):  # pragma: no cover - compiled
        p, k = mat.shape
        n = data.shape[1]
        out = np.zeros((p, n), dtype=np.uint8)
        for i in range(p):
            for j in range(k):
                c = mat[i, j]
                if c:
                    row = mul[c]
                    for t in range(n):
                        out[i, t] ^= row[data[j, t]]
        return out

    def _matmul_numba(mat: np.ndarray, data: np.ndarray) -> np.ndarray:
        return _matmul_jit(mat, data, MUL)

USE_NUMBA = HAS_NUMBA and os.environ.get("CASPR_NUMBA", "1") != "0"
gf_matmul = _matmul_numba if USE_NUMBA else _matmul_numpy


def parity_matrix(k: int, num_parity: int) -> np.ndarray:
    """Parity generator rows W[i][j] = alpha^(i*j), shape (num_parity, k).

    Row 0 is all ones, so a single parity symbol is the plain XOR of the
    sources.  Stacked under an identity this is MDS (any k of the k+p
    symbols reconstruct) for num_parity <= 3 at any k, and for
    num_parity == 4 up to k == 20; the codec refuses anything beyond
    that envelope, see codec.InvalidParams.
    """
    rows = np.arange(num_parity, dtype=np.int64)[:, None]
    cols = np.arange(k, dtype=np.int64)[None, :]
    return EXP[(rows * cols) % ORDER].astype(np.uint8)


def gf_inv_matrix(a: np.ndarray) -> np.ndarray:
    """Invert a small square matrix over the field by Gauss-Jordan."""
    n = a.shape[0]
    aug = np.zeros((n, 2 * n), dtype=np.uint8)
    aug[:, :n] = a
    aug[np.arange(n), n + np.arange(n)] = 1
    for col in range(n):
        piv = col
        while piv < n and aug[piv, col] == 0:
            piv += 1
        if piv == n:
            raise ZeroDivisionError("singular matrix over GF(256)")
        if piv != col:
            aug[[col, piv]] = aug[[piv, col]]
        inv = gf_inv(int(aug[col, col]))
        aug[col] = MUL[inv][aug[col]]
        for r in range(n):
            if r != col and aug[r, col]:
                aug[r] ^= MUL[int(aug[r, col])][aug[col]]
    return aug[:, n:].copy()
