"""Word-size modular arithmetic, prime search and the negacyclic NTT.

All residues are ``uint64`` and every prime is below 2**62, which leaves
headroom for lazy additions.  Products are formed exactly with a 32-bit
split (``_mulhi``) inside numba kernels; twiddle multiplications use
Shoup's precomputed quotients and generic pointwise products use
Montgomery reduction.
"""

from __future__ import annotations

import random

import numba
import numpy as np

_U32 = np.uint64(32)
_MASK32 = np.uint64(0xFFFFFFFF)
_ONE = np.uint64(1)
_ZERO = np.uint64(0)

MIN_PRIME_BITS = 20
MAX_PRIME_BITS = 61

_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, exact for n < 3.3e24."""
    if n < 2:
        return False
    for p in _MR_BASES:
        if n % p == 0:
            return n == p
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def find_ntt_primes(bit_sizes, degree: int) -> list[int]:
    """Return distinct primes ``p = 1 (mod 2*degree)``, one per requested size.

    Each prime is the largest unused candidate strictly below ``2**bits``.
    Raises ``ValueError`` when a size has no admissible prime left.
    """
    step = 2 * degree
    used: set[int] = set()
    primes = []
    for bits in bit_sizes:
        if not MIN_PRIME_BITS <= bits <= MAX_PRIME_BITS:
            raise ValueError(
                f"prime size {bits} bits outside [{MIN_PRIME_BITS}, {MAX_PRIME_BITS}]"
            )
        lower = 1 << (bits - 1)
        cand = ((1 << bits) - 1) // step * step + 1
        while cand >= lower and (cand in used or not is_prime(cand)):
            cand -= step
        if cand < lower:
            raise ValueError(
                f"no {bits}-bit prime congruent to 1 mod {step} is available"
            )
        used.add(cand)
        primes.append(cand)
    return primes


def primitive_root_2n(p: int, degree: int, seed: int = 0) -> int:
    """Smallest-found primitive ``2*degree``-th root of unity modulo ``p``."""
    order = 2 * degree
    if (p - 1) % order:
        raise ValueError(f"{p} is not 1 mod {order}")
    rng = random.Random(seed ^ p)
    cofactor = (p - 1) // order
    while True:
        psi = pow(rng.randrange(2, p - 1), cofactor, p)
        # psi has order exactly 2*degree iff psi**degree == -1
        if pow(psi, degree, p) == p - 1:
            return psi


def bit_reverse(k: int, bits: int) -> int:
    out = 0
    for _ in range(bits):
        out = (out << 1) | (k & 1)
        k >>= 1
    return out


def shoup(values, p: int) -> np.ndarray:
    """Shoup quotients ``floor(w * 2**64 / p)`` for each entry of ``values``."""
    return np.array([(int(w) << 64) // p for w in values], dtype=np.uint64)


class NttTables:
    """Twiddle tables for one prime and ring dimension."""

    def __init__(self, p: int, degree: int):
        self.p = p
        self.degree = degree
        logn = degree.bit_length() - 1
        psi = primitive_root_2n(p, degree)
        psi_inv = pow(psi, -1, p)
        pw = [1] * degree
        pw_inv = [1] * degree
        for i in range(1, degree):
            pw[i] = pw[i - 1] * psi % p
            pw_inv[i] = pw_inv[i - 1] * psi_inv % p
        rev = [bit_reverse(k, logn) for k in range(degree)]
        self.psi = psi
        self.psi_rev = np.array([pw[r] for r in rev], dtype=np.uint64)
        self.psi_inv_rev = np.array([pw_inv[r] for r in rev], dtype=np.uint64)
        self.psi_rev_shoup = shoup(self.psi_rev, p)
        self.psi_inv_rev_shoup = shoup(self.psi_inv_rev, p)
        self.n_inv = pow(degree, -1, p)
        self.n_inv_shoup = (self.n_inv << 64) // p
        # Montgomery constants, R = 2**64
        self.mont_neg_inv = (-pow(p, -1, 1 << 64)) % (1 << 64)
        self.mont_r2 = pow(2, 128, p)


# --------------------------------------------------------------------------
# numba kernels


@numba.njit(inline="always")
def _mulhi(a, b):
    a_lo = a & _MASK32
    a_hi = a >> _U32
    b_lo = b & _MASK32
    b_hi = b >> _U32
    lo_lo = a_lo * b_lo
    hi_lo = a_hi * b_lo
    lo_hi = a_lo * b_hi
    hi_hi = a_hi * b_hi
    cross = (lo_lo >> _U32) + (hi_lo & _MASK32) + lo_hi
    return hi_hi + (hi_lo >> _U32) + (cross >> _U32)


@numba.njit(inline="always")
def _shoup_mul(x, w, w_shoup, p):
    q = _mulhi(x, w_shoup)
    r = x * w - q * p
    if r >= p:
        r -= p
    return r


@numba.njit(inline="always")
def _mont_reduce(a, b, p, neg_inv):
    hi = _mulhi(a, b)
    lo = a * b
    m = lo * neg_inv
    u = hi + _mulhi(m, p)
    if lo != _ZERO:
        u += _ONE
    if u >= p:
        u -= p
    return u


@numba.njit(cache=True, nogil=True)
def _ntt_forward(a, psi_rev, psi_rev_shoup, p):
    n = a.shape[0]
    t = n
    m = 1
    while m < n:
        t >>= 1
        for i in range(m):
            j1 = 2 * i * t
            w = psi_rev[m + i]
            ws = psi_rev_shoup[m + i]
            for j in range(j1, j1 + t):
                u = a[j]
                v = _shoup_mul(a[j + t], w, ws, p)
                s = u + v
                if s >= p:
                    s -= p
                a[j] = s
                d = u + p - v
                if d >= p:
                    d -= p
                a[j + t] = d
        m <<= 1


@numba.njit(cache=True, nogil=True)
def _ntt_inverse(a, psi_inv_rev, psi_inv_rev_shoup, n_inv, n_inv_shoup, p):
    n = a.shape[0]
    t = 1
    m = n
    while m > 1:
        j1 = 0
        h = m >> 1
        for i in range(h):
            w = psi_inv_rev[h + i]
            ws = psi_inv_rev_shoup[h + i]
            for j in range(j1, j1 + t):
                u = a[j]
                v = a[j + t]
                s = u + v
                if s >= p:
                    s -= p
                a[j] = s
                a[j + t] = _shoup_mul(u + p - v, w, ws, p)
            j1 += 2 * t
        t <<= 1
        m = h
    for j in range(n):
        a[j] = _shoup_mul(a[j], n_inv, n_inv_shoup, p)


@numba.njit(cache=True, nogil=True)
def _mulmod_rows(a, b, primes, neg_invs, r2s):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        p = primes[r]
        ni = neg_invs[r]
        r2 = r2s[r]
        for j in range(n):
            t = _mont_reduce(a[r, j], b[r, j], p, ni)
            out[r, j] = _mont_reduce(t, r2, p, ni)
    return out


def ntt_forward_row(row: np.ndarray, tables: NttTables) -> np.ndarray:
    """Forward negacyclic NTT of one residue vector (returns a new array)."""
    out = np.array(row, dtype=np.uint64, copy=True)
    _ntt_forward(out, tables.psi_rev, tables.psi_rev_shoup, np.uint64(tables.p))
    return out


def ntt_inverse_row(row: np.ndarray, tables: NttTables) -> np.ndarray:
    out = np.array(row, dtype=np.uint64, copy=True)
    _ntt_inverse(
        out,
        tables.psi_inv_rev,
        tables.psi_inv_rev_shoup,
        np.uint64(tables.n_inv),
        np.uint64(tables.n_inv_shoup),
        np.uint64(tables.p),
    )
    return out


def mulmod_rows(a: np.ndarray, b: np.ndarray, tables: list[NttTables]) -> np.ndarray:
    """Pointwise ``a*b mod p_r`` for each row ``r`` of two residue matrices."""
    primes = np.array([t.p for t in tables], dtype=np.uint64)
    neg = np.array([t.mont_neg_inv for t in tables], dtype=np.uint64)
    r2 = np.array([t.mont_r2 for t in tables], dtype=np.uint64)
    return _mulmod_rows(
        np.ascontiguousarray(a, dtype=np.uint64),
        np.ascontiguousarray(b, dtype=np.uint64),
        primes,
        neg,
        r2,
    )

