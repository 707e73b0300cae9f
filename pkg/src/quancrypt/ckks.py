"""Additive subset of the CKKS scheme.

Supported: canonical-embedding encode/decode of real vectors, public-key
encryption, decryption, ciphertext addition, plaintext addition and a single
multiplication by a real scalar.  There is no relinearization, rotation,
rescaling or bootstrapping; decode divides by the tracked scale instead of
rescaling.

The last prime of a multi-prime parameter set is treated as the reserved
("special") key-switching prime and is not part of the ciphertext modulus.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .ntt import NttTables, find_ntt_primes, mulmod_rows, ntt_forward_row, ntt_inverse_row

DEFAULT_DEGREE = 8192
FULL_DEGREE = 16384
FULL_MODULI_BITS = (60, 40, 40, 40, 60)
DEFAULT_MODULI_BITS = (60, 40, 40, 60)
DEFAULT_SCALE = 2.0**40
DEFAULT_SIGMA = 3.2
INSECURE_BELOW = 4096

MAGIC = b"QCHE"
FORMAT_VERSION = 1
_KIND_SECRET, _KIND_PUBLIC, _KIND_CIPHERTEXT = 0, 1, 2

# encode refuses coefficients within 2**10 of the modulus half-width
_HEADROOM_BITS = 10


class CkksError(Exception):
    """Base class for scheme errors."""


class ParameterError(CkksError, ValueError):
    pass


class CapacityError(CkksError, ValueError):
    pass


class ContextMismatchError(CkksError):
    pass


class ScaleMismatchError(CkksError):
    pass


class DepthError(CkksError):
    pass


class RepresentationError(CkksError):
    pass


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class CkksContext:
    degree: int
    moduli_bits: tuple[int, ...]
    primes: tuple[int, ...]
    scale: float
    sigma: float = DEFAULT_SIGMA
    tables: tuple[NttTables, ...] = field(repr=False, compare=False, default=())

    @property
    def slot_count(self) -> int:
        return self.degree // 2

    @property
    def insecure(self) -> bool:
        return self.degree < INSECURE_BELOW

    @property
    def data_primes(self) -> tuple[int, ...]:
        return self.primes[:-1] if len(self.primes) > 1 else self.primes

    @property
    def data_tables(self) -> tuple[NttTables, ...]:
        return self.tables[: len(self.data_primes)]

    @cached_property
    def modulus(self) -> int:
        q = 1
        for p in self.data_primes:
            q *= p
        return q

    @cached_property
    def _crt_coeffs(self) -> list[int]:
        q = self.modulus
        return [(q // p) * pow(q // p, -1, p) for p in self.data_primes]

    @cached_property
    def _slot_index(self) -> tuple[np.ndarray, np.ndarray]:
        two_m = 2 * self.degree
        exps = np.empty(self.slot_count, dtype=np.int64)
        e = 1
        for j in range(self.slot_count):
            exps[j] = e
            e = e * 5 % two_m
        return (exps - 1) // 2, (two_m - exps - 1) // 2

    @cached_property
    def _zeta_powers(self) -> np.ndarray:
        k = np.arange(self.degree)
        return np.exp(1j * np.pi * k / self.degree)

    def check_same(self, other: "CkksContext") -> None:
        if other is self:
            return
        if (self.degree, self.primes, self.scale, self.sigma) != (
            other.degree,
            other.primes,
            other.scale,
            other.sigma,
        ):
            raise ContextMismatchError("objects belong to different CKKS contexts")

    # -- ring helpers ------------------------------------------------------

    def zero_poly(self, ntt: bool = False) -> "RingPoly":
        return RingPoly(np.zeros((len(self.data_primes), self.degree), dtype=np.uint64), ntt)

    def poly_from_ints(self, coeffs) -> "RingPoly":
        """Reduce signed integer coefficients into every data prime."""
        coeffs = np.asarray(coeffs)
        if coeffs.dtype == object:
            rows = [np.array([int(c) % p for c in coeffs], dtype=np.uint64) for p in self.data_primes]
        else:
            c = coeffs.astype(np.int64)
            rows = [np.mod(c, p).astype(np.uint64) for p in self.data_primes]
        return RingPoly(np.stack(rows), ntt=False)

    def ntt_forward(self, poly: "RingPoly") -> "RingPoly":
        if poly.ntt:
            raise RepresentationError("forward NTT needs a coefficient-domain polynomial")
        rows = [ntt_forward_row(r, t) for r, t in zip(poly.residues, self.data_tables)]
        return RingPoly(np.stack(rows), ntt=True)

    def ntt_inverse(self, poly: "RingPoly") -> "RingPoly":
        if not poly.ntt:
            raise RepresentationError("inverse NTT needs an NTT-domain polynomial")
        rows = [ntt_inverse_row(r, t) for r, t in zip(poly.residues, self.data_tables)]
        return RingPoly(np.stack(rows), ntt=False)

    def add(self, a: "RingPoly", b: "RingPoly") -> "RingPoly":
        _same_repr(a, b)
        p = self._prime_column
        return RingPoly((a.residues + b.residues) % p, a.ntt)

    def negate(self, a: "RingPoly") -> "RingPoly":
        p = self._prime_column
        return RingPoly((p - a.residues) % p, a.ntt)

    def mul(self, a: "RingPoly", b: "RingPoly") -> "RingPoly":
        """Ring product; both operands must be in the NTT domain."""
        if not (a.ntt and b.ntt):
            raise RepresentationError("pointwise product requires NTT-domain operands")
        return RingPoly(mulmod_rows(a.residues, b.residues, list(self.data_tables)), True)

    def mul_scalar_int(self, a: "RingPoly", k: int) -> "RingPoly":
        b = np.empty_like(a.residues)
        for i, p in enumerate(self.data_primes):
            b[i, :] = k % p
        return RingPoly(mulmod_rows(a.residues, b, list(self.data_tables)), a.ntt)

    @cached_property
    def _prime_column(self) -> np.ndarray:
        return np.array(self.data_primes, dtype=np.uint64)[:, None]

    def to_centered_ints(self, poly: "RingPoly") -> np.ndarray:
        """CRT-reconstruct coefficients into (-Q/2, Q/2] as Python ints."""
        if poly.ntt:
            raise RepresentationError("CRT reconstruction needs coefficient domain")
        q = self.modulus
        if len(self.data_primes) == 1:
            acc = poly.residues[0].astype(object)
        else:
            acc = sum(row.astype(object) * c for row, c in zip(poly.residues, self._crt_coeffs)) % q
        half = q // 2
        return np.where(acc > half, acc - q, acc)


@dataclass(frozen=True, eq=False)
class RingPoly:
    """Residues of one polynomial, shape ``(num_data_primes, degree)``."""

    residues: np.ndarray
    ntt: bool = False

    def __post_init__(self):
        self.residues.setflags(write=False)

    def equals(self, other: "RingPoly") -> bool:
        return self.ntt == other.ntt and np.array_equal(self.residues, other.residues)


def _same_repr(a: RingPoly, b: RingPoly) -> None:
    if a.ntt != b.ntt:
        raise RepresentationError("operands are in different representations")


@dataclass(frozen=True, eq=False)
class SecretKey:
    ctx: CkksContext
    s: RingPoly

    @cached_property
    def s_ntt(self) -> RingPoly:
        return self.ctx.ntt_forward(self.s)


@dataclass(frozen=True, eq=False)
class PublicKey:
    ctx: CkksContext
    b: RingPoly  # NTT domain
    a: RingPoly  # NTT domain


@dataclass(frozen=True, eq=False)
class Plaintext:
    ctx: CkksContext
    poly: RingPoly
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ParameterError("plaintext scale must be positive")


@dataclass(frozen=True, eq=False)
class Ciphertext:
    ctx: CkksContext
    c0: RingPoly
    c1: RingPoly
    scale: float
    depth: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ParameterError("ciphertext scale must be positive")
        _same_repr(self.c0, self.c1)

    @property
    def slot_count(self) -> int:
        return self.ctx.slot_count

    def nbytes(self) -> int:
        return self.c0.residues.nbytes + self.c1.residues.nbytes


# --------------------------------------------------------------------------


def check_parameters(degree: int, moduli_bits, scale: float) -> tuple[int, ...]:
    """Validate ring parameters without building NTT tables; returns the primes."""
    if degree < 1024 or degree & (degree - 1):
        raise ParameterError(f"degree must be a power of two >= 1024, got {degree}")
    moduli_bits = tuple(int(b) for b in moduli_bits)
    if not moduli_bits:
        raise ParameterError("moduli_bits must be nonempty")
    if not (scale > 0 and np.isfinite(scale)):
        raise ParameterError("scale must be a positive finite number")
    try:
        primes = tuple(find_ntt_primes(moduli_bits, degree))
    except ValueError as exc:
        raise ParameterError(str(exc)) from None
    data = primes[:-1] if len(primes) > 1 else primes
    if scale >= math.prod(data):
        raise ParameterError("scale must be below the product of the data primes")
    return primes


def create_context(
    degree: int = DEFAULT_DEGREE,
    moduli_bits=DEFAULT_MODULI_BITS,
    scale: float = DEFAULT_SCALE,
    sigma: float = DEFAULT_SIGMA,
) -> CkksContext:
    primes = check_parameters(degree, moduli_bits, scale)
    tables = tuple(NttTables(p, degree) for p in primes)
    return CkksContext(degree, tuple(int(b) for b in moduli_bits), primes, float(scale), float(sigma), tables)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _ternary(ctx: CkksContext, rng: np.random.Generator) -> RingPoly:
    return ctx.poly_from_ints(rng.integers(-1, 2, size=ctx.degree))


def _gaussian(ctx: CkksContext, rng: np.random.Generator) -> RingPoly:
    e = round_half_away(rng.normal(0.0, ctx.sigma, size=ctx.degree))
    return ctx.poly_from_ints(e.astype(np.int64))


def _uniform(ctx: CkksContext, rng: np.random.Generator) -> RingPoly:
    rows = [rng.integers(0, p, size=ctx.degree, dtype=np.uint64) for p in ctx.data_primes]
    return RingPoly(np.stack(rows), ntt=True)


def keygen(ctx: CkksContext, rng_seed: int | None = None) -> tuple[SecretKey, PublicKey]:
    rng = _rng(rng_seed)
    sk = SecretKey(ctx, _ternary(ctx, rng))
    a = _uniform(ctx, rng)
    e = ctx.ntt_forward(_gaussian(ctx, rng))
    b = ctx.add(ctx.negate(ctx.mul(a, sk.s_ntt)), e)
    return sk, PublicKey(ctx, b, a)


def encode(ctx: CkksContext, values, scale: float | None = None) -> Plaintext:
    """Pack up to ``slot_count`` reals into a plaintext at ``scale``."""
    scale = ctx.scale if scale is None else float(scale)
    z = np.asarray(values, dtype=np.float64).ravel()
    if z.size > ctx.slot_count:
        raise CapacityError(f"{z.size} values exceed the {ctx.slot_count} available slots")
    if not np.all(np.isfinite(z)):
        raise ValueError("cannot encode non-finite values")
    m = ctx.degree
    idx, conj_idx = ctx._slot_index
    w = np.zeros(m, dtype=np.complex128)
    w[idx[: z.size]] = z
    w[conj_idx[: z.size]] = z
    coeffs = (np.fft.fft(w) / m * np.conj(ctx._zeta_powers)).real * scale
    coeffs = round_half_away(coeffs)
    limit = ctx.modulus >> (_HEADROOM_BITS + 1)
    peak = float(np.max(np.abs(coeffs))) if coeffs.size else 0.0
    if peak >= limit:
        raise CapacityError("encoded magnitude exceeds the ciphertext modulus headroom")
    if peak < 2.0**62:
        poly = ctx.poly_from_ints(coeffs.astype(np.int64))
    else:
        poly = ctx.poly_from_ints(np.array([int(c) for c in coeffs], dtype=object))
    return Plaintext(ctx, poly, scale)


def decode(ctx: CkksContext, pt: Plaintext) -> np.ndarray:
    ctx.check_same(pt.ctx)
    ints = ctx.to_centered_ints(pt.poly)
    coeffs = ints.astype(np.float64) / pt.scale
    w = np.fft.ifft(coeffs * ctx._zeta_powers) * ctx.degree
    idx, _ = ctx._slot_index
    return w[idx].real.copy()


def encrypt(pk: PublicKey, pt: Plaintext, rng_seed: int | None = None) -> Ciphertext:
    ctx = pk.ctx
    ctx.check_same(pt.ctx)
    rng = _rng(rng_seed)
    u = ctx.ntt_forward(_ternary(ctx, rng))
    e0 = _gaussian(ctx, rng)
    e1 = _gaussian(ctx, rng)
    c0 = ctx.add(ctx.add(ctx.ntt_inverse(ctx.mul(u, pk.b)), e0), pt.poly)
    c1 = ctx.add(ctx.ntt_inverse(ctx.mul(u, pk.a)), e1)
    return Ciphertext(ctx, c0, c1, pt.scale)


def decrypt(sk: SecretKey, ct: Ciphertext) -> Plaintext:
    ctx = sk.ctx
    ctx.check_same(ct.ctx)
    c1s = ctx.ntt_inverse(ctx.mul(ctx.ntt_forward(ct.c1), sk.s_ntt))
    return Plaintext(ctx, ctx.add(ct.c0, c1s), ct.scale)


def _check_scales(x: float, y: float) -> None:
    if abs(x - y) / x >= 1e-9:
        raise ScaleMismatchError(f"scales differ: {x!r} vs {y!r}")


def add_ciphertexts(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    ctx = a.ctx
    ctx.check_same(b.ctx)
    _check_scales(a.scale, b.scale)
    return Ciphertext(ctx, ctx.add(a.c0, b.c0), ctx.add(a.c1, b.c1), a.scale, max(a.depth, b.depth))


def add_plaintext(ct: Ciphertext, pt: Plaintext) -> Ciphertext:
    ctx = ct.ctx
    ctx.check_same(pt.ctx)
    _check_scales(ct.scale, pt.scale)
    return Ciphertext(ctx, ctx.add(ct.c0, pt.poly), ct.c1, ct.scale, ct.depth)


def sum_ciphertexts(cts) -> Ciphertext:
    cts = list(cts)
    if not cts:
        raise ValueError("nothing to add")
    acc = cts[0]
    for ct in cts[1:]:
        acc = add_ciphertexts(acc, ct)
    return acc


def multiply_plaintext_scalar(ct: Ciphertext, k: float, scale: float | None = None) -> Ciphertext:
    """Multiply by a real constant encoded at ``scale`` (default: context scale).

    The constant polynomial ``round(k * scale)`` evaluates to ``k * scale`` in
    every slot, so no NTT is needed.  Only one multiplication is allowed.
    """
    if not np.isfinite(k):
        raise ValueError("scalar must be finite")
    if ct.depth >= 1:
        raise DepthError("ciphertext was already multiplied; depth > 1 is not supported")
    ctx = ct.ctx
    scale = ctx.scale if scale is None else float(scale)
    kint = int(round_half_away(np.array([k * scale]))[0])
    return Ciphertext(
        ctx, ctx.mul_scalar_int(ct.c0, kint), ctx.mul_scalar_int(ct.c1, kint), ct.scale * scale, 1
    )


def encrypt_values(pk: PublicKey, values, rng_seed=None) -> Ciphertext:
    return encrypt(pk, encode(pk.ctx, values), rng_seed)


def decrypt_values(sk: SecretKey, ct: Ciphertext, count: int | None = None) -> np.ndarray:
    out = decode(sk.ctx, decrypt(sk, ct))
    return out if count is None else out[:count]


# --------------------------------------------------------------------------
# framed binary serialization


def _write_header(buf: list, kind: int, ctx: CkksContext) -> None:
    buf.append(MAGIC)
    buf.append(struct.pack("<III", FORMAT_VERSION, kind, ctx.degree))
    buf.append(struct.pack("<I", len(ctx.primes)))
    buf.append(struct.pack(f"<{len(ctx.primes)}I", *ctx.moduli_bits))
    buf.append(struct.pack(f"<{len(ctx.primes)}Q", *ctx.primes))
    buf.append(struct.pack("<dd", ctx.scale, ctx.sigma))


def _write_poly(buf: list, poly: RingPoly) -> None:
    buf.append(struct.pack("<I", int(poly.ntt)))
    buf.append(poly.residues.astype("<u8").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CkksError("truncated key/ciphertext file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_header(r: _Reader) -> tuple[int, CkksContext]:
    if r.take(4) != MAGIC:
        raise CkksError("bad magic, expected b'QCHE'")
    version, kind, degree = r.unpack("<III")
    if version != FORMAT_VERSION:
        raise CkksError(f"unsupported format version {version}")
    (count,) = r.unpack("<I")
    bits = r.unpack(f"<{count}I")
    primes = r.unpack(f"<{count}Q")
    scale, sigma = r.unpack("<dd")
    ctx = create_context(degree, bits, scale, sigma)
    if ctx.primes != tuple(primes):
        raise CkksError("stored primes do not match the regenerated context")
    return kind, ctx


def _read_poly(r: _Reader, ctx: CkksContext) -> RingPoly:
    (flag,) = r.unpack("<I")
    n = len(ctx.data_primes) * ctx.degree
    arr = np.frombuffer(r.take(8 * n), dtype="<u8").astype(np.uint64)
    return RingPoly(arr.reshape(len(ctx.data_primes), ctx.degree), bool(flag))


def serialize(obj) -> bytes:
    buf: list = []
    if isinstance(obj, SecretKey):
        _write_header(buf, _KIND_SECRET, obj.ctx)
        _write_poly(buf, obj.s)
    elif isinstance(obj, PublicKey):
        _write_header(buf, _KIND_PUBLIC, obj.ctx)
        _write_poly(buf, obj.b)
        _write_poly(buf, obj.a)
    elif isinstance(obj, Ciphertext):
        _write_header(buf, _KIND_CIPHERTEXT, obj.ctx)
        buf.append(struct.pack("<dI", obj.scale, obj.depth))
        _write_poly(buf, obj.c0)
        _write_poly(buf, obj.c1)
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    return b"".join(buf)


def deserialize(data: bytes, ctx: CkksContext | None = None):
    r = _Reader(data)
    kind, parsed = _read_header(r)
    if ctx is not None:
        ctx.check_same(parsed)
        parsed = ctx
    if kind == _KIND_SECRET:
        return SecretKey(parsed, _read_poly(r, parsed))
    if kind == _KIND_PUBLIC:
        b = _read_poly(r, parsed)
        return PublicKey(parsed, b, _read_poly(r, parsed))
    if kind == _KIND_CIPHERTEXT:
        scale, depth = r.unpack("<dI")
        c0 = _read_poly(r, parsed)
        return Ciphertext(parsed, c0, _read_poly(r, parsed), scale, depth)
    raise CkksError(f"unknown object kind {kind}")


def save(obj, path) -> None:
    path = Path(path)
    data = serialize(obj)
    if isinstance(obj, SecretKey):
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        try:
            os.chmod(path, 0o600)
        except OSError:  # pragma: no cover - platform without POSIX modes
            pass
    else:
        path.write_bytes(data)


def load(path, ctx: CkksContext | None = None):
    return deserialize(Path(path).read_bytes(), ctx)
