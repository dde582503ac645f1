"""Exact modular polynomial arithmetic over Z_p[x]/(x^n + 1).

Residues live in ``uint64`` numpy arrays.  Several primes can be stacked along
the leading axis (an RNS representation), and every kernel here broadcasts over
that axis, so a ciphertext polynomial modulo ``q = q_1 q_2 q_3`` is a ``(3, n)``
array and a single-modulus polynomial is a ``(1, n)`` array.

All results are exact.  Floating point appears only as a quotient estimate
inside the lazy NTT butterfly (corrected in integer arithmetic) and in the
Gaussian sampler.
"""

from __future__ import annotations

import hashlib
import json
import math
import secrets
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np


class ParameterError(ValueError):
    """Raised for invalid ring/moduli parameters."""


# products a*b stay below 2**64 when p < 2**42 and b is split into 21-bit limbs
_FAST_BITS = 42
_LIMB = np.uint64(21)
_LIMB_MASK = np.uint64((1 << 21) - 1)

_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(value: int) -> bool:
    """Deterministic Miller-Rabin, exact for all ``value < 3.3e24``."""
    if value < 2:
        return False
    for p in _MR_BASES:
        if value % p == 0:
            return value == p
    d, s = value - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, value)
        if x in (1, value - 1):
            continue
        for _ in range(s - 1):
            x = x * x % value
            if x == value - 1:
                break
        else:
            return False
    return True


def find_ntt_primes(lower: int, step: int, count: int, exclude: Sequence[int] = ()) -> list[int]:
    """Return the ``count`` smallest primes ``> lower`` that are ``1 mod step``."""
    primes = []
    candidate = (lower // step + 1) * step + 1
    while len(primes) < count:
        if candidate not in exclude and is_prime(candidate):
            primes.append(candidate)
        candidate += step
    return primes


def _prime_factors(value: int) -> list[int]:
    factors, f = [], 2
    while f * f <= value:
        if value % f == 0:
            factors.append(f)
            while value % f == 0:
                value //= f
        f += 1
    if value > 1:
        factors.append(value)
    return factors


@dataclass(frozen=True)
class Modulus:
    """An odd prime modulus below 2**62."""

    value: int

    def __post_init__(self):
        v = self.value
        if not isinstance(v, (int, np.integer)) or v <= 2 or v >= 1 << 62:
            raise ParameterError(f"modulus must be an odd prime in (2, 2**62), got {v}")
        if not is_prime(int(v)):
            raise ParameterError(f"modulus {v} is not prime")
        object.__setattr__(self, "value", int(v))

    @property
    def bits(self) -> int:
        return self.value.bit_length()

    def supports_ntt(self, n: int) -> bool:
        return (self.value - 1) % (2 * n) == 0

    def __int__(self):
        return self.value


def find_primitive_root(modulus, order: int) -> int:
    """Smallest-generator-derived element of exact multiplicative order ``order``.

    For ``order = 2n`` the result ``g`` satisfies ``g**(2n) == 1`` and
    ``g**n == modulus - 1``.
    """
    p = int(modulus)
    if order < 1 or (p - 1) % order:
        raise ParameterError(f"order {order} does not divide {p} - 1")
    factors = _prime_factors(order)
    cofactor = (p - 1) // order
    for x in range(2, p):
        g = pow(x, cofactor, p)
        if all(pow(g, order // r, p) != 1 for r in factors):
            return g
    raise ParameterError(f"no element of order {order} mod {p}")


# ---------------------------------------------------------------------------
# vectorised residue kernels; ``p`` broadcasts against the operands
# ---------------------------------------------------------------------------

def mulmod(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Elementwise ``a * b mod p`` for residues in ``[0, p)``."""
    if int(np.max(p)).bit_length() <= _FAST_BITS:
        hi = b >> _LIMB
        lo = b & _LIMB_MASK
        return ((((a * hi) % p) << _LIMB) + a * lo) % p
    out = (a.astype(object) * b.astype(object)) % p.astype(object)
    return out.astype(np.uint64)


def addmod(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> np.ndarray:
    s = a + b
    return np.where(s >= p, s - p, s)


def submod(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> np.ndarray:
    return np.where(a >= b, a - b, a + (p - b))


def negmod(a: np.ndarray, p: np.ndarray) -> np.ndarray:
    return np.where(a == 0, a, p - a)


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


class NttTables:
    """Negacyclic NTT tables for a stack of primes sharing one ring degree.

    ``forward`` maps coefficients ``a`` to ``A[..., j] = a(psi**(2j+1))`` in
    natural order, where ``psi`` is the primitive ``2n``-th root chosen per prime.
    """

    def __init__(self, primes: Sequence[int], n: int):
        if n < 2 or n & (n - 1):
            raise ParameterError(f"ring degree must be a power of two, got {n}")
        self.n = n
        self.primes = tuple(int(p) for p in primes)
        for p in self.primes:
            if (p - 1) % (2 * n):
                raise ParameterError(f"modulus {p} is not 1 mod 2n for n={n}; no NTT root")
        k = len(self.primes)
        self.p = np.array(self.primes, dtype=np.uint64).reshape(k, 1)
        self.psi = [find_primitive_root(p, 2 * n) for p in self.primes]
        self.bitrev = _bit_reverse_indices(n)
        twist, untwist = np.empty((k, n), np.uint64), np.empty((k, n), np.uint64)
        self._fwd_tw, self._inv_tw = [], []
        for r, (p, psi) in enumerate(zip(self.primes, self.psi)):
            psi_inv = pow(psi, -1, p)
            n_inv = pow(n, -1, p)
            twist[r] = _power_table(psi, n, p)
            untwist[r] = np.array(_power_table(psi_inv, n, p).astype(object) * n_inv % p, dtype=np.uint64)
        omega = [pow(psi, 2, p) for psi, p in zip(self.psi, self.primes)]
        h = 1
        while h < n:
            fw = np.empty((k, 1, h), np.uint64)
            iw = np.empty((k, 1, h), np.uint64)
            for r, (p, om) in enumerate(zip(self.primes, omega)):
                step = pow(om, n // (2 * h), p)
                fw[r, 0] = _power_table(step, h, p)
                iw[r, 0] = _power_table(pow(step, -1, p), h, p)
            self._fwd_tw.append(fw)
            self._inv_tw.append(iw)
            h *= 2
        self.twist = twist
        self.untwist = untwist
        self._lazy = max(self.primes).bit_length() <= 40
        if self._lazy:
            pf = self.p.astype(np.float64).reshape(k, 1, 1)
            self._fwd_twq = [tw.astype(np.float64) / pf for tw in self._fwd_tw]
            self._inv_twq = [tw.astype(np.float64) / pf for tw in self._inv_tw]
            self._fwd_tw = [tw.view(np.int64) for tw in self._fwd_tw]
            self._inv_tw = [tw.view(np.int64) for tw in self._inv_tw]

    def _cyclic(self, x: np.ndarray, inverse: bool) -> np.ndarray:
        tables = self._inv_tw if inverse else self._fwd_tw
        if self._lazy:
            return self._cyclic_lazy(x, tables, self._inv_twq if inverse else self._fwd_twq)
        lead = x.shape[:-1]
        k = len(self.primes)
        x = x[..., self.bitrev]
        p3 = self.p.reshape(k, 1, 1)
        h = 1
        for tw in tables:
            blocks = x.reshape(lead + (self.n // (2 * h), 2, h))
            even = blocks[..., 0, :]
            odd = mulmod(blocks[..., 1, :], tw, p3)
            out = np.empty_like(blocks)
            out[..., 0, :] = addmod(even, odd, p3)
            out[..., 1, :] = submod(even, odd, p3)
            x = out.reshape(lead + (self.n,))
            h *= 2
        return x

    def _cyclic_lazy(self, x, tables, quotients):
        # values stay below (2 log2(n) + 1) p; reduced once at the end
        lead = x.shape[:-1]
        k = len(self.primes)
        pi = self.p.view(np.int64).reshape(k, 1, 1)
        x = x.view(np.int64)[..., self.bitrev]
        h = 1
        for tw, twq in zip(tables, quotients):
            blocks = x.reshape(lead + (self.n // (2 * h), 2, h))
            even = blocks[..., 0, :]
            odd = blocks[..., 1, :]
            est = (odd.astype(np.float64) * twq).astype(np.int64)
            odd = odd * tw - est * pi
            np.add(odd, pi, out=odd, where=odd < 0)
            out = np.empty_like(blocks)
            np.add(even, odd, out=out[..., 0, :])
            np.subtract(even, odd, out=out[..., 1, :])
            out[..., 1, :] += 2 * pi
            x = out.reshape(lead + (self.n,))
            h *= 2
        return (x % self.p.view(np.int64)).view(np.uint64)

    def forward(self, a: np.ndarray) -> np.ndarray:
        """Coefficients ``(..., k, n)`` to evaluations ``(..., k, n)``."""
        return self._cyclic(mulmod(a, self.twist, self.p), inverse=False)

    def inverse(self, a: np.ndarray) -> np.ndarray:
        return mulmod(self._cyclic(a, inverse=True), self.untwist, self.p)


def _power_table(base: int, count: int, p: int) -> np.ndarray:
    out = np.empty(count, dtype=np.uint64)
    acc = 1
    for i in range(count):
        out[i] = acc
        acc = acc * base % p
    return out


@lru_cache(maxsize=64)
def ntt_tables(primes: tuple, n: int) -> NttTables:
    return NttTables(primes, n)


# ---------------------------------------------------------------------------
# single-modulus polynomials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Poly:
    """A polynomial with ``n`` residues modulo ``modulus``.

    ``is_ntt`` marks evaluation-domain data.  Arrays are treated as immutable.
    """

    coeffs: np.ndarray
    modulus: Modulus
    is_ntt: bool = False

    def __post_init__(self):
        c = np.asarray(self.coeffs)
        if c.ndim != 1:
            raise ParameterError("Poly coefficients must be one-dimensional")
        if c.dtype != np.uint64:
            c = np.array([int(x) % self.modulus.value for x in c], dtype=np.uint64)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def from_ints(cls, values, modulus, is_ntt: bool = False) -> "Poly":
        m = modulus if isinstance(modulus, Modulus) else Modulus(modulus)
        return cls(np.array([int(v) % m.value for v in values], dtype=np.uint64), m, is_ntt)

    @property
    def n(self) -> int:
        return self.coeffs.shape[0]

    def centered(self) -> list[int]:
        """Signed representatives in ``[-p/2, p/2)``."""
        p = self.modulus.value
        return [int(c) - p if int(c) >= (p + 1) // 2 else int(c) for c in self.coeffs]

    def __eq__(self, other):
        return (
            isinstance(other, Poly)
            and self.modulus == other.modulus
            and self.is_ntt == other.is_ntt
            and np.array_equal(self.coeffs, other.coeffs)
        )

    __hash__ = None


def _check_pair(a: Poly, b: Poly):
    if a.modulus != b.modulus:
        raise ParameterError(f"modulus mismatch: {a.modulus.value} vs {b.modulus.value}")
    if a.n != b.n:
        raise ParameterError(f"degree mismatch: {a.n} vs {b.n}")
    if a.is_ntt != b.is_ntt:
        raise ParameterError("domain mismatch: cannot mix NTT and coefficient polynomials")


def _pvec(m: Modulus) -> np.ndarray:
    return np.uint64(m.value)


def poly_add(a: Poly, b: Poly) -> Poly:
    _check_pair(a, b)
    return Poly(addmod(a.coeffs, b.coeffs, _pvec(a.modulus)), a.modulus, a.is_ntt)


def poly_sub(a: Poly, b: Poly) -> Poly:
    _check_pair(a, b)
    return Poly(submod(a.coeffs, b.coeffs, _pvec(a.modulus)), a.modulus, a.is_ntt)


def poly_scalar_mul(a: Poly, c: int) -> Poly:
    p = a.modulus.value
    cc = np.full_like(a.coeffs, int(c) % p)
    return Poly(mulmod(a.coeffs, cc, np.uint64(p)), a.modulus, a.is_ntt)


def ntt_forward(p: Poly) -> Poly:
    if p.is_ntt:
        raise ParameterError("polynomial is already in the NTT domain")
    tab = ntt_tables((p.modulus.value,), p.n)
    return Poly(tab.forward(p.coeffs[None, :])[0], p.modulus, True)


def ntt_inverse(p: Poly) -> Poly:
    if not p.is_ntt:
        raise ParameterError("polynomial is not in the NTT domain")
    tab = ntt_tables((p.modulus.value,), p.n)
    return Poly(tab.inverse(p.coeffs[None, :])[0], p.modulus, False)


def schoolbook_negacyclic(a: Sequence[int], b: Sequence[int], modulus: int) -> list[int]:
    """O(n^2) negacyclic product with Python integers."""
    n = len(a)
    out = [0] * n
    for i, ai in enumerate(a):
        ai = int(ai)
        if ai == 0:
            continue
        for j, bj in enumerate(b):
            k = i + j
            if k < n:
                out[k] += ai * int(bj)
            else:
                out[k - n] -= ai * int(bj)
    return [v % modulus for v in out]


def poly_negacyclic_mul(a: Poly, b: Poly, use_ntt: bool | None = None) -> Poly:
    """Product in Z_p[x]/(x^n + 1).

    Uses the NTT whenever the modulus admits one (``use_ntt=None``).  Forcing
    ``use_ntt=True`` on an unsuitable modulus raises ``ParameterError``.
    NTT-domain inputs are multiplied pointwise.
    """
    _check_pair(a, b)
    p = a.modulus
    if a.is_ntt:
        return Poly(mulmod(a.coeffs, b.coeffs, _pvec(p)), p, True)
    friendly = p.supports_ntt(a.n)
    if use_ntt and not friendly:
        raise ParameterError(f"modulus {p.value} is not 1 mod 2n (n={a.n})")
    if use_ntt is False or not friendly:
        return Poly(np.array(schoolbook_negacyclic(a.coeffs, b.coeffs, p.value), dtype=np.uint64), p)
    tab = ntt_tables((p.value,), a.n)
    fa = tab.forward(a.coeffs[None, :])
    fb = tab.forward(b.coeffs[None, :])
    return Poly(tab.inverse(mulmod(fa, fb, tab.p))[0], p)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def make_rng(seed: int | None = None) -> np.random.Generator:
    """Deterministic generator for a given seed; OS-entropy seeded otherwise."""
    if seed is None:
        seed = secrets.randbits(256)
    return np.random.default_rng(seed)


def sample_uniform_residues(primes: Sequence[int], n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform element of Z_q[x]/(x^n+1) in RNS form ``(k, n)``."""
    return np.stack([rng.integers(0, p, size=n, dtype=np.uint64) for p in primes])


def sample_binary_ints(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=n, dtype=np.int64)


def sample_gaussian_ints(n: int, sigma: float, trunc: float, rng: np.random.Generator) -> np.ndarray:
    """Rounded Gaussian, resampled until every ``|c| <= floor(trunc * sigma)``."""
    bound = math.floor(trunc * sigma)
    out = np.rint(rng.normal(0.0, sigma, size=n)).astype(np.int64)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = np.rint(rng.normal(0.0, sigma, size=int(bad.sum()))).astype(np.int64)
        bad = np.abs(out) > bound
    return out


def signed_to_residues(values: np.ndarray, primes: Sequence[int]) -> np.ndarray:
    """Map small signed integers to ``(k, n)`` residues."""
    v = np.asarray(values, dtype=np.int64)
    rows = []
    for p in primes:
        r = v % np.int64(p)
        rows.append(r.astype(np.uint64))
    return np.stack(rows)


def sample_uniform(modulus, n: int, rng: np.random.Generator) -> Poly:
    m = modulus if isinstance(modulus, Modulus) else Modulus(modulus)
    return Poly(sample_uniform_residues((m.value,), n, rng)[0], m)


def sample_binary(n: int, rng: np.random.Generator, modulus=None) -> Poly:
    """Coefficients in {0, 1}; residues mod ``modulus`` (default 3, i.e. R_2 lifted)."""
    m = Modulus(modulus or 3) if not isinstance(modulus, Modulus) else modulus
    return Poly(sample_binary_ints(n, rng).astype(np.uint64), m)


def sample_gaussian(sigma: float, trunc: float, n: int, rng: np.random.Generator, modulus) -> Poly:
    m = modulus if isinstance(modulus, Modulus) else Modulus(modulus)
    return Poly(signed_to_residues(sample_gaussian_ints(n, sigma, trunc, rng), (m.value,))[0], m)


# ---------------------------------------------------------------------------
# ring parameters
# ---------------------------------------------------------------------------

PLAINTEXT_MODULUS = 1_032_193
SUPPORTED_DEGREES = (1024, 2048, 4096)

# largest log2(q) for 128-bit classical security (HE standard, 2018)
SECURITY_128_MAX_LOGQ = {1024: 27, 2048: 54, 4096: 109, 8192: 218, 16384: 438, 32768: 881}


class InsecureParametersError(ParameterError):
    pass


@dataclass(frozen=True)
class RingParams:
    """FV parameters.

    ``w = 2**w_bits`` is the relinearization base and ``l`` is the number of
    base-``w`` digits of ``q``.  ``insecure=True`` skips the 128-bit security
    table check and is meant for small test rings only.
    """

    n: int
    t: int
    q_primes: tuple
    w_bits: int = 18
    sigma: float = 3.2
    trunc: float = 6.0
    insecure: bool = False
    _derived: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "q_primes", tuple(int(p) for p in self.q_primes))
        if self.n not in SUPPORTED_DEGREES:
            raise ParameterError(f"n must be one of {SUPPORTED_DEGREES}, got {self.n}")
        if not 1 <= len(self.q_primes) <= 3:
            raise ParameterError("q must be a product of 1 to 3 RNS primes")
        if len(set(self.q_primes)) != len(self.q_primes):
            raise ParameterError("RNS primes must be distinct")
        for p in (self.t,) + self.q_primes:
            m = Modulus(p)
            if not m.supports_ntt(self.n):
                raise ParameterError(f"modulus {p} is not 1 mod 2n (n={self.n})")
        if self.t in self.q_primes:
            raise ParameterError("t must differ from the ciphertext primes")
        if self.q // self.t < 2:
            raise ParameterError("q must be much larger than t")
        if not self.insecure:
            limit = SECURITY_128_MAX_LOGQ[self.n]
            if self.logq_bits > limit:
                raise InsecureParametersError(
                    f"n={self.n} with a {self.logq_bits}-bit q is below 128-bit security "
                    f"(max {limit} bits); pass insecure=True for test rings"
                )

    @property
    def q(self) -> int:
        return math.prod(self.q_primes)

    @property
    def logq_bits(self) -> int:
        return sum(p.bit_length() for p in self.q_primes)

    @property
    def w(self) -> int:
        return 1 << self.w_bits

    @property
    def l(self) -> int:
        count, x = 0, self.q
        while x:
            x >>= self.w_bits
            count += 1
        return count

    @property
    def delta(self) -> int:
        return self.q // self.t

    @property
    def param_hash(self) -> bytes:
        if "hash" not in self._derived:
            blob = json.dumps(self.describe(), sort_keys=True).encode()
            self._derived["hash"] = hashlib.sha256(blob).digest()
        return self._derived["hash"]

    def describe(self) -> dict:
        return {
            "n": self.n,
            "t": self.t,
            "q_primes": list(self.q_primes),
            "w_bits": self.w_bits,
            "sigma": self.sigma,
            "trunc": self.trunc,
        }

    @classmethod
    def from_dict(cls, d: dict, insecure: bool | None = None) -> "RingParams":
        return cls(
            n=int(d["n"]),
            t=int(d["t"]),
            q_primes=tuple(int(p) for p in d["q_primes"]),
            w_bits=int(d.get("w_bits", 18)),
            sigma=float(d.get("sigma", 3.2)),
            trunc=float(d.get("trunc", 6.0)),
            insecure=bool(d.get("insecure", False)) if insecure is None else insecure,
        )


@lru_cache(maxsize=None)
def default_q_primes(count: int = 3) -> tuple:
    """Smallest primes above 2**35 that are 1 mod 8192 (NTT-friendly up to n=4096)."""
    return tuple(find_ntt_primes(1 << 35, 2 * 4096, count))


def production_params() -> RingParams:
    return RingParams(n=4096, t=PLAINTEXT_MODULUS, q_primes=default_q_primes())


def testing_params(n: int = 1024) -> RingParams:
    """Same t and q as production on a smaller ring; cryptographically insecure."""
    return RingParams(n=n, t=PLAINTEXT_MODULUS, q_primes=default_q_primes(), insecure=True)


PRESETS = {
    "production": production_params,
    "test-1024": lambda: testing_params(1024),
    "test-2048": lambda: testing_params(2048),
}
