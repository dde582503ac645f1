"""Fan-Vercauteren somewhat-homomorphic encryption.

Ciphertext polynomials are kept in RNS form as ``uint64`` arrays of shape
``(k, n)`` (``k`` = number of primes in ``q``), coefficient domain.  Key
material additionally caches its NTT image because it is reused by every
operation.

Relinearization and slot rotation both use base-``w`` digit decomposition of a
ciphertext component against key-switching keys
``([-(a_i s + e_i) + w**i * target]_q, a_i)`` for ``i = 0 .. l-1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .counters import OpCounters
from .ring import (
    ParameterError,
    RingParams,
    addmod,
    find_ntt_primes,
    make_rng,
    mulmod,
    negmod,
    ntt_tables,
    sample_binary_ints,
    sample_gaussian_ints,
    sample_uniform_residues,
    signed_to_residues,
    submod,
)

_MASK64 = (1 << 64) - 1


class MissingKeyError(ParameterError):
    """Missing key material for a requested operation."""


# ---------------------------------------------------------------------------
# precomputation
# ---------------------------------------------------------------------------

class FVContext:
    """Per-parameter-set constants: NTT tables, CRT and base-extension factors."""

    def __init__(self, params: RingParams):
        self.params = params
        n, q = params.n, params.q
        self.n = n
        self.q = q
        self.t = params.t
        self.primes = params.q_primes
        self.k = len(self.primes)
        self.p = np.array(self.primes, dtype=np.uint64).reshape(self.k, 1)
        self.ntt = ntt_tables(self.primes, n)

        # auxiliary basis B for the exact tensor product: q*B > 4 n q^2
        need = 4 * n * q
        aux, b = [], 1
        for cand in find_ntt_primes(max(self.primes), 2 * n, 8, exclude=self.primes):
            if b > need:
                break
            aux.append(cand)
            b *= cand
        self.aux = tuple(aux)
        self.B = b
        self.ext = self.primes + self.aux
        self.M = q * b
        self.ext_ntt = ntt_tables(self.ext, n)
        self.ext_p = np.array(self.ext, dtype=np.uint64).reshape(-1, 1)

        # q-basis CRT: x = sum_i [r_i * qhat_inv_i]_{q_i} * qhat_i  (mod q)
        self.qhat = [q // p for p in self.primes]
        self.qhat_inv = np.array([pow(h % p, -1, p) for h, p in zip(self.qhat, self.primes)], np.uint64).reshape(-1, 1)
        self.qhat_mod_aux = np.array(
            [[h % a for a in self.aux] for h in self.qhat], dtype=np.uint64
        ).reshape(self.k, len(self.aux), 1)
        self.q_mod_aux = np.array([q % a for a in self.aux], dtype=np.uint64).reshape(-1, 1)
        self.aux_p = np.array(self.aux, dtype=np.uint64).reshape(-1, 1)
        self.primes_f = np.array(self.primes, dtype=np.float64).reshape(-1, 1)

        # extended-basis CRT
        self.mhat = np.array([self.M // p for p in self.ext], dtype=object).reshape(-1, 1)
        self.mhat_inv = np.array(
            [pow((self.M // p) % p, -1, p) for p in self.ext], np.uint64
        ).reshape(-1, 1)
        self.ext_f = np.array(self.ext, dtype=np.float64).reshape(-1, 1)

        self.delta_res = np.array([params.delta % p for p in self.primes], np.uint64).reshape(-1, 1)
        self._galois = {}

    # -- conversions -------------------------------------------------------

    def to_ntt(self, a: np.ndarray) -> np.ndarray:
        return self.ntt.forward(a)

    def from_ntt(self, a: np.ndarray) -> np.ndarray:
        return self.ntt.inverse(a)

    def crt(self, res: np.ndarray) -> np.ndarray:
        """``(k, n)`` residues to Python ints in ``[0, q)`` (object array)."""
        y = mulmod(res, self.qhat_inv, self.p).astype(object)
        acc = y[0] * self.qhat[0]
        for i in range(1, self.k):
            acc = acc + y[i] * self.qhat[i]
        return acc % self.q

    def reduce(self, values: np.ndarray) -> np.ndarray:
        """Python-int array to ``(k, n)`` residues mod each q prime."""
        return np.stack([(values % p).astype(np.uint64) for p in self.primes])

    def lift_to_ext(self, res: np.ndarray) -> np.ndarray:
        """Exact base extension q -> q*B of the centred representative.

        ``x = sum_i y_i * qhat_i - alpha * q`` with ``y_i = [r_i qhat_inv_i]_{q_i}``;
        ``alpha`` only selects which representative of ``x mod q`` is produced,
        so a rounding slip in the float estimate yields another valid lift with
        ``|x| <= q/2 + q``, well inside the tensor headroom.
        """
        y = mulmod(res, self.qhat_inv, self.p)
        alpha = np.rint((y.astype(np.float64) / self.primes_f).sum(axis=0)).astype(np.uint64)
        acc = np.zeros((len(self.aux), self.n), np.uint64)
        for i in range(self.k):
            yi = np.broadcast_to(y[i] % self.aux_p, acc.shape)
            acc = addmod(acc, mulmod(yi, np.broadcast_to(self.qhat_mod_aux[i], acc.shape), self.aux_p), self.aux_p)
        corr = mulmod(np.broadcast_to(alpha % self.aux_p, acc.shape), np.broadcast_to(self.q_mod_aux, acc.shape), self.aux_p)
        acc = submod(acc, corr, self.aux_p)
        return np.concatenate([res, acc])

    def ext_crt_centered(self, res: np.ndarray) -> np.ndarray:
        """Extended-basis residues to centred Python ints in ``(-M/2, M/2)``."""
        y = mulmod(res, self.mhat_inv, self.ext_p)
        alpha = np.rint((y.astype(np.float64) / self.ext_f).sum(axis=0)).astype(np.int64).astype(object)
        yo = y.astype(object)
        acc = yo[0] * self.mhat[0, 0]
        for j in range(1, len(self.ext)):
            acc = acc + yo[j] * self.mhat[j, 0]
        return acc - alpha * self.M

    def digits(self, values: np.ndarray) -> np.ndarray:
        """Base-w digits of ints in ``[0, q)``: ``(l, n)`` uint64."""
        w_bits, l = self.params.w_bits, self.params.l
        lo = (values & _MASK64).astype(np.uint64)
        hi = (values >> 64).astype(np.uint64)
        mask = np.uint64((1 << w_bits) - 1)
        out = np.empty((l, self.n), np.uint64)
        for j in range(l):
            off = j * w_bits
            if off + w_bits <= 64:
                d = lo >> np.uint64(off)
            elif off >= 64:
                d = hi >> np.uint64(off - 64)
            else:
                d = (lo >> np.uint64(off)) | (hi << np.uint64(64 - off))
            out[j] = d & mask
        return out

    def galois_map(self, g: int):
        """Index/sign tables for ``x -> x**g`` on coefficient arrays."""
        if g not in self._galois:
            n = self.n
            e = (np.arange(n) * g) % (2 * n)
            dest = np.where(e < n, e, e - n)
            neg = e >= n
            self._galois[g] = (dest, neg)
        return self._galois[g]

    def apply_galois(self, a: np.ndarray, g: int) -> np.ndarray:
        dest, neg = self.galois_map(g)
        out = np.empty_like(a)
        out[..., dest] = np.where(neg, negmod(a, self.p), a)
        return out


@lru_cache(maxsize=16)
def context(params: RingParams) -> FVContext:
    return FVContext(params)


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Plaintext:
    """Polynomial in R_t with coefficients in ``[0, t)``."""

    coeffs: np.ndarray

    def __eq__(self, other):
        return isinstance(other, Plaintext) and np.array_equal(self.coeffs, other.coeffs)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Ciphertext:
    """``data`` has shape ``(size, k, n)``; size 2 normally, 3 before relinearization.

    ``level`` counts multiplicative depth consumed (0 = fresh).
    """

    data: np.ndarray
    params: RingParams
    level: int = 0

    @property
    def c0(self) -> np.ndarray:
        return self.data[0]

    @property
    def c1(self) -> np.ndarray:
        return self.data[1]

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def nbytes(self) -> int:
        return int(self.data.size) * 8


@dataclass(frozen=True, eq=False)
class SecretKey:
    s: np.ndarray  # (n,) int64 in {0, 1}
    params: RingParams
    _cache: dict = field(default_factory=dict, repr=False)

    def residues(self) -> np.ndarray:
        if "res" not in self._cache:
            self._cache["res"] = signed_to_residues(self.s, self.params.q_primes)
        return self._cache["res"]

    def ntt(self) -> np.ndarray:
        if "ntt" not in self._cache:
            self._cache["ntt"] = context(self.params).to_ntt(self.residues())
        return self._cache["ntt"]


@dataclass(frozen=True, eq=False)
class PublicKey:
    data: np.ndarray  # (2, k, n)
    params: RingParams
    _cache: dict = field(default_factory=dict, repr=False)

    def ntt(self) -> np.ndarray:
        if "ntt" not in self._cache:
            self._cache["ntt"] = context(self.params).to_ntt(self.data)
        return self._cache["ntt"]


@dataclass(frozen=True, eq=False)
class SwitchingKey:
    """``l`` pairs ``(k0_i, k1_i)``: ``data`` shape ``(l, 2, k, n)``."""

    data: np.ndarray
    params: RingParams
    _cache: dict = field(default_factory=dict, repr=False)

    def ntt(self) -> np.ndarray:
        if "ntt" not in self._cache:
            self._cache["ntt"] = context(self.params).to_ntt(self.data)
        return self._cache["ntt"]


# relinearization keys switch from s^2 to s
EvaluationKeys = SwitchingKey


@dataclass(frozen=True, eq=False)
class RotationKeys:
    """Galois key-switching keys indexed by rotation step."""

    keys: dict  # step -> SwitchingKey
    params: RingParams

    @property
    def steps(self):
        return sorted(self.keys)


# ---------------------------------------------------------------------------
# key generation
# ---------------------------------------------------------------------------

def _rng(rng):
    return make_rng() if rng is None else rng


def _rlwe_mask(params: RingParams, ctx: FVContext, s_ntt: np.ndarray, rng, count: int):
    """``count`` samples of ``(-(a s + e), a)`` in coefficient domain."""
    a = np.stack([sample_uniform_residues(params.q_primes, params.n, rng) for _ in range(count)])
    e = np.stack([signed_to_residues(sample_gaussian_ints(params.n, params.sigma, params.trunc, rng), params.q_primes)
                  for _ in range(count)])
    a_s = ctx.from_ntt(mulmod(ctx.to_ntt(a), s_ntt, ctx.p))
    b = negmod(addmod(a_s, e, ctx.p), ctx.p)
    return b, a


def _switching_key(params, ctx, sk: SecretKey, target: np.ndarray, rng) -> SwitchingKey:
    """Key switching from ``target`` (RNS residues) to ``sk``."""
    l = params.l
    b, a = _rlwe_mask(params, ctx, sk.ntt(), rng, l)
    for i in range(l):
        wi = np.array([pow(params.w, i, p) for p in params.q_primes], np.uint64).reshape(-1, 1)
        b[i] = addmod(b[i], mulmod(target, np.broadcast_to(wi, target.shape), ctx.p), ctx.p)
    return SwitchingKey(np.stack([b, a], axis=1), params)


def keygen(params: RingParams, rng=None, debug: bool = False):
    """Return ``(SecretKey, PublicKey, EvaluationKeys)``.

    With ``debug=True`` the public- and evaluation-key identities are checked
    by direct evaluation before returning.
    """
    rng = _rng(rng)
    ctx = context(params)
    sk = SecretKey(sample_binary_ints(params.n, rng), params)
    b, a = _rlwe_mask(params, ctx, sk.ntt(), rng, 1)
    pk = PublicKey(np.stack([b[0], a[0]]), params)
    s2 = ctx.from_ntt(mulmod(sk.ntt(), sk.ntt(), ctx.p))
    ev = _switching_key(params, ctx, sk, s2, rng)
    if debug:
        verify_keys(sk, pk, ev)
    return sk, pk, ev


def _centered(values: np.ndarray, modulus: int) -> np.ndarray:
    half = modulus // 2
    return np.where(values > half, values - modulus, values)


def key_residual(sk: SecretKey, key_pair: np.ndarray) -> np.ndarray:
    """Centred ``k0 + k1 s mod q`` as Python ints."""
    ctx = context(sk.params)
    v = addmod(key_pair[0], ctx.from_ntt(mulmod(ctx.to_ntt(key_pair[1]), sk.ntt(), ctx.p)), ctx.p)
    return _centered(ctx.crt(v), ctx.q)


def verify_keys(sk: SecretKey, pk: PublicKey, ev: EvaluationKeys | None = None):
    params = sk.params
    bound = math.floor(params.trunc * params.sigma)
    r = key_residual(sk, pk.data)
    if max(abs(int(v)) for v in r) > bound:
        raise AssertionError("public key identity pk0 + pk1*s = -e violated")
    if ev is not None:
        ctx = context(params)
        s2 = ctx.crt(ctx.from_ntt(mulmod(sk.ntt(), sk.ntt(), ctx.p)))
        for i in range(params.l):
            r = key_residual(sk, ev.data[i])
            expect = (s2 * pow(params.w, i, ctx.q)) % ctx.q
            diff = _centered((r - expect) % ctx.q, ctx.q)
            if max(abs(int(v)) for v in diff) > bound:
                raise AssertionError(f"evaluation key {i} identity violated")


def rotation_keygen(sk: SecretKey, steps=None, rng=None) -> RotationKeys:
    """Keys for left slot rotations by ``steps`` (default: powers of two below n/2)."""
    params = sk.params
    ctx = context(params)
    rng = _rng(rng)
    if steps is None:
        steps = [1 << i for i in range((params.n // 2).bit_length() - 1)]
    keys = {}
    for step in steps:
        g = galois_element(step, params.n)
        target = ctx.apply_galois(sk.residues(), g)
        keys[int(step)] = _switching_key(params, ctx, sk, target, rng)
    return RotationKeys(keys, params)


def galois_element(step: int, n: int) -> int:
    return pow(3, step % (n // 2), 2 * n)


# ---------------------------------------------------------------------------
# encryption / decryption
# ---------------------------------------------------------------------------

def _check_pt(pt: Plaintext, params: RingParams):
    c = np.asarray(pt.coeffs)
    if c.shape != (params.n,):
        raise ParameterError(f"plaintext must have {params.n} coefficients")
    if c.size and int(c.max()) >= params.t:
        raise ParameterError("plaintext coefficients must lie in [0, t)")


def encrypt(pt: Plaintext, pk: PublicKey, rng=None) -> Ciphertext:
    """``([Δ m + pk0 u + e1]_q, [pk1 u + e2]_q)`` with binary ``u``."""
    params = pk.params
    _check_pt(pt, params)
    rng = _rng(rng)
    ctx = context(params)
    n = params.n
    u = signed_to_residues(sample_binary_ints(n, rng), params.q_primes)
    e = np.stack([signed_to_residues(sample_gaussian_ints(n, params.sigma, params.trunc, rng), params.q_primes)
                  for _ in range(2)])
    pku = ctx.from_ntt(mulmod(pk.ntt(), ctx.to_ntt(u)[None], ctx.p))
    m = np.broadcast_to(np.asarray(pt.coeffs, np.uint64) % ctx.p, (ctx.k, n))
    dm = mulmod(m, np.broadcast_to(ctx.delta_res, (ctx.k, n)), ctx.p)
    c = addmod(pku, e, ctx.p)
    c[0] = addmod(c[0], dm, ctx.p)
    return Ciphertext(c, params)


def _phase(ct: Ciphertext, sk: SecretKey) -> np.ndarray:
    """``[c0 + c1 s (+ c2 s^2)]_q`` as Python ints in ``[0, q)``."""
    ctx = context(ct.params)
    s = sk.ntt()
    acc = ctx.to_ntt(ct.data[1])
    if ct.size == 3:
        acc = addmod(acc, mulmod(ctx.to_ntt(ct.data[2]), s, ctx.p), ctx.p)
    elif ct.size != 2:
        raise ParameterError(f"unsupported ciphertext size {ct.size}")
    v = addmod(ct.data[0], ctx.from_ntt(mulmod(acc, s, ctx.p)), ctx.p)
    return ctx.crt(v)


def decrypt(ct: Ciphertext, sk: SecretKey) -> Plaintext:
    """``[round(t/q * [c0 + c1 s]_q)]_t`` in exact integer arithmetic.

    Correct only while the noise budget is positive; past that the output is
    silently wrong.
    """
    _same_params(ct.params, sk.params)
    t, q = ct.params.t, ct.params.q
    x = _phase(ct, sk)
    m = ((2 * t * x + q) // (2 * q)) % t
    return Plaintext(m.astype(np.uint64))


def noise_budget(ct: Ciphertext, sk: SecretKey) -> int:
    """Remaining invariant-noise budget in whole bits (0 = exhausted).

    With ``v = [t * (c0 + c1 s)]_q`` this is ``floor(log2(q) - 1 - log2 max|v|)``,
    i.e. ``log2(q / 2t) - log2 |residual|`` for ``residual = v / t`` measured in
    units of the plaintext scale.  A positive value guarantees exact decryption.
    """
    t, q = ct.params.t, ct.params.q
    x = _phase(ct, sk)
    v = _centered((x * t) % q, q)
    worst = max(abs(int(a)) for a in v)
    if worst == 0:
        return q.bit_length() - 1
    return max(0, math.floor(math.log2(q) - 1 - math.log2(worst)))


# ---------------------------------------------------------------------------
# homomorphic operations
# ---------------------------------------------------------------------------

def _same_params(a: RingParams, b: RingParams):
    if a is not b and a.param_hash != b.param_hash:
        raise ParameterError("parameter mismatch between operands")


def cipher_add(ct0: Ciphertext, ct1: Ciphertext, counters: OpCounters | None = None) -> Ciphertext:
    _same_params(ct0.params, ct1.params)
    if ct0.size != ct1.size:
        raise ParameterError("cannot add ciphertexts of different sizes")
    ctx = context(ct0.params)
    if counters is not None:
        counters.add += 1
    return Ciphertext(addmod(ct0.data, ct1.data, ctx.p), ct0.params, max(ct0.level, ct1.level))


def cipher_sub(ct0: Ciphertext, ct1: Ciphertext) -> Ciphertext:
    _same_params(ct0.params, ct1.params)
    ctx = context(ct0.params)
    return Ciphertext(submod(ct0.data, ct1.data, ctx.p), ct0.params, max(ct0.level, ct1.level))


def _tensor(ctx: FVContext, a: np.ndarray, b: np.ndarray):
    """Scaled tensor ``round(t/q * (a (x) b))``; returns c0, c1 residues and c2 ints."""
    ext = ctx.ext_ntt
    A = ext.forward(np.stack([ctx.lift_to_ext(a[0]), ctx.lift_to_ext(a[1])]))
    B = ext.forward(np.stack([ctx.lift_to_ext(b[0]), ctx.lift_to_ext(b[1])]))
    p = ctx.ext_p
    d0 = mulmod(A[0], B[0], p)
    d1 = addmod(mulmod(A[0], B[1], p), mulmod(A[1], B[0], p), p)
    d2 = mulmod(A[1], B[1], p)
    prods = ext.inverse(np.stack([d0, d1, d2]))
    t, q = ctx.t, ctx.q
    out = []
    for r in prods:
        x = ctx.ext_crt_centered(r)
        out.append(((2 * t * x + q) // (2 * q)) % q)
    return out


def _key_switch(ctx: FVContext, values: np.ndarray, key: SwitchingKey) -> np.ndarray:
    """``sum_i digit_i(values) * key_i`` -> ``(2, k, n)`` residues."""
    d = ctx.digits(values)
    dn = ctx.to_ntt(np.broadcast_to(d[:, None, :], (d.shape[0], ctx.k, ctx.n)))
    kn = key.ntt()
    acc = np.stack([
        (mulmod(dn, kn[:, 0], ctx.p).sum(axis=0) % ctx.p),
        (mulmod(dn, kn[:, 1], ctx.p).sum(axis=0) % ctx.p),
    ])
    return ctx.from_ntt(acc)


def cipher_multiply(
    ct0: Ciphertext,
    ct1: Ciphertext,
    ev: EvaluationKeys | None,
    counters: OpCounters | None = None,
) -> Ciphertext:
    """Homomorphic product; relinearized back to two components when ``ev`` is given."""
    _same_params(ct0.params, ct1.params)
    if ct0.size != 2 or ct1.size != 2:
        raise ParameterError("multiplication expects two-component ciphertexts")
    params = ct0.params
    ctx = context(params)
    c0, c1, c2 = _tensor(ctx, ct0.data, ct1.data)
    level = max(ct0.level, ct1.level) + 1
    if counters is not None:
        counters.mult += 1
    if ev is None:
        return Ciphertext(np.stack([ctx.reduce(c0), ctx.reduce(c1), ctx.reduce(c2)]), params, level)
    _same_params(params, ev.params)
    ks = _key_switch(ctx, c2, ev)
    out = addmod(np.stack([ctx.reduce(c0), ctx.reduce(c1)]), ks, ctx.p)
    return Ciphertext(out, params, level)


def relinearize(ct: Ciphertext, ev: EvaluationKeys) -> Ciphertext:
    if ct.size == 2:
        return ct
    ctx = context(ct.params)
    ks = _key_switch(ctx, ctx.crt(ct.data[2]), ev)
    return Ciphertext(addmod(ct.data[:2], ks, ctx.p), ct.params, ct.level)


def rotate_slots(ct: Ciphertext, step: int, rk: RotationKeys | None, counters: OpCounters | None = None) -> Ciphertext:
    """Rotate both slot rows left by ``step`` (``new[i] = old[i + step]``).

    ``step`` must be 0, a multiple of n/2 (identity), or have a key in ``rk``.
    """
    params = ct.params
    half = params.n // 2
    if step % half == 0:
        return ct
    if ct.size != 2:
        raise ParameterError("rotate a relinearized ciphertext")
    if rk is None or step not in rk.keys:
        raise MissingKeyError(f"no rotation key for step {step}")
    ctx = context(params)
    g = galois_element(step, params.n)
    a0 = ctx.apply_galois(ct.data[0], g)
    a1 = ctx.apply_galois(ct.data[1], g)
    ks = _key_switch(ctx, ctx.crt(a1), rk.keys[step])
    ks[0] = addmod(ks[0], a0, ctx.p)
    if counters is not None:
        counters.rot += 1
    return Ciphertext(ks, params, ct.level)


def trivial_zero(params: RingParams) -> Ciphertext:
    ctx = context(params)
    return Ciphertext(np.zeros((2, ctx.k, params.n), np.uint64), params)


def decryption_residual(ct: Ciphertext, sk: SecretKey, pt: Plaintext) -> np.ndarray:
    """Centred ``[c0 + c1 s - Δ m]_q``: the raw error term for a known plaintext."""
    q = ct.params.q
    x = _phase(ct, sk)
    m = np.asarray(pt.coeffs).astype(object)
    return _centered((x - ct.params.delta * m) % q, q)
