"""Quantization and plaintext encodings.

Three encodings are provided:

* HERS row-major batching: plaintext ``i`` holds dimension ``i`` of up to ``n``
  gallery templates, one template per SIMD slot.  The query's dimension ``i``
  is replicated across the slots, so ``sum_i g_i * h_i`` carries every inner
  product of the chunk in its slots.
* per-template column packing (the 1:1 baseline): one template per plaintext,
  dimension ``i`` in slot ``i``; scores need a rotate-and-sum.
* naive scalar encoding: one constant polynomial per feature.

Slot ``s`` of a plaintext is the evaluation of the message polynomial at
``psi**e`` where ``e = 3**(s mod n/2)`` for the first slot row and ``-3**(...)``
for the second (mod ``2n``).  The Galois map ``x -> x**3`` therefore rotates
each row left by one slot.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .fv import Plaintext
from .ring import ParameterError, RingParams, ntt_tables

PRECISION = 0.004
NORM_TOLERANCE = 1e-6


class ContractError(ValueError):
    """Input violates an encoding precondition (normalization, overflow, size)."""


def quantize(v, precision: float = PRECISION, check_norm: bool = True) -> np.ndarray:
    """``round(v / precision)`` with halves rounded away from zero.

    ``v`` is a unit vector or a ``(m, d)`` batch of unit rows.
    """
    x = np.asarray(v, dtype=np.float64)
    if check_norm:
        norms = np.linalg.norm(x, axis=-1)
        if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
            raise ContractError("features must be L2-normalized before quantization")
    scaled = x / precision
    return (np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)).astype(np.int64)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=axis, keepdims=True), eps)


def dequantize_score(score, precision: float = PRECISION):
    return np.asarray(score, dtype=np.float64) * precision**2


def score_bound(d: int, precision: float = PRECISION) -> int:
    """Upper bound on ``|<q, p>|`` for quantized unit vectors of dimension ``d``.

    Rounding moves each coordinate by at most 1/2, so ``||q|| <= 1/precision + sqrt(d)/2``.
    """
    r = math.ceil(1 / precision) + math.sqrt(d) / 2
    return math.floor(r * r)


# ---------------------------------------------------------------------------
# slot batching
# ---------------------------------------------------------------------------

class SlotLayout:
    """Slot-to-evaluation-point map for a ring degree and plaintext modulus."""

    def __init__(self, n: int, t: int):
        if (t - 1) % (2 * n):
            raise ParameterError(f"t={t} is not 1 mod 2n; batching unavailable")
        self.n, self.t = n, t
        self.tables = ntt_tables((t,), n)
        half = n // 2
        g = np.array([pow(3, c, 2 * n) for c in range(half)], dtype=np.int64)
        e = np.concatenate([g, 2 * n - g])
        self.index = (e - 1) // 2  # slot s lives at NTT output position index[s]

    def encode(self, slots: np.ndarray) -> np.ndarray:
        evals = np.zeros(self.n, dtype=np.uint64)
        evals[self.index] = slots
        return self.tables.inverse(evals[None, :])[0]

    def decode(self, coeffs: np.ndarray) -> np.ndarray:
        return self.tables.forward(np.asarray(coeffs, np.uint64)[None, :])[0][self.index]


@lru_cache(maxsize=8)
def slot_layout(n: int, t: int) -> SlotLayout:
    return SlotLayout(n, t)


def to_residues(values, t: int) -> np.ndarray:
    """Signed integers to residues mod ``t`` (negatives become ``t - |x|``)."""
    v = np.asarray(values, dtype=np.int64)
    limit = (t - 1) // 2
    if v.size and int(np.abs(v).max()) > limit:
        raise ContractError(f"value outside the symmetric interval of Z_{t}")
    return np.where(v < 0, v + t, v).astype(np.uint64)


def from_residues(res, t: int) -> np.ndarray:
    r = np.asarray(res, dtype=np.int64)
    return np.where(r > t // 2, r - t, r)


def batch_encode(values, params: RingParams, offset: int = 0) -> Plaintext:
    """Place ``values`` in slots ``offset, offset+1, ...``; other slots are zero."""
    values = np.asarray(values, dtype=np.int64).ravel()
    if offset < 0 or offset + values.size > params.n:
        raise ContractError(f"{values.size} values at offset {offset} exceed {params.n} slots")
    slots = np.zeros(params.n, dtype=np.uint64)
    slots[offset:offset + values.size] = to_residues(values, params.t)
    return Plaintext(slot_layout(params.n, params.t).encode(slots))


def batch_decode(pt: Plaintext, params: RingParams) -> np.ndarray:
    """Signed slot values of a plaintext (length ``n``)."""
    return from_residues(slot_layout(params.n, params.t).decode(pt.coeffs), params.t)


def encode_query_hers(q, m: int, params: RingParams) -> list[Plaintext]:
    """``d`` plaintexts; plaintext ``i`` has ``q[i]`` in slots ``0 .. m-1``."""
    q = np.asarray(q, dtype=np.int64).ravel()
    if m > params.n:
        raise ContractError(f"m={m} exceeds the {params.n} slots of one chunk; split into chunks")
    return [batch_encode(np.full(m, qi, dtype=np.int64), params) for qi in q]


def encode_gallery_chunk_hers(P, params: RingParams, offset: int = 0) -> list[Plaintext]:
    """``P`` is ``(d, m_chunk)``; plaintext ``i`` holds row ``i`` from slot ``offset``."""
    P = np.asarray(P, dtype=np.int64)
    if P.ndim != 2:
        raise ContractError("gallery chunk must be a (d, m_chunk) matrix")
    return [batch_encode(row, params, offset) for row in P]


def padded_dim(d: int) -> int:
    return 1 << max(0, (d - 1).bit_length())


def encode_template_column(p, params: RingParams) -> Plaintext:
    """Baseline per-template packing: slot ``i`` holds ``p[i]``, zero-padded."""
    p = np.asarray(p, dtype=np.int64).ravel()
    if padded_dim(p.size) > params.n // 2:
        raise ParameterError(f"d={p.size} exceeds one slot row ({params.n // 2}) after padding")
    return batch_encode(p, params)


def encode_naive(p, params: RingParams) -> list[Plaintext]:
    """One constant polynomial per feature."""
    out = []
    for v in np.asarray(p, dtype=np.int64).ravel():
        c = np.zeros(params.n, dtype=np.uint64)
        c[0] = to_residues([v], params.t)[0]
        out.append(Plaintext(c))
    return out


def decode_naive(pt: Plaintext, params: RingParams) -> int:
    return int(from_residues(pt.coeffs[:1], params.t)[0])
