"""Client role: quantize, encode and encrypt; decrypt and rank scores.

Only this side ever holds the secret key.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fv
from .codec import (
    PRECISION,
    batch_decode,
    encode_gallery_chunk_hers,
    encode_naive,
    encode_query_hers,
    encode_template_column,
    decode_naive,
    quantize,
)
from .gallery import EncryptedQuery, EncryptedScores, EnrollmentBatch, EnrollmentError, EnrollmentSegment
from .ring import ParameterError, make_rng


@dataclass(frozen=True)
class MatchResult:
    """Ranked output of one search.

    ``ranked`` lists ``(label, score)`` pairs, best first; scores are dequantized
    inner products (integer score times ``precision**2``).
    """

    best_id: object
    best_score: float
    ranked: tuple
    raw_scores: np.ndarray

    @property
    def ranked_ids(self):
        return [lab for lab, _ in self.ranked]


def _as_matrix(features, dim=None) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ParameterError("features must be a (count, d) matrix")
    if dim is not None and X.shape[1] != dim:
        raise ParameterError(f"feature dimension {X.shape[1]} does not match gallery dimension {dim}")
    return X


def quantize_features(features, precision: float = PRECISION, prequantized: bool = False) -> np.ndarray:
    """Unit-norm real rows to int64 rows; integer input passes through when ``prequantized``."""
    if prequantized:
        X = np.asarray(features, dtype=np.int64)
        return X[None, :] if X.ndim == 1 else X
    return quantize(_as_matrix(features), precision)


def prepare_enrollment(features, labels, cursor: int, pk: fv.PublicKey, precision: float = PRECISION,
                       rng=None, prequantized: bool = False) -> EnrollmentBatch:
    """Encrypt a batch of templates for insertion at gallery position ``cursor``.

    The batch is split where it crosses a chunk boundary; each segment carries
    ``d`` ciphertexts whose slots ``offset .. offset+count-1`` hold the segment's
    templates and are zero elsewhere.
    """
    params = pk.params
    rng = make_rng() if rng is None else rng
    Q = quantize_features(features, precision, prequantized)
    labels = tuple(labels)
    if len(labels) != len(Q):
        raise EnrollmentError(f"{len(labels)} labels for {len(Q)} templates")
    if len(set(labels)) != len(labels):
        raise EnrollmentError("duplicate labels within batch")
    n = params.n
    segments = []
    pos = 0
    while pos < len(Q):
        k = cursor + pos
        offset = k % n
        count = min(len(Q) - pos, n - offset)
        block = Q[pos:pos + count].T  # (d, count)
        pts = encode_gallery_chunk_hers(block, params, offset)
        cts = tuple(fv.encrypt(pt, pk, rng) for pt in pts)
        segments.append(EnrollmentSegment(k // n, offset, count, cts))
        pos += count
    dim = Q.shape[1] if Q.size else 0
    return EnrollmentBatch(params.param_hash, dim, cursor, labels, tuple(segments))


def encrypt_query(query, pk: fv.PublicKey, precision: float = PRECISION, slots: int | None = None,
                  rng=None, prequantized: bool = False) -> EncryptedQuery:
    """Encrypt ``d`` plaintexts, plaintext ``i`` carrying ``q[i]`` in slots ``0 .. slots-1``."""
    params = pk.params
    rng = make_rng() if rng is None else rng
    q = quantize_features(query, precision, prequantized)[0]
    slots = params.n if slots is None else slots
    pts = encode_query_hers(q, slots, params)
    return EncryptedQuery(params.param_hash, tuple(fv.encrypt(pt, pk, rng) for pt in pts))


def encrypt_template_column(template, pk: fv.PublicKey, precision: float = PRECISION, rng=None,
                            prequantized: bool = False) -> fv.Ciphertext:
    """Per-template packing for the 1:1 baseline (query and gallery alike)."""
    rng = make_rng() if rng is None else rng
    p = quantize_features(template, precision, prequantized)[0]
    return fv.encrypt(encode_template_column(p, pk.params), pk, rng)


def encrypt_naive(template, pk: fv.PublicKey, precision: float = PRECISION, rng=None,
                  prequantized: bool = False) -> tuple:
    rng = make_rng() if rng is None else rng
    p = quantize_features(template, precision, prequantized)[0]
    return tuple(fv.encrypt(pt, pk, rng) for pt in encode_naive(p, pk.params))


def decrypt_scores(scores: EncryptedScores, sk: fv.SecretKey) -> np.ndarray:
    """Integer scores, truncated to the valid count."""
    params = sk.params
    if scores.encoding == "hers":
        parts = [batch_decode(fv.decrypt(ct, sk), params) for ct in scores.cts]
        flat = np.concatenate(parts) if parts else np.zeros(0, np.int64)
        return flat[:scores.valid]
    if scores.encoding == "baseline":
        return np.array([batch_decode(fv.decrypt(ct, sk), params)[0] for ct in scores.cts], dtype=np.int64)
    if scores.encoding == "naive":
        return np.array([decode_naive(fv.decrypt(ct, sk), params) for ct in scores.cts], dtype=np.int64)
    raise ParameterError(f"unknown score encoding {scores.encoding!r}")


def rank(raw, labels, top_k: int | None = None, precision: float = PRECISION) -> MatchResult:
    """Sort descending; equal scores keep enrollment order."""
    raw = np.asarray(raw, dtype=np.int64)
    if raw.size != len(labels):
        raise ParameterError("score and label counts differ")
    if raw.size == 0:
        return MatchResult(None, float("nan"), (), raw)
    full = np.argsort(-raw, kind="stable")
    order = full if top_k is None else full[:max(0, top_k)]
    scale = precision * precision
    ranked = tuple((labels[i], float(raw[i]) * scale) for i in order)
    b = int(full[0])
    return MatchResult(labels[b], float(raw[b]) * scale, ranked, raw)


def decrypt_and_rank(scores: EncryptedScores, sk: fv.SecretKey, top_k: int | None = None,
                     precision: float = PRECISION) -> MatchResult:
    return rank(decrypt_scores(scores, sk), scores.labels, top_k, precision)
