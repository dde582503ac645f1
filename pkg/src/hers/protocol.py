"""End-to-end search flows combining the client and server roles in one process.

The network service runs the same functions with the roles split across a
socket; these helpers are what tests and benchmarks call directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import client, server
from .codec import PRECISION, padded_dim
from .counters import OpCounters
from .fv import EvaluationKeys, PublicKey, RotationKeys, SecretKey, keygen, rotation_keygen
from .gallery import EncryptedGallery, EncryptedScores, NaiveGallery, TemplateGallery, empty_gallery
from .ring import RingParams, make_rng


@dataclass(frozen=True)
class KeySet:
    params: RingParams
    sk: SecretKey | None
    pk: PublicKey
    ev: EvaluationKeys
    rk: RotationKeys | None = None


def generate_keys(params: RingParams, rng=None, rotations: bool = True, max_dim: int | None = None) -> KeySet:
    """Fresh keys; rotation keys cover the rotate-and-sum steps up to ``max_dim`` (default n/2)."""
    rng = make_rng() if rng is None else rng
    sk, pk, ev = keygen(params, rng)
    rk = None
    if rotations:
        steps = None
        if max_dim is not None:
            steps = [1 << i for i in range(padded_dim(max_dim).bit_length() - 1)]
        rk = rotation_keygen(sk, steps, rng)
    return KeySet(params, sk, pk, ev, rk)


# ---------------------------------------------------------------------------
# HERS
# ---------------------------------------------------------------------------

def enroll(gallery: EncryptedGallery, ids, features, pk: PublicKey, precision: float = PRECISION,
           rng=None, prequantized: bool = False) -> EncryptedGallery:
    rng = make_rng() if rng is None else rng
    batch = client.prepare_enrollment(features, ids, gallery.cursor, pk, precision, rng, prequantized)
    return server.apply_enrollment(gallery, batch, pk, rng)[0]


def search(query, gallery: EncryptedGallery, keys: KeySet, precision: float = PRECISION,
           counters: OpCounters | None = None, rng=None, prequantized: bool = False,
           workers: int = 1) -> EncryptedScores:
    rng = make_rng() if rng is None else rng
    slots = min(gallery.k, keys.params.n) if gallery.k else keys.params.n
    q = client.encrypt_query(query, keys.pk, precision, slots, rng, prequantized)
    return server.search(gallery, q, keys.ev, keys.pk, counters, rng, workers)


# ---------------------------------------------------------------------------
# baseline and naive galleries
# ---------------------------------------------------------------------------

def enroll_baseline(gallery: TemplateGallery, ids, features, pk: PublicKey, precision: float = PRECISION,
                    rng=None, prequantized: bool = False) -> TemplateGallery:
    rng = make_rng() if rng is None else rng
    Q = client.quantize_features(features, precision, prequantized)
    cts = [client.encrypt_template_column(p, pk, precision, rng, prequantized=True) for p in Q]
    return server.baseline_enroll(gallery, cts, ids)


def search_baseline(query, gallery: TemplateGallery, keys: KeySet, precision: float = PRECISION,
                    counters: OpCounters | None = None, rng=None, prequantized: bool = False,
                    subset=None) -> EncryptedScores:
    qct = client.encrypt_template_column(query, keys.pk, precision, rng, prequantized)
    return server.baseline_search(gallery, qct, keys.ev, keys.rk, counters, subset)


def enroll_naive(gallery: NaiveGallery, ids, features, pk: PublicKey, precision: float = PRECISION,
                 rng=None, prequantized: bool = False) -> NaiveGallery:
    rng = make_rng() if rng is None else rng
    Q = client.quantize_features(features, precision, prequantized)
    groups = [client.encrypt_naive(p, pk, precision, rng, prequantized=True) for p in Q]
    return server.naive_enroll(gallery, groups, ids)


def search_naive(query, gallery: NaiveGallery, keys: KeySet, precision: float = PRECISION,
                 counters: OpCounters | None = None, rng=None, prequantized: bool = False) -> EncryptedScores:
    qcts = client.encrypt_naive(query, keys.pk, precision, rng, prequantized)
    return server.naive_search(gallery, qcts, keys.ev, counters)


def build_gallery(encoding: str, params: RingParams, ids, features, pk: PublicKey, precision: float = PRECISION,
                  rng=None, prequantized: bool = False):
    X = client.quantize_features(features, precision, prequantized)
    gal = empty_gallery(params, X.shape[1], encoding)
    enrol = {"hers": enroll, "baseline": enroll_baseline, "naive": enroll_naive}[encoding]
    return enrol(gal, ids, X, pk, precision, rng, prequantized=True)


# ---------------------------------------------------------------------------
# two-stage search
# ---------------------------------------------------------------------------

def _stage_two_rank(cand_idx, stage2_scores, labels, precision):
    """Rank candidates by full-dimension score, ties to the lower enrollment index."""
    order = np.argsort(cand_idx, kind="stable")
    idx = np.asarray(cand_idx)[order]
    raw = np.asarray(stage2_scores, dtype=np.int64)[order]
    return client.rank(raw, [labels[i] for i in idx], None, precision)


def two_stage_sweep(query_low, query_full, gallery_low: EncryptedGallery, gallery_full: TemplateGallery,
                    Ks, keys: KeySet, precision: float = PRECISION, rng=None, prequantized: bool = False,
                    counters: OpCounters | None = None) -> dict:
    """Two-stage results for every ``K`` in ``Ks`` from a single pair of encrypted passes.

    Stage 2 scores the largest candidate set once; each smaller ``K`` re-ranks
    its stage-1 prefix with those same scores, which is what a dedicated run
    would compute.
    """
    if gallery_low.labels != gallery_full.labels:
        raise ValueError("stage galleries must be enrolled over the same ids in the same order")
    rng = make_rng() if rng is None else rng
    m = gallery_low.k
    if m == 0:
        return {K: client.rank([], [], None, precision) for K in Ks}
    Ks = [min(max(1, int(K)), m) for K in Ks]
    kmax = max(Ks)
    s1 = search(query_low, gallery_low, keys, precision, counters, rng, prequantized)
    r1 = client.decrypt_scores(s1, keys.sk)
    stage1_order = np.argsort(-r1, kind="stable")[:kmax]
    s2 = search_baseline(query_full, gallery_full, keys, precision, counters, rng, prequantized,
                         subset=stage1_order.tolist())
    r2 = client.decrypt_scores(s2, keys.sk)
    return {K: _stage_two_rank(stage1_order[:K], r2[:K], gallery_full.labels, precision) for K in Ks}


def two_stage_search(query_low, query_full, gallery_low: EncryptedGallery, gallery_full: TemplateGallery,
                     K: int, keys: KeySet, precision: float = PRECISION, rng=None, prequantized: bool = False,
                     counters: OpCounters | None = None) -> client.MatchResult:
    """Low-dimension HERS search picks ``K`` candidates; full-dimension 1:1 matching ranks them."""
    res = two_stage_sweep(query_low, query_full, gallery_low, gallery_full, [K], keys, precision, rng,
                          prequantized, counters)
    return next(iter(res.values()))


def two_stage_reference(Q_low, G_low, Q_full, G_full, Ks) -> dict:
    """Plaintext twin of :func:`two_stage_sweep` on quantized integers, vectorized over queries.

    Returns ``{K: rank-1 gallery index per query}``.
    """
    S1 = np.asarray(Q_low, np.int64) @ np.asarray(G_low, np.int64).T
    S2 = np.asarray(Q_full, np.int64) @ np.asarray(G_full, np.int64).T
    m = S1.shape[1]
    Ks = [min(max(1, int(K)), m) for K in Ks]
    order = np.argsort(-S1, axis=1, kind="stable")
    out = {}
    for K in Ks:
        cand = order[:, :K]
        sc = np.take_along_axis(S2, cand, axis=1)
        best = sc.max(axis=1, keepdims=True)
        # lowest enrollment index among the tied maxima
        masked = np.where(sc == best, cand, m)
        out[K] = masked.min(axis=1)
    return out
