"""Server role: store encrypted templates and compute encrypted scores.

Nothing here accepts or constructs secret key material; all inputs are
ciphertexts and public or evaluation keys.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .codec import padded_dim
from .counters import OpCounters
from .fv import (
    Ciphertext,
    EvaluationKeys,
    Plaintext,
    PublicKey,
    RotationKeys,
    cipher_add,
    cipher_multiply,
    encrypt,
    rotate_slots,
)
from .gallery import (
    EncryptedGallery,
    EncryptedQuery,
    EncryptedScores,
    EnrollmentBatch,
    EnrollmentError,
    NaiveGallery,
    TemplateGallery,
    _check_params,
)
from .ring import ParameterError, make_rng
from .serialization import ParamsMismatchError


def encrypt_zero(pk: PublicKey, rng=None) -> Ciphertext:
    return encrypt(Plaintext(np.zeros(pk.params.n, np.uint64)), pk, rng)


def _accumulate(acc: Ciphertext | None, ct: Ciphertext, counters: OpCounters | None, init: bool) -> Ciphertext:
    """Add ``ct`` into ``acc``; the add into a fresh zero encryption counts as initialization."""
    out = cipher_add(acc, ct)
    if counters is not None:
        if init:
            counters.init_add += 1
        else:
            counters.add += 1
    return out


# ---------------------------------------------------------------------------
# HERS enrollment and search
# ---------------------------------------------------------------------------

def apply_enrollment(gallery: EncryptedGallery, batch: EnrollmentBatch, pk: PublicKey,
                     rng=None) -> tuple[EncryptedGallery, set]:
    """New gallery with ``batch`` merged in, plus the set of touched chunk indices.

    Fresh chunks start as encryptions of zero; segment ciphertexts are added on
    top.  The input gallery is left untouched so a concurrent reader always sees
    a complete state.
    """
    params = gallery.params
    if batch.params_hash != params.param_hash:
        raise ParamsMismatchError("enrollment params hash does not match gallery")
    _check_params(pk.params, params)
    if batch.start != gallery.cursor:
        raise EnrollmentError(f"batch prepared at cursor {batch.start}, gallery is at {gallery.cursor}")
    if batch.labels and batch.dim != gallery.dim:
        raise EnrollmentError(f"batch dimension {batch.dim} does not match gallery dimension {gallery.dim}")
    existing = set(gallery.labels)
    clash = [lab for lab in batch.labels if lab in existing]
    if clash:
        raise EnrollmentError(f"id collision: {clash[:5]}")
    if sum(seg.count for seg in batch.segments) != len(batch.labels):
        raise EnrollmentError("segment counts do not cover the batch")
    rng = make_rng() if rng is None else rng
    n = params.n
    chunks = list(gallery.chunks)
    touched = set()
    pos = gallery.cursor
    for seg in batch.segments:
        if seg.chunk != pos // n or seg.offset != pos % n or seg.offset + seg.count > n:
            raise EnrollmentError("segment does not continue the gallery")
        if len(seg.cts) != gallery.dim:
            raise EnrollmentError("segment has wrong number of ciphertexts")
        if seg.chunk == len(chunks):
            chunks.append(tuple(encrypt_zero(pk, rng) for _ in range(gallery.dim)))
        chunks[seg.chunk] = tuple(cipher_add(a, b) for a, b in zip(chunks[seg.chunk], seg.cts))
        touched.add(seg.chunk)
        pos += seg.count
    new = EncryptedGallery(params, gallery.dim, tuple(chunks), gallery.labels + tuple(batch.labels))
    return new, touched


def _score_chunk(chunk, query_cts, ev, pk, rng, counters):
    score = encrypt_zero(pk, rng)
    for i, (q, h) in enumerate(zip(query_cts, chunk)):
        prod = cipher_multiply(q, h, ev)
        if counters is not None:
            counters.mult += 1
        score = _accumulate(score, prod, counters, init=(i == 0))
    return score


def search(gallery: EncryptedGallery, query: EncryptedQuery, ev: EvaluationKeys, pk: PublicKey,
           counters: OpCounters | None = None, rng=None, workers: int = 1) -> EncryptedScores:
    """One score ciphertext per chunk: ``sum_i query_i * chunk_i``.

    Chunks are independent; ``workers > 1`` scores them on a thread pool with
    one RNG stream per chunk.
    """
    params = gallery.params
    if query.params_hash != params.param_hash:
        raise ParamsMismatchError("query params hash does not match gallery")
    if gallery.k == 0:
        return EncryptedScores("hers", (), 0, ())
    if query.dim != gallery.dim:
        raise ParameterError(f"query dimension {query.dim} does not match gallery dimension {gallery.dim}")
    rng = make_rng() if rng is None else rng
    seeds = rng.integers(0, 2**63, size=gallery.num_chunks)
    local = [OpCounters() for _ in gallery.chunks]

    def work(v):
        return _score_chunk(gallery.chunks[v], query.cts, ev, pk, make_rng(int(seeds[v])), local[v])

    if workers > 1 and gallery.num_chunks > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(work, range(gallery.num_chunks)))
    else:
        scores = [work(v) for v in range(gallery.num_chunks)]
    if counters is not None:
        for c in local:
            counters.mult += c.mult
            counters.add += c.add
            counters.init_add += c.init_add
        counters.resident_bytes = gallery.nbytes
    return EncryptedScores("hers", tuple(scores), gallery.k, gallery.labels)


# ---------------------------------------------------------------------------
# per-template baseline
# ---------------------------------------------------------------------------

def search_1to1_baseline(query_ct: Ciphertext, template_ct: Ciphertext, ev: EvaluationKeys,
                         rk: RotationKeys, dim: int, counters: OpCounters | None = None) -> Ciphertext:
    """Slot-wise product then rotate-and-sum over the padded dimension; slot 0 holds the score."""
    c = OpCounters() if counters is None else counters
    ct = cipher_multiply(query_ct, template_ct, ev)
    c.mult += 1
    step = 1
    while step < padded_dim(dim):
        ct = cipher_add(ct, rotate_slots(ct, step, rk, c))
        c.add += 1
        step *= 2
    return ct


def baseline_enroll(gallery: TemplateGallery, cts, labels) -> TemplateGallery:
    labels = tuple(labels)
    if len(cts) != len(labels):
        raise EnrollmentError("ciphertext and label counts differ")
    existing = set(gallery.labels)
    if any(lab in existing for lab in labels) or len(set(labels)) != len(labels):
        raise EnrollmentError("id collision")
    for ct in cts:
        _check_params(ct.params, gallery.params)
    return TemplateGallery(gallery.params, gallery.dim, gallery.templates + tuple(cts), gallery.labels + labels)


def baseline_search(gallery: TemplateGallery, query_ct: Ciphertext, ev: EvaluationKeys, rk: RotationKeys,
                    counters: OpCounters | None = None, subset=None) -> EncryptedScores:
    """1:1 matching against every template, or only the indices in ``subset``."""
    idx = range(gallery.k) if subset is None else list(subset)
    out = tuple(search_1to1_baseline(query_ct, gallery.templates[i], ev, rk, gallery.dim, counters) for i in idx)
    if counters is not None:
        counters.resident_bytes = gallery.nbytes
    labels = tuple(gallery.labels[i] for i in idx)
    return EncryptedScores("baseline", out, len(out), labels)


# ---------------------------------------------------------------------------
# naive scalar encoding
# ---------------------------------------------------------------------------

def naive_enroll(gallery: NaiveGallery, groups, labels) -> NaiveGallery:
    labels = tuple(labels)
    existing = set(gallery.labels)
    if any(lab in existing for lab in labels) or len(set(labels)) != len(labels):
        raise EnrollmentError("id collision")
    if any(len(g) != gallery.dim for g in groups):
        raise EnrollmentError("template with wrong number of ciphertexts")
    return NaiveGallery(gallery.params, gallery.dim, gallery.templates + tuple(tuple(g) for g in groups),
                        gallery.labels + labels)


def naive_search(gallery: NaiveGallery, query_cts, ev: EvaluationKeys,
                 counters: OpCounters | None = None) -> EncryptedScores:
    """``d`` products and ``d - 1`` additions per template."""
    if len(query_cts) != gallery.dim:
        raise ParameterError("query dimension does not match gallery")
    c = OpCounters() if counters is None else counters
    out = []
    for group in gallery.templates:
        acc = None
        for q, p in zip(query_cts, group):
            prod = cipher_multiply(q, p, ev)
            c.mult += 1
            if acc is None:
                acc = prod
            else:
                acc = cipher_add(acc, prod)
                c.add += 1
        out.append(acc)
    c.resident_bytes = gallery.nbytes
    return EncryptedScores("naive", tuple(out), len(out), gallery.labels)
