"""Benchmark harness: exact operation counts and per-query wall time per scheme.

Galleries grow incrementally through the sorted ``m`` grid, so each size costs
only the enrollment of its new templates.  Wall time covers the server-side
search alone.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import client, protocol, server
from .codec import PRECISION, padded_dim, quantize
from .counters import OpCounters
from .gallery import empty_gallery
from .ring import make_rng

SCHEMES = ("hers", "baseline", "naive")

_ENROLL = {"hers": protocol.enroll, "baseline": protocol.enroll_baseline, "naive": protocol.enroll_naive}


@dataclass(frozen=True)
class BenchRow:
    scheme: str
    n: int
    d: int
    m: int
    mult: int
    add: int
    rot: int
    wall_time: float  # seconds per query, best of the repeats
    gallery_bytes: int
    init_add: int = 0
    correct: bool = True


def expected_counts(scheme: str, n: int, d: int, m: int) -> dict:
    """Closed-form ``mult``, ``add``, ``rot`` (and ``init_add``) for one 1:m search."""
    if scheme == "naive":
        return {"mult": m * d, "add": m * (d - 1), "rot": 0, "init_add": 0}
    if scheme == "baseline":
        steps = int(math.log2(padded_dim(d)))
        return {"mult": m, "add": m * steps, "rot": m * steps, "init_add": 0}
    if scheme == "hers":
        c = math.ceil(m / n)
        return {"mult": c * d, "add": c * (d - 1), "rot": 0, "init_add": c}
    raise ValueError(f"unknown scheme {scheme!r}")


class BenchReport:
    COLUMNS = tuple(f.name for f in fields(BenchRow))

    def __init__(self, rows=()):
        self.rows = list(rows)

    def add(self, row: BenchRow):
        self.rows.append(row)

    def select(self, **match) -> list:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def mismatches(self) -> list:
        """Rows whose counters differ from the closed forms."""
        bad = []
        for r in self.rows:
            want = expected_counts(r.scheme, r.n, r.d, r.m)
            if any(getattr(r, k) != v for k, v in want.items()):
                bad.append((r, want))
        return bad

    def to_csv(self, fh=None) -> str:
        buf = io.StringIO() if fh is None else fh
        w = csv.DictWriter(buf, fieldnames=self.COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(asdict(r))
        return buf.getvalue() if fh is None else ""

    @classmethod
    def from_csv(cls, text: str) -> "BenchReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            kw = {}
            for f in fields(BenchRow):
                v = rec[f.name]
                if f.type in ("int", int):
                    kw[f.name] = int(v)
                elif f.type in ("float", float):
                    kw[f.name] = float(v)
                elif f.type in ("bool", bool):
                    kw[f.name] = v == "True"
                else:
                    kw[f.name] = v
            rows.append(BenchRow(**kw))
        return cls(rows)


def _unit_rows(rng, count, d):
    X = rng.standard_normal((count, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def _timed(fn, repeats):
    best, out = math.inf, None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _search_call(scheme, gallery, query, keys, rng):
    """Encrypt ``query`` for ``scheme`` and return ``counters -> EncryptedScores``."""
    pk, ev = keys.pk, keys.ev
    if scheme == "hers":
        q = client.encrypt_query(query, pk, PRECISION, min(gallery.k, keys.params.n), rng, prequantized=True)
        return lambda c: server.search(gallery, q, ev, pk, c, rng)
    if scheme == "baseline":
        q = client.encrypt_template_column(query, pk, PRECISION, rng, prequantized=True)
        return lambda c: server.baseline_search(gallery, q, ev, keys.rk, c)
    q = client.encrypt_naive(query, pk, PRECISION, rng, prequantized=True)
    return lambda c: server.naive_search(gallery, q, ev, c)


def run_bench(keys: protocol.KeySet, schemes=SCHEMES, dims=(16,), sizes=(64,), repeats: int = 1,
              verify: bool = True, rng=None, progress=None) -> BenchReport:
    """Measure every ``(scheme, d, m)`` combination.

    Parameters
    ----------
    keys : KeySet
        Needs rotation keys covering ``max(dims)`` for the baseline scheme.
    repeats : int
        Searches per point; the reported time is the fastest.
    verify : bool
        Decrypt each result and compare with the plaintext scores.
    progress : callable, optional
        Called with each finished row.
    """
    rng = make_rng() if rng is None else rng
    params = keys.params
    report = BenchReport()
    sizes = sorted(set(int(m) for m in sizes))
    for scheme in schemes:
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}")
        for d in dims:
            X = quantize(_unit_rows(rng, sizes[-1], d), PRECISION)
            query = quantize(_unit_rows(rng, 1, d)[0], PRECISION)
            gallery = empty_gallery(params, d, scheme)
            have = 0
            for m in sizes:
                gallery = _ENROLL[scheme](gallery, list(range(have, m)), X[have:m], keys.pk, PRECISION, rng,
                                          prequantized=True)
                have = m
                counters = OpCounters()
                search = _search_call(scheme, gallery, query, keys, rng)
                wall, scores = _timed(lambda: search(counters), 1)
                if repeats > 1:
                    wall = min(wall, _timed(lambda: search(None), repeats - 1)[0])
                ok = True
                if verify:
                    got = client.decrypt_scores(scores, keys.sk)
                    ok = bool(np.array_equal(got, X[:m] @ query))
                row = BenchRow(scheme, params.n, d, m, counters.mult, counters.add, counters.rot, wall,
                               gallery.nbytes, counters.init_add, ok)
                report.add(row)
                if progress is not None:
                    progress(row)
    return report
