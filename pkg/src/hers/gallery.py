"""Encrypted gallery containers shared by the client and server roles.

``EncryptedGallery`` is the row-major (HERS) layout: chunk ``v`` holds ``d``
ciphertexts, ciphertext ``i`` carrying dimension ``i`` of templates
``v*n .. v*n + n - 1`` in its slots.  ``TemplateGallery`` holds one column
ciphertext per template (the 1:1 baseline), ``NaiveGallery`` one ciphertext
per feature.

Galleries persist as a directory::

    manifest.json          encoding, params hash, dim, k, labels
    c00000_d0000.ct ...    one serialized ciphertext per (group, dimension)
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

from .fv import Ciphertext
from .ring import ParameterError, RingParams
from .serialization import FormatError, ParamsMismatchError, ciphertext_from_bytes, ciphertext_to_bytes

MANIFEST = "manifest.json"
GALLERY_VERSION = 1


class EnrollmentError(ValueError):
    """Rejected enrollment (id collision, stale cursor, shape mismatch)."""


def _check_params(a: RingParams, b: RingParams):
    if a.param_hash != b.param_hash:
        raise ParamsMismatchError("params hash mismatch")


@dataclass(frozen=True)
class EncryptedGallery:
    params: RingParams
    dim: int
    chunks: tuple = ()  # tuple of tuples of d Ciphertexts
    labels: tuple = ()

    encoding = "hers"

    @property
    def k(self) -> int:
        return len(self.labels)

    @property
    def cursor(self) -> int:
        return len(self.labels)

    @property
    def num_chunks(self) -> int:
        return len(self.chunks)

    @property
    def nbytes(self) -> int:
        return sum(ct.nbytes for chunk in self.chunks for ct in chunk)

    @property
    def groups(self):
        return self.chunks

    def valid_in_chunk(self, v: int) -> int:
        n = self.params.n
        return max(0, min(n, self.k - v * n))

    def check(self):
        expect = math.ceil(self.k / self.params.n)
        if len(self.chunks) != expect:
            raise FormatError(f"{len(self.chunks)} chunks for k={self.k}, expected {expect}")
        if any(len(c) != self.dim for c in self.chunks):
            raise FormatError("chunk with wrong number of dimension ciphertexts")
        if len(set(self.labels)) != len(self.labels):
            raise FormatError("duplicate labels")


@dataclass(frozen=True)
class TemplateGallery:
    """One column-packed ciphertext per template."""

    params: RingParams
    dim: int
    templates: tuple = ()
    labels: tuple = ()

    encoding = "baseline"

    @property
    def k(self) -> int:
        return len(self.labels)

    @property
    def nbytes(self) -> int:
        return sum(ct.nbytes for ct in self.templates)

    @property
    def groups(self):
        return tuple((ct,) for ct in self.templates)

    def check(self):
        if len(self.templates) != len(self.labels):
            raise FormatError("template and label counts differ")

    def index_of(self, label) -> int:
        return self.labels.index(label)


@dataclass(frozen=True)
class NaiveGallery:
    """``d`` constant-polynomial ciphertexts per template."""

    params: RingParams
    dim: int
    templates: tuple = ()  # tuple of tuples of d Ciphertexts
    labels: tuple = ()

    encoding = "naive"

    @property
    def k(self) -> int:
        return len(self.labels)

    @property
    def nbytes(self) -> int:
        return sum(ct.nbytes for group in self.templates for ct in group)

    @property
    def groups(self):
        return self.templates

    def check(self):
        if len(self.templates) != len(self.labels):
            raise FormatError("template and label counts differ")
        if any(len(g) != self.dim for g in self.templates):
            raise FormatError("template with wrong number of feature ciphertexts")


_KINDS = {"hers": EncryptedGallery, "baseline": TemplateGallery, "naive": NaiveGallery}


@dataclass(frozen=True)
class EnrollmentSegment:
    """Ciphertexts for templates landing in one chunk starting at slot ``offset``."""

    chunk: int
    offset: int
    count: int
    cts: tuple  # d Ciphertexts


@dataclass(frozen=True)
class EnrollmentBatch:
    """Client-to-server enrollment message for the HERS layout."""

    params_hash: bytes
    dim: int
    start: int  # gallery cursor the batch was prepared against
    labels: tuple
    segments: tuple = field(default_factory=tuple)


@dataclass(frozen=True)
class EncryptedQuery:
    params_hash: bytes
    cts: tuple  # d Ciphertexts

    @property
    def dim(self) -> int:
        return len(self.cts)


@dataclass(frozen=True)
class EncryptedScores:
    """Server output: one score ciphertext per chunk (HERS) or per template (baseline/naive).

    ``valid`` is the number of meaningful scores; ``labels`` map score index to id.
    """

    encoding: str
    cts: tuple
    valid: int
    labels: tuple

    @property
    def nbytes(self) -> int:
        return sum(ct.nbytes for ct in self.cts)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _ct_name(group: int, dim: int) -> str:
    return f"c{group:05d}_d{dim:04d}.ct"


def _write_atomic(path: Path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_gallery(gallery, directory, changed_groups=None):
    """Write ciphertext files, then the manifest (the commit point).

    ``changed_groups`` limits rewriting to those group indices.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    groups = gallery.groups
    idx = range(len(groups)) if changed_groups is None else sorted(changed_groups)
    for g in idx:
        for i, ct in enumerate(groups[g]):
            _write_atomic(d / _ct_name(g, i), ciphertext_to_bytes(ct))
    manifest = {
        "format": "hers-gallery",
        "version": GALLERY_VERSION,
        "encoding": gallery.encoding,
        "params_hash": gallery.params.param_hash.hex(),
        "dim": gallery.dim,
        "k": gallery.k,
        "groups": len(groups),
        "group_size": len(groups[0]) if groups else 0,
        "labels": list(gallery.labels),
    }
    _write_atomic(d / MANIFEST, json.dumps(manifest).encode())


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no gallery manifest at {path}")
    m = json.loads(path.read_text())
    if m.get("format") != "hers-gallery" or m.get("version") != GALLERY_VERSION:
        raise FormatError("unrecognized gallery manifest")
    return m


def load_gallery(directory, params: RingParams):
    d = Path(directory)
    m = read_manifest(d)
    if bytes.fromhex(m["params_hash"]) != params.param_hash:
        raise ParamsMismatchError("gallery was built under different params")
    groups = []
    for g in range(m["groups"]):
        groups.append(tuple(ciphertext_from_bytes((d / _ct_name(g, i)).read_bytes(), params)
                            for i in range(m["group_size"])))
    labels = tuple(m["labels"])
    kind = _KINDS[m["encoding"]]
    if kind is EncryptedGallery:
        gal = EncryptedGallery(params, m["dim"], tuple(groups), labels)
    elif kind is TemplateGallery:
        gal = TemplateGallery(params, m["dim"], tuple(g[0] for g in groups), labels)
    else:
        gal = NaiveGallery(params, m["dim"], tuple(groups), labels)
    gal.check()
    return gal


def empty_gallery(params: RingParams, dim: int, encoding: str = "hers"):
    if dim < 1:
        raise ParameterError("gallery dimension must be positive")
    return _KINDS[encoding](params, dim)


def with_templates(gallery, groups, labels):
    """Copy of a gallery with its groups and labels replaced."""
    if isinstance(gallery, EncryptedGallery):
        return replace(gallery, chunks=tuple(groups), labels=tuple(labels))
    if isinstance(gallery, TemplateGallery):
        return replace(gallery, templates=tuple(g[0] for g in groups), labels=tuple(labels))
    return replace(gallery, templates=tuple(groups), labels=tuple(labels))
