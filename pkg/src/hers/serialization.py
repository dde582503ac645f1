"""Binary formats for key material, ciphertexts and feature matrices.

Key and ciphertext blobs::

    b"HERS" | u16 version | u8 kind | 32-byte params hash | u32 count | extra | residues

``count`` is the number of ``(k, n)`` RNS polynomials that follow; each is
stored as little-endian u64 residues, prime-major, coefficient domain.
``extra`` depends on the kind: one level byte for ciphertexts, ``count / 2l``
u32 rotation steps for rotation keys, nothing otherwise.

Feature files::

    b"HFVC" | u16 version | u8 dtype | u32 d | u32 m | f64 precision | data

``dtype`` 0 stores int32 quantized values, 1 stores float64 embeddings.  Data
is row-major with one template (``d`` values) per row.
"""

from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from .fv import Ciphertext, PublicKey, RotationKeys, SecretKey, SwitchingKey
from .ring import ParameterError, RingParams, signed_to_residues

MAGIC = b"HERS"
VERSION = 1
_HEADER = struct.Struct("<4sHB32sI")

KIND_CIPHERTEXT = 1
KIND_PUBLIC_KEY = 2
KIND_SECRET_KEY = 3
KIND_EVAL_KEY = 4
KIND_ROTATION_KEYS = 5

FEATURE_MAGIC = b"HFVC"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHBIId")
DTYPE_INT32, DTYPE_FLOAT64 = 0, 1


class FormatError(ValueError):
    """Malformed or truncated blob."""


class ParamsMismatchError(ParameterError):
    """Blob was produced under different ring parameters."""


def _pack(kind: int, params: RingParams, polys: np.ndarray, extra: bytes = b"") -> bytes:
    polys = np.ascontiguousarray(polys, dtype="<u8")
    k, n = len(params.q_primes), params.n
    count = polys.size // (k * n)
    return _HEADER.pack(MAGIC, VERSION, kind, params.param_hash, count) + extra + polys.tobytes()


def _unpack_header(blob: bytes, params: RingParams, kind: int):
    if len(blob) < _HEADER.size:
        raise FormatError("blob shorter than header")
    magic, version, got_kind, phash, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if got_kind != kind:
        raise FormatError(f"expected kind {kind}, found {got_kind}")
    if phash != params.param_hash:
        raise ParamsMismatchError("params hash mismatch")
    return count, _HEADER.size


def _polys(blob: bytes, offset: int, count: int, params: RingParams) -> np.ndarray:
    k, n = len(params.q_primes), params.n
    need = count * k * n * 8
    if len(blob) - offset != need:
        raise FormatError(f"payload is {len(blob) - offset} bytes, expected {need}")
    arr = np.frombuffer(blob, dtype="<u8", count=count * k * n, offset=offset).astype(np.uint64)
    arr = arr.reshape(count, k, n)
    if np.any(arr >= np.array(params.q_primes, np.uint64).reshape(1, k, 1)):
        raise FormatError("residue out of range")
    return arr


# ---------------------------------------------------------------------------
# ciphertexts and keys
# ---------------------------------------------------------------------------

def ciphertext_to_bytes(ct: Ciphertext) -> bytes:
    return _pack(KIND_CIPHERTEXT, ct.params, ct.data, struct.pack("<B", ct.level))


def ciphertext_from_bytes(blob: bytes, params: RingParams) -> Ciphertext:
    count, off = _unpack_header(blob, params, KIND_CIPHERTEXT)
    if count not in (2, 3):
        raise FormatError(f"ciphertext with {count} components")
    (level,) = struct.unpack_from("<B", blob, off)
    return Ciphertext(_polys(blob, off + 1, count, params), params, level)


def public_key_to_bytes(pk: PublicKey) -> bytes:
    return _pack(KIND_PUBLIC_KEY, pk.params, pk.data)


def public_key_from_bytes(blob: bytes, params: RingParams) -> PublicKey:
    count, off = _unpack_header(blob, params, KIND_PUBLIC_KEY)
    return PublicKey(_polys(blob, off, count, params), params)


def secret_key_to_bytes(sk: SecretKey) -> bytes:
    return _pack(KIND_SECRET_KEY, sk.params, sk.residues()[None])


def secret_key_from_bytes(blob: bytes, params: RingParams) -> SecretKey:
    count, off = _unpack_header(blob, params, KIND_SECRET_KEY)
    res = _polys(blob, off, count, params)[0]
    p0 = params.q_primes[0]
    s = np.where(res[0] > p0 // 2, res[0].astype(np.int64) - p0, res[0].astype(np.int64))
    if not np.array_equal(signed_to_residues(s, params.q_primes), res):
        raise FormatError("inconsistent secret key residues")
    return SecretKey(s, params)


def eval_key_to_bytes(ev: SwitchingKey) -> bytes:
    return _pack(KIND_EVAL_KEY, ev.params, ev.data)


def eval_key_from_bytes(blob: bytes, params: RingParams) -> SwitchingKey:
    count, off = _unpack_header(blob, params, KIND_EVAL_KEY)
    if count != 2 * params.l:
        raise FormatError("evaluation key has wrong digit count")
    return SwitchingKey(_polys(blob, off, count, params).reshape(params.l, 2, -1, params.n), params)


def rotation_keys_to_bytes(rk: RotationKeys) -> bytes:
    steps = rk.steps
    extra = struct.pack(f"<{len(steps)}I", *steps)
    data = np.stack([rk.keys[s].data for s in steps]) if steps else np.zeros((0,), np.uint64)
    return _pack(KIND_ROTATION_KEYS, rk.params, data, extra)


def rotation_keys_from_bytes(blob: bytes, params: RingParams) -> RotationKeys:
    count, off = _unpack_header(blob, params, KIND_ROTATION_KEYS)
    per = 2 * params.l
    if count % per:
        raise FormatError("rotation key payload not a whole number of keys")
    nkeys = count // per
    steps = struct.unpack_from(f"<{nkeys}I", blob, off)
    data = _polys(blob, off + 4 * nkeys, count, params).reshape(nkeys, params.l, 2, -1, params.n)
    return RotationKeys({int(s): SwitchingKey(d, params) for s, d in zip(steps, data)}, params)


# ---------------------------------------------------------------------------
# parameter and key files
# ---------------------------------------------------------------------------

PARAMS_FILE = "params.json"
PUBLIC_FILE = "public.key"
EVAL_FILE = "eval.key"
ROTATION_FILE = "rotation.key"
SECRET_FILE = "secret.key"


def params_to_json(params: RingParams) -> str:
    d = params.describe()
    d["insecure"] = params.insecure
    d["hash"] = params.param_hash.hex()
    return json.dumps(d, indent=2)


def params_from_json(text: str) -> RingParams:
    d = json.loads(text)
    params = RingParams.from_dict(d)
    if "hash" in d and bytes.fromhex(d["hash"]) != params.param_hash:
        raise ParamsMismatchError("params file hash does not match its contents")
    return params


def _atomic_write(path: Path, data: bytes, mode: int = 0o644):
    tmp = path.with_name(path.name + ".tmp")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, mode)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_params(path, params: RingParams):
    _atomic_write(Path(path), params_to_json(params).encode())


def load_params(path) -> RingParams:
    return params_from_json(Path(path).read_text())


def save_keys(directory, params, pk=None, ev=None, rk=None, sk=None):
    """Write whichever keys are given; the secret key gets owner-only permissions."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_params(d / PARAMS_FILE, params)
    if pk is not None:
        _atomic_write(d / PUBLIC_FILE, public_key_to_bytes(pk))
    if ev is not None:
        _atomic_write(d / EVAL_FILE, eval_key_to_bytes(ev))
    if rk is not None:
        _atomic_write(d / ROTATION_FILE, rotation_keys_to_bytes(rk))
    if sk is not None:
        _atomic_write(d / SECRET_FILE, secret_key_to_bytes(sk), 0o600)


def _read(path: Path) -> bytes:
    if not path.is_file():
        raise FileNotFoundError(f"missing key file {path}")
    return path.read_bytes()


def load_public_keys(directory, params: RingParams | None = None, rotation: bool = True):
    """``(params, pk, ev, rk)`` for the evaluating side; ``rk`` is None when absent."""
    d = Path(directory)
    file_params = load_params(d / PARAMS_FILE) if (d / PARAMS_FILE).is_file() else None
    if params is None:
        if file_params is None:
            raise FileNotFoundError(f"missing {d / PARAMS_FILE}")
        params = file_params
    elif file_params is not None and file_params.param_hash != params.param_hash:
        raise ParamsMismatchError("key directory was generated for different params")
    pk = public_key_from_bytes(_read(d / PUBLIC_FILE), params)
    ev = eval_key_from_bytes(_read(d / EVAL_FILE), params)
    rk = None
    if rotation and (d / ROTATION_FILE).is_file():
        rk = rotation_keys_from_bytes((d / ROTATION_FILE).read_bytes(), params)
    return params, pk, ev, rk


def load_secret_key(directory, params: RingParams) -> SecretKey:
    return secret_key_from_bytes(_read(Path(directory) / SECRET_FILE), params)


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def features_to_bytes(X, precision: float) -> bytes:
    """``X`` is ``(m, d)``; integer arrays are stored as int32, floats as float64."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise FormatError("feature matrix must be (m, d)")
    m, d = X.shape
    if np.issubdtype(X.dtype, np.integer):
        if X.size and (X.max() > np.iinfo(np.int32).max or X.min() < np.iinfo(np.int32).min):
            raise FormatError("quantized features exceed int32")
        dtype, data = DTYPE_INT32, X.astype("<i4")
    else:
        dtype, data = DTYPE_FLOAT64, X.astype("<f8")
    return _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, dtype, d, m, float(precision)) + data.tobytes()


def features_from_bytes(blob: bytes):
    """Returns ``(X, precision)`` with ``X`` shaped ``(m, d)``."""
    if len(blob) < _FEATURE_HEADER.size:
        raise FormatError("feature blob shorter than header")
    magic, version, dtype, d, m, precision = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature version {version}")
    if dtype not in (DTYPE_INT32, DTYPE_FLOAT64):
        raise FormatError(f"unknown feature dtype {dtype}")
    np_dtype = "<i4" if dtype == DTYPE_INT32 else "<f8"
    need = m * d * np.dtype(np_dtype).itemsize
    if len(blob) - _FEATURE_HEADER.size != need:
        raise FormatError("feature payload size mismatch")
    X = np.frombuffer(blob, dtype=np_dtype, count=m * d, offset=_FEATURE_HEADER.size)
    X = X.astype(np.int64 if dtype == DTYPE_INT32 else np.float64).reshape(m, d)
    return X, precision


def write_features(path, X, precision: float):
    _atomic_write(Path(path), features_to_bytes(X, precision))


def read_features(path):
    return features_from_bytes(Path(path).read_bytes())


def ciphertext_wire_bytes(params: RingParams) -> int:
    """Serialized size of one two-component ciphertext."""
    return _HEADER.size + 1 + 2 * params.n * len(params.q_primes) * 8


def ciphertext_information_bytes(params: RingParams) -> float:
    """``2 n sum(log2 q_i) / 8``: the entropy of a uniform two-component ciphertext."""
    return 2 * params.n * sum(math.log2(p) for p in params.q_primes) / 8
