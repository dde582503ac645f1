"""Score inversion: what an adversary holding the plaintext gallery learns from scores.

Given gallery columns ``P`` (d, m) and the scores ``r = P^T q`` of an unknown
unit feature ``q``, the ridge estimate ``(P P^T + λI)^{-1} P r`` recovers ``q``
once ``m`` reaches ``d``.  Under HERS the server only ever holds ciphertexts,
so this computation has no plaintext ``P`` to work with.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ring import make_rng


class GalleryUnavailableError(TypeError):
    """The gallery argument is not a plaintext matrix (for example an encrypted gallery)."""


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, rank: int, dim: int):
        super().__init__(f"P P^T is singular: rank {rank} < dimension {dim}; use a positive ridge term")
        self.rank = rank
        self.dim = dim


@dataclass(frozen=True)
class InversionResult:
    q_hat: np.ndarray          # unit-norm estimate
    raw: np.ndarray            # ridge solution before normalization
    condition: float           # condition number of P P^T + λI
    rank: int                  # numerical rank of P
    residual: float            # ||r - P^T raw||_2


def _as_gallery(P) -> np.ndarray:
    if isinstance(P, (bytes, bytearray, memoryview)):
        raise GalleryUnavailableError("gallery unavailable in plaintext")
    A = np.asarray(P)
    if not np.issubdtype(A.dtype, np.number):
        raise GalleryUnavailableError("gallery unavailable in plaintext")
    if A.ndim != 2 or A.shape[1] < 1:
        raise ValueError("gallery must be a (d, m) matrix with m >= 1")
    return A.astype(np.float64)


def solve_inversion(P, r, lam: float = 1e-6) -> InversionResult:
    """Ridge recovery of ``q`` from ``r = P^T q`` via the SVD of ``P``.

    Raises
    ------
    GalleryUnavailableError
        ``P`` is not a plaintext numeric matrix.
    RankDeficientError
        ``lam == 0`` and ``P`` has rank below ``d``.
    """
    A = _as_gallery(P)
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    d, m = A.shape
    if r.shape[0] != m:
        raise ValueError(f"expected {m} scores, got {r.shape[0]}")
    if lam < 0:
        raise ValueError("ridge term must be non-negative")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    tol = s.max(initial=0.0) * max(d, m) * np.finfo(float).eps
    rank = int((s > tol).sum())
    if lam == 0 and rank < d:
        raise RankDeficientError(rank, d)
    eig = np.zeros(d)
    eig[:len(s)] = s * s
    cond = float((eig.max() + lam) / (eig.min() + lam)) if eig.min() + lam > 0 else float("inf")
    keep = s > tol
    coef = np.zeros_like(s)
    coef[keep] = s[keep] / (s[keep] ** 2 + lam)
    raw = U @ (coef * (Vt @ r))
    norm = np.linalg.norm(raw)
    if norm == 0:
        raise ValueError("scores carry no information about q (zero solution)")
    return InversionResult(raw / norm, raw, cond, rank, float(np.linalg.norm(r - A.T @ raw)))


def invert_scores(P, r, lam: float = 1e-6) -> np.ndarray:
    """Unit-norm estimate of the query feature behind scores ``r``."""
    return solve_inversion(P, r, lam).q_hat


def cosine(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def random_unit(shape, rng) -> np.ndarray:
    X = rng.standard_normal(shape)
    return X / np.linalg.norm(X, axis=0, keepdims=True)


def recovery_curve(d: int, ratios, trials: int = 20, lam: float = 1e-6, rng=None) -> list:
    """Monte-Carlo recovery cosine for random unit galleries of ``m = round(ratio * d)`` columns.

    Returns rows ``(ratio, m, mean_cosine, std_cosine)``.
    """
    rng = make_rng() if rng is None else rng
    rows = []
    for ratio in ratios:
        m = max(1, int(round(ratio * d)))
        cos = []
        for _ in range(trials):
            P = random_unit((d, m), rng)
            q = random_unit((d,), rng)
            cos.append(cosine(invert_scores(P, P.T @ q, lam), q))
        rows.append((float(ratio), m, float(np.mean(cos)), float(np.std(cos))))
    return rows
