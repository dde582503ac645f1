"""Distance-preserving dimensionality reduction (DeepMDS++) in numpy.

The network is a stack of block units; block ``i`` maps ``I_i -> O_i`` through
``FC(I_i, I_i) + ReLU`` followed by ``FC(I_i, O_i)`` without activation.
Outputs are L2-normalized, so distances live on the unit sphere just like the
ambient features.

Training minimizes

    L = (1/b1) ||D_G - D̂_G||^2 + (1/b2) ||D_I - D̂_I||^2 + λ_c ||C - diag(C)||_F^2

where ``D`` are Euclidean distances between the two members of each genuine
(``G``) or impostor (``I``) pair, ``D̂`` the same distances after mapping, and
``C`` the covariance of all mapped vectors in the batch.  Gradients are
computed by hand and checked against finite differences in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .ring import make_rng

DIST_EPS = 1e-12


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class Block:
    W1: np.ndarray  # (I, I)
    b1: np.ndarray  # (I,)
    W2: np.ndarray  # (I, O)
    b2: np.ndarray  # (O,)

    @property
    def dims(self):
        return self.W2.shape

    def tensors(self):
        return [self.W1, self.b1, self.W2, self.b2]


@dataclass
class MlpParams:
    blocks: list = field(default_factory=list)

    @property
    def ladder(self) -> list:
        if not self.blocks:
            return []
        return [self.blocks[0].W1.shape[0]] + [b.W2.shape[1] for b in self.blocks]

    @property
    def in_dim(self):
        return self.blocks[0].W1.shape[0] if self.blocks else None

    @property
    def out_dim(self):
        return self.blocks[-1].W2.shape[1] if self.blocks else None

    def tensors(self) -> list:
        return [t for b in self.blocks for t in b.tensors()]

    def copy(self) -> "MlpParams":
        return MlpParams([Block(*(t.copy() for t in b.tensors())) for b in self.blocks])

    def check(self):
        for i, b in enumerate(self.blocks):
            I, O = b.W2.shape
            if b.W1.shape != (I, I) or b.b1.shape != (I,) or b.b2.shape != (O,):
                raise ValueError(f"block {i} has inconsistent shapes")
            if i and self.blocks[i - 1].W2.shape[1] != I:
                raise ValueError(f"block {i} input {I} does not chain from previous output")


def halving_ladder(d_in: int, d_out: int) -> list:
    """``[d_in, d_in/2, ..., d_out]``; the last step may be less than a halving."""
    ladder = [d_in]
    while ladder[-1] > d_out:
        ladder.append(max(d_out, ladder[-1] // 2))
    return ladder


def init_params(ladder, rng=None) -> MlpParams:
    """He-normal weights, zero biases."""
    rng = make_rng() if rng is None else rng
    blocks = []
    for I, O in zip(ladder[:-1], ladder[1:]):
        blocks.append(Block(
            rng.standard_normal((I, I)) * np.sqrt(2.0 / I),
            np.zeros(I),
            rng.standard_normal((I, O)) * np.sqrt(1.0 / I),
            np.zeros(O),
        ))
    return MlpParams(blocks)


def identity_block(d: int) -> Block:
    return Block(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d))


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def forward_raw(X, params: MlpParams, cache: list | None = None) -> np.ndarray:
    """Unnormalized network output; ``cache`` collects activations for backprop."""
    H = np.asarray(X, dtype=np.float64)
    if params.blocks and H.shape[-1] != params.in_dim:
        raise ValueError(f"input dimension {H.shape[-1]} does not match network input {params.in_dim}")
    for b in params.blocks:
        A = H @ b.W1 + b.b1
        R = np.maximum(A, 0.0)
        out = R @ b.W2 + b.b2
        if cache is not None:
            cache.append((H, A, R))
        H = out
    return H


def _normalize(Z):
    r = np.maximum(np.linalg.norm(Z, axis=-1, keepdims=True), 1e-12)
    return Z / r, r


def forward(X, params: MlpParams) -> np.ndarray:
    """Mapped features, L2-normalized per row."""
    return _normalize(forward_raw(X, params))[0]


compress = forward


def _backward(params: MlpParams, cache: list, dOut: np.ndarray) -> list:
    grads = []
    dH = dOut
    for b, (H, A, R) in zip(reversed(params.blocks), reversed(cache)):
        gW2 = R.T @ dH
        gb2 = dH.sum(axis=0)
        dR = dH @ b.W2.T
        dA = dR * (A > 0)
        gW1 = H.T @ dA
        gb1 = dA.sum(axis=0)
        dH = dA @ b.W1.T
        grads.append([gW1, gb1, gW2, gb2])
    return [g for block in reversed(grads) for g in block]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def pair_distances(A, B) -> np.ndarray:
    diff = np.asarray(A) - np.asarray(B)
    return np.sqrt((diff * diff).sum(axis=-1) + DIST_EPS)


def loss_distance(D_G, Dh_G, D_I, Dh_I) -> float:
    """Mean squared preservation error per pair type; an empty pair type contributes nothing."""
    total = 0.0
    D_G, Dh_G, D_I, Dh_I = (np.asarray(v, dtype=np.float64) for v in (D_G, Dh_G, D_I, Dh_I))
    if D_G.shape != Dh_G.shape or D_I.shape != Dh_I.shape:
        raise ValueError("distance arrays must pair up")
    if D_G.size:
        total += float(((D_G - Dh_G) ** 2).sum()) / D_G.size
    if D_I.size:
        total += float(((D_I - Dh_I) ** 2).sum()) / D_I.size
    return total


def covariance(F) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.shape[0] < 2:
        raise ValueError("covariance needs at least two rows")
    Fc = F - F.mean(axis=0)
    return Fc.T @ Fc / (F.shape[0] - 1)


def loss_covariance(F) -> float:
    C = covariance(F)
    off = C - np.diag(np.diag(C))
    return float((off * off).sum())


def mine_hard_pairs(D, D_hat, count: int, mode: str = "signed") -> np.ndarray:
    """Indices of the ``count`` largest preservation errors, ties to the lower index.

    ``mode="signed"`` ranks ``D - D̂`` (pairs pulled closer than they should be);
    ``"absolute"`` ranks ``|D - D̂|``.
    """
    err = np.asarray(D, dtype=np.float64) - np.asarray(D_hat, dtype=np.float64)
    if mode == "absolute":
        err = np.abs(err)
    elif mode != "signed":
        raise ValueError(f"unknown mining mode {mode!r}")
    if count > err.size:
        raise ValueError(f"cannot mine {count} pairs from {err.size}")
    return np.argsort(-err, kind="stable")[:count]


@dataclass
class PairBatch:
    """Genuine pairs ``(Ga[i], Gb[i])`` and impostor pairs ``(Ia[i], Ib[i])`` in ambient space."""

    Ga: np.ndarray
    Gb: np.ndarray
    Ia: np.ndarray
    Ib: np.ndarray

    @property
    def b1(self):
        return len(self.Ga)

    @property
    def b2(self):
        return len(self.Ia)

    @property
    def D_G(self):
        return pair_distances(self.Ga, self.Gb)

    @property
    def D_I(self):
        return pair_distances(self.Ia, self.Ib)


def loss_and_grad(params: MlpParams, batch: PairBatch, lambda_c: float = 1.0, want_grad: bool = True):
    """Total loss, its two components, and gradients for every parameter tensor."""
    b1, b2 = batch.b1, batch.b2
    X = np.concatenate([batch.Ga, batch.Gb, batch.Ia, batch.Ib])
    cache = [] if want_grad else None
    Z = forward_raw(X, params, cache)
    Y, r = _normalize(Z)
    Ga, Gb = Y[:b1], Y[b1:2 * b1]
    Ia, Ib = Y[2 * b1:2 * b1 + b2], Y[2 * b1 + b2:]
    DG, DI = batch.D_G, batch.D_I
    DhG, DhI = pair_distances(Ga, Gb), pair_distances(Ia, Ib)
    LD = loss_distance(DG, DhG, DI, DhI)
    C = covariance(Y)
    off = C - np.diag(np.diag(C))
    Lc = float((off * off).sum())
    total = LD + lambda_c * Lc
    if not want_grad:
        return total, LD, Lc, None

    dY = np.zeros_like(Y)
    for lo, a, bb, D, Dh, cnt in ((0, Ga, Gb, DG, DhG, b1), (2 * b1, Ia, Ib, DI, DhI, b2)):
        if cnt == 0:
            continue
        g = (-2.0 / cnt) * (D - Dh) / Dh  # dL/dD̂ * dD̂/d(diff) scale
        dd = g[:, None] * (a - bb)
        dY[lo:lo + cnt] += dd
        dY[lo + cnt:lo + 2 * cnt] -= dd
    if lambda_c:
        Fc = Y - Y.mean(axis=0)
        dY += lambda_c * (4.0 / (Y.shape[0] - 1)) * (Fc @ off)
    # through row normalization
    dZ = (dY - Y * (Y * dY).sum(axis=1, keepdims=True)) / r
    return total, LD, Lc, _backward(params, cache, dZ)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainerConfig:
    lr: float = 3e-4
    weight_decay: float = 4e-5
    epochs: int = 250
    batch_size: int = 4000  # candidate pool per pair type for hard mining
    hard_start: int = 50
    hard_end: int = 250
    random_genuine: int = 200
    random_impostor: int = 200
    lambda_c: float = 1.0
    hard_mining: bool = True
    mining_mode: str = "absolute"
    steps_per_epoch: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def hard_count(self, epoch: int) -> int:
        """Linear ramp from ``hard_start`` to ``hard_end``, rounded to the nearest pair."""
        if not self.hard_mining:
            return 0
        if self.epochs <= 1:
            return self.hard_start
        frac = epoch / (self.epochs - 1)
        return int(np.floor(self.hard_start + (self.hard_end - self.hard_start) * frac + 0.5))

    def validate(self):
        counts = (self.hard_start, self.hard_end, self.random_genuine, self.random_impostor)
        if min(counts) < 0:
            raise ValueError("pair counts must be non-negative")
        if self.hard_mining and max(self.hard_start, self.hard_end) > self.batch_size:
            raise ValueError("hard pair count exceeds the candidate pool")
        if self.lr <= 0 or self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("invalid optimizer settings")


def ablation_config(variant: str, base: TrainerConfig | None = None) -> TrainerConfig:
    """``full`` (mining + covariance), ``no_mining``, or ``baseline`` (neither).

    Variants without mining fill the batch with random pairs so every arm sees
    the same number of pairs per step.
    """
    base = base or TrainerConfig()
    if variant == "full":
        return base
    extra = (base.hard_start + base.hard_end) // 2
    no_mine = replace(base, hard_mining=False, random_genuine=base.random_genuine + extra,
                      random_impostor=base.random_impostor + extra)
    if variant == "no_mining":
        return no_mine
    if variant == "baseline":
        return replace(no_mine, lambda_c=0.0)
    raise ValueError(f"unknown ablation variant {variant!r}")


class PairSampler:
    """Draws genuine (same label) and impostor (different label) index pairs."""

    def __init__(self, labels, rng):
        self.labels = np.asarray(labels)
        self.rng = rng
        self.by_class = {}
        for i, lab in enumerate(self.labels):
            self.by_class.setdefault(lab, []).append(i)
        self.multi = [np.array(v) for v in self.by_class.values() if len(v) > 1]
        if not self.multi:
            raise ValueError("need at least one class with two samples for genuine pairs")
        if len(self.by_class) < 2:
            raise ValueError("need at least two classes for impostor pairs")

    def genuine(self, count: int):
        cls = self.rng.integers(0, len(self.multi), count)
        a = np.empty(count, np.int64)
        b = np.empty(count, np.int64)
        for j, c in enumerate(cls):
            members = self.multi[c]
            i, k = self.rng.choice(len(members), 2, replace=False)
            a[j], b[j] = members[i], members[k]
        return a, b

    def impostor(self, count: int):
        m = len(self.labels)
        a = self.rng.integers(0, m, count)
        b = self.rng.integers(0, m, count)
        bad = self.labels[a] == self.labels[b]
        while bad.any():
            b[bad] = self.rng.integers(0, m, int(bad.sum()))
            bad = self.labels[a] == self.labels[b]
        return a, b


@dataclass
class TrainResult:
    params: MlpParams
    loss_trace: list  # (epoch, total, L_D, L_c) per epoch, measured on the epoch's last batch
    initial_loss_d: float
    final_loss_d: float


def _mapped_distance(params, X, a, b):
    Y = forward(X, params)
    return pair_distances(Y[a], Y[b])


def train(X, labels, ladder, config: TrainerConfig | None = None, rng=None, init: MlpParams | None = None,
          eval_pairs: int = 1000) -> TrainResult:
    """AdamW on ``L_D + λ_c L_c`` with scheduled hard-pair mining.

    Each epoch draws a candidate pool of ``batch_size`` genuine and impostor
    pairs, mines the scheduled number of hardest ones against the current
    parameters, and runs ``steps_per_epoch`` updates on batches made of those
    hard pairs plus fresh random pairs.
    """
    config = config or TrainerConfig()
    config.validate()
    rng = make_rng() if rng is None else rng
    X = np.asarray(X, dtype=np.float64)
    params = init.copy() if init is not None else init_params(ladder, rng)
    sampler = PairSampler(labels, rng)
    m1 = [np.zeros_like(t) for t in params.tensors()]
    m2 = [np.zeros_like(t) for t in params.tensors()]

    eg, ei = sampler.genuine(eval_pairs), sampler.impostor(eval_pairs)

    def eval_ld():
        return loss_distance(pair_distances(X[eg[0]], X[eg[1]]), _mapped_distance(params, X, *eg),
                             pair_distances(X[ei[0]], X[ei[1]]), _mapped_distance(params, X, *ei))

    initial = eval_ld()
    trace = []
    step = 0
    for epoch in range(config.epochs):
        hard = config.hard_count(epoch)
        hg = hi = (np.zeros(0, np.int64), np.zeros(0, np.int64))
        if hard:
            pg, pi = sampler.genuine(config.batch_size), sampler.impostor(config.batch_size)
            sel_g = mine_hard_pairs(pair_distances(X[pg[0]], X[pg[1]]), _mapped_distance(params, X, *pg), hard,
                                    config.mining_mode)
            sel_i = mine_hard_pairs(pair_distances(X[pi[0]], X[pi[1]]), _mapped_distance(params, X, *pi), hard,
                                    config.mining_mode)
            hg = (pg[0][sel_g], pg[1][sel_g])
            hi = (pi[0][sel_i], pi[1][sel_i])
        for _ in range(config.steps_per_epoch):
            rg, ri = sampler.genuine(config.random_genuine), sampler.impostor(config.random_impostor)
            ga, gb = np.concatenate([hg[0], rg[0]]), np.concatenate([hg[1], rg[1]])
            ia, ib = np.concatenate([hi[0], ri[0]]), np.concatenate([hi[1], ri[1]])
            batch = PairBatch(X[ga], X[gb], X[ia], X[ib])
            total, LD, Lc, grads = loss_and_grad(params, batch, config.lambda_c)
            if not np.isfinite(total):
                raise TrainingError(f"non-finite loss at epoch {epoch} (L_D={LD}, L_c={Lc})")
            step += 1
            c1 = 1 - config.beta1 ** step
            c2 = 1 - config.beta2 ** step
            for t, g, a, v in zip(params.tensors(), grads, m1, m2):
                a *= config.beta1
                a += (1 - config.beta1) * g
                v *= config.beta2
                v += (1 - config.beta2) * g * g
                t -= config.lr * ((a / c1) / (np.sqrt(v / c2) + config.adam_eps) + config.weight_decay * t)
        trace.append((epoch, total, LD, Lc))
    return TrainResult(params, trace, initial, eval_ld())


# ---------------------------------------------------------------------------
# evaluation and data
# ---------------------------------------------------------------------------

def precision_at_k(queries, q_labels, gallery, g_labels, k: int = 10, exclude_self: bool = False) -> float:
    """Mean fraction of same-label items among each query's ``k`` nearest (cosine) gallery items."""
    S = np.asarray(queries) @ np.asarray(gallery).T
    if exclude_self:
        np.fill_diagonal(S, -np.inf)
    top = np.argsort(-S, axis=1, kind="stable")[:, :k]
    hits = np.asarray(g_labels)[top] == np.asarray(q_labels)[:, None]
    return float(hits.mean())


def rank1_accuracy(queries, q_labels, gallery, g_labels, exclude_self: bool = False) -> float:
    return precision_at_k(queries, q_labels, gallery, g_labels, 1, exclude_self)


def make_clustered(n_classes: int, per_class: int, dim: int, spread: float = 0.3, center_spread: float = 1.0,
                   intrinsic: int | None = None, rng=None):
    """Gaussian clusters projected to the unit sphere.

    Class centres are ``center_spread``-scaled normals, optionally confined to a
    random ``intrinsic``-dimensional subspace; samples add isotropic noise of
    scale ``spread / sqrt(dim)`` per coordinate before normalization.
    Returns ``(X, labels)``.
    """
    rng = make_rng() if rng is None else rng
    if intrinsic is None or intrinsic >= dim:
        centres = rng.standard_normal((n_classes, dim))
    else:
        basis = np.linalg.qr(rng.standard_normal((dim, intrinsic)))[0]
        centres = rng.standard_normal((n_classes, intrinsic)) @ basis.T
    centres = center_spread * centres / np.linalg.norm(centres, axis=1, keepdims=True)
    labels = np.repeat(np.arange(n_classes), per_class)
    X = centres[labels] + rng.standard_normal((len(labels), dim)) * spread / np.sqrt(dim)
    return X / np.linalg.norm(X, axis=1, keepdims=True), labels


# ---------------------------------------------------------------------------
# params file
# ---------------------------------------------------------------------------

PARAMS_MAGIC = b"HMDS"
PARAMS_VERSION = 1


def params_to_bytes(params: MlpParams) -> bytes:
    """``HMDS | u16 version | u32 blocks | u32 ladder[blocks+1] | f64 W1 b1 W2 b2 per block``."""
    params.check()
    ladder = params.ladder
    out = [struct.pack("<4sHI", PARAMS_MAGIC, PARAMS_VERSION, len(params.blocks)),
           struct.pack(f"<{len(ladder)}I", *ladder)]
    for t in params.tensors():
        out.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(out)


def params_from_bytes(blob: bytes) -> MlpParams:
    head = struct.calcsize("<4sHI")
    if len(blob) < head:
        raise ValueError("params blob shorter than header")
    magic, version, nblocks = struct.unpack_from("<4sHI", blob)
    if magic != PARAMS_MAGIC or version != PARAMS_VERSION:
        raise ValueError("not a compressor params file")
    ladder = struct.unpack_from(f"<{nblocks + 1}I", blob, head)
    off = head + 4 * (nblocks + 1)
    blocks = []

    def take(shape):
        nonlocal off
        size = int(np.prod(shape))
        if off + 8 * size > len(blob):
            raise ValueError("params blob truncated")
        arr = np.frombuffer(blob, "<f8", size, off).astype(np.float64).reshape(shape)
        off += 8 * size
        return arr

    for I, O in zip(ladder[:-1], ladder[1:]):
        blocks.append(Block(take((I, I)), take((I,)), take((I, O)), take((O,))))
    if off != len(blob):
        raise ValueError("trailing bytes in params blob")
    p = MlpParams(blocks)
    p.check()
    return p


def save_params(path, params: MlpParams):
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> MlpParams:
    return params_from_bytes(Path(path).read_bytes())
