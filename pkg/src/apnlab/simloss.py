"""Similarity measures and contrastive losses.

Two layers live here.  The vector-level functions (:func:`nce_amdim`,
:func:`info_nce`, :func:`nt_xent`) follow their defining formulas directly
and serve as references.  :func:`batch_loss` evaluates any loss kind on a
:class:`~apnlab.extraction.RepresentationBatch` through per-shard log-sum-exp
partials, which is what training uses.

All three losses are ``mean_i(lse(denominator_i) - lse(numerator_i))`` with
scores ``s = Phi(r_a, r) / tau``:

=========  ====================================  =============================
kind       numerator                             denominator
=========  ====================================  =============================
nce_amdim  positives                             negatives (+ positives if flag)
info_nce   positive                              positive + negatives
nt_xent    partner view                          every row except self
=========  ====================================  =============================
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .extraction import RepresentationBatch
from .tensor import Tensor

LOSS_KINDS = ("nce_amdim", "info_nce", "nt_xent")
SIMILARITY_KINDS = ("dot", "bilinear", "cosine")


class LossError(ValueError):
    pass


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _count(vectors) -> int:
    if isinstance(vectors, np.ndarray):
        vectors = Tensor(vectors)
    if isinstance(vectors, Tensor):
        return vectors.shape[0] if vectors.ndim == 2 else 1
    return len(vectors)


def _rows(vectors) -> Tensor:
    if isinstance(vectors, np.ndarray):
        vectors = Tensor(vectors)
    if isinstance(vectors, Tensor):
        return vectors if vectors.ndim == 2 else vectors.reshape(1, -1)
    vectors = list(vectors)
    if not vectors:
        raise LossError("empty set of representations")
    return T.stack([_as_tensor(v) for v in vectors], axis=0)


@dataclass
class Similarity:
    kind: str = "dot"
    W: Tensor | None = None

    def __post_init__(self):
        if self.kind not in SIMILARITY_KINDS:
            raise LossError(f"similarity kind must be one of {SIMILARITY_KINDS}, got {self.kind!r}")
        if self.kind == "bilinear":
            if self.W is None or self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1]:
                raise LossError("bilinear similarity needs a square matrix W")

    def matrix(self, A: Tensor, B: Tensor) -> Tensor:
        """Scores between every row of ``A`` (n, c) and every row of ``B`` (m, c)."""
        if A.shape[-1] != B.shape[-1]:
            raise T.ShapeError(f"similarity: dimension mismatch {A.shape} vs {B.shape}")
        if self.kind == "dot":
            return A @ B.T
        if self.kind == "bilinear":
            return A @ self.W @ B.T
        for name, X in (("first", A), ("second", B)):
            if np.any(np.all(X.data == 0, axis=-1)):
                raise LossError(f"cosine similarity with a zero vector in the {name} argument")
        return T.l2_normalize(A, axis=-1) @ T.l2_normalize(B, axis=-1).T

    def __call__(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        if a.ndim != 1 or b.ndim != 1:
            raise T.ShapeError(f"similarity expects vectors, got {a.shape} and {b.shape}")
        return self.matrix(a.reshape(1, -1), b.reshape(1, -1)).reshape(())


def similarity(sim: Similarity, a, b) -> Tensor:
    return sim(a, b)


DOT = Similarity("dot")


@dataclass
class LossConfig:
    kind: str = "info_nce"
    temperature: float = 1.0
    include_positive_in_denominator: bool | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise LossError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not self.temperature > 0:
            raise LossError(f"temperature must be > 0, got {self.temperature}")
        if self.include_positive_in_denominator is None:
            self.include_positive_in_denominator = self.kind == "info_nce"


# ---------------------------------------------------------------------------
# vector-level reference losses
# ---------------------------------------------------------------------------


def nce_amdim(r_a, R_pos, R_neg, sim: Similarity = DOT, include_positive_in_denominator: bool = False) -> Tensor:
    """``-log(sum_pos exp s / sum_neg exp s)`` for one anchor."""
    r_a = _as_tensor(r_a).reshape(1, -1)
    P = _rows(R_pos)
    if _count(R_neg) == 0:
        raise LossError("nce_amdim needs at least one negative")
    N = _rows(R_neg)
    sp = sim.matrix(r_a, P).reshape(-1)
    sn = sim.matrix(r_a, N).reshape(-1)
    num = T.logsumexp(sp, axis=0)
    den_scores = T.concatenate([sp, sn]) if include_positive_in_denominator else sn
    return T.logsumexp(den_scores, axis=0) - num


def info_nce(r_a, r_pos, R_neg, sim: Similarity = DOT) -> Tensor:
    """Cross-entropy of the positive against ``[positive; negatives]``."""
    if _count(R_neg) == 0:
        raise LossError("info_nce needs at least one negative")
    r_a = _as_tensor(r_a).reshape(1, -1)
    logits = sim.matrix(r_a, T.concatenate([_rows(r_pos), _rows(R_neg)], axis=0)).reshape(-1)
    return -T.log_softmax(logits, axis=0)[0]


def nt_xent(Z1, Z2, tau: float) -> Tensor:
    """SimCLR loss over two batches of unit vectors.

    ``out = [Z1; Z2]``; ``neg_i`` sums ``exp(out_i . out_j / tau)`` over all
    ``j != i`` (the partner included); ``pos_i = exp(z1_i . z2_i / tau)``
    for both halves; the loss is ``mean(-log(pos / neg))``.
    """
    if not tau > 0:
        raise LossError(f"temperature must be > 0, got {tau}")
    Z1, Z2 = _as_tensor(Z1), _as_tensor(Z2)
    if Z1.shape != Z2.shape or Z1.ndim != 2 or Z1.shape[0] < 1:
        raise T.ShapeError(f"nt_xent needs two (n, c) batches of equal shape, got {Z1.shape} and {Z2.shape}")
    n = Z1.shape[0]
    out = T.concatenate([Z1, Z2], axis=0)
    cov = (out @ out.T) * (1.0 / tau)
    mask = ~np.eye(2 * n, dtype=bool)
    log_neg = T.logsumexp(cov, axis=1, mask=mask)
    pos = (Z1 * Z2).sum(axis=1) * (1.0 / tau)
    log_pos = T.concatenate([pos, pos], axis=0)
    return (log_neg - log_pos).mean()


def per_batch_nce(batch: RepresentationBatch, sim: Similarity = DOT, include_positive_in_denominator: bool = False):
    """Mean over anchors of :func:`nce_amdim`, evaluated one anchor at a time."""
    pos_mask, neg_mask = batch.positive_mask(), batch.negative_mask()
    losses = []
    for i in range(batch.anchors.shape[0]):
        losses.append(
            nce_amdim(batch.anchors[i], batch.targets[np.flatnonzero(pos_mask[i])],
                      batch.targets[np.flatnonzero(neg_mask[i])], sim, include_positive_in_denominator)
        )
    return T.stack(losses).mean()


def amdim_total(batches: Sequence[RepresentationBatch], sim: Similarity = DOT,
                include_positive_in_denominator: bool = False) -> Tensor:
    """Average of the per-pair mean NCE losses over the three multiscale comparisons."""
    if len(batches) < 3:
        raise LossError(
            f"the multiscale objective combines three comparisons and needs an encoder with at least "
            f"three feature maps; got {len(batches)} batches"
        )
    terms = [batch_loss(b, LossConfig("nce_amdim", include_positive_in_denominator=include_positive_in_denominator), sim)
             for b in batches]
    return T.stack(terms).mean()


# ---------------------------------------------------------------------------
# sharded log-sum-exp partials
# ---------------------------------------------------------------------------


@dataclass
class ShardedScores:
    """Log-sum-exp partials ``log(total) + shift`` for each anchor row.

    ``shift`` is a constant per row; ``total`` carries the gradient.  Rows
    whose partial is empty have ``total == 0`` and ``shift == -inf``.
    """

    shift: np.ndarray
    total: Tensor
    count: int = 1

    @classmethod
    def from_scores(cls, scores: Tensor, mask: np.ndarray) -> ShardedScores:
        masked = np.where(mask, scores.data, -np.inf)
        shift = masked.max(axis=1) if masked.shape[1] else np.full(masked.shape[0], -np.inf)
        safe = np.where(np.isfinite(shift), shift, 0.0)
        total = T.sumexp(scores, safe[:, None], axis=1, mask=mask)
        return cls(shift=shift, total=total)

    def merge(self, other: ShardedScores) -> ShardedScores:
        shift = np.maximum(self.shift, other.shift)
        return ShardedScores(shift, self._rescaled(shift) + other._rescaled(shift), self.count + other.count)

    def _rescaled(self, shift: np.ndarray) -> Tensor:
        ok = np.isfinite(self.shift)
        factor = np.where(ok, np.exp(np.where(ok, self.shift, 0.0) - np.where(np.isfinite(shift), shift, 0.0)), 0.0)
        if np.all(factor == 1.0):
            return self.total
        return self.total * Tensor(factor.astype(self.total.dtype))

    def logsumexp(self) -> Tensor:
        if not np.all(np.isfinite(self.shift)):
            raise LossError("a log-sum-exp reduction has no entries across all shards")
        return T.log(self.total) + Tensor(self.shift.astype(self.total.dtype))


def merge_partials(parts: Sequence[ShardedScores]) -> ShardedScores:
    """Order-insensitive merge: partials are combined in a canonical order."""
    parts = list(parts)
    if not parts:
        raise LossError("nothing to merge")
    acc = parts[0]
    for p in parts[1:]:
        acc = acc.merge(p)
    return acc


def _masks(batch: RepresentationBatch, cfg: LossConfig, a_idx=None, t_idx=None):
    ak = batch.anchor_keys if a_idx is None else batch.anchor_keys[a_idx]
    tk = batch.target_keys if t_idx is None else batch.target_keys[t_idx]
    same = ak[:, None] == tk[None, :]
    if batch.anchor_ids is not None and batch.target_ids is not None:
        ai = batch.anchor_ids if a_idx is None else batch.anchor_ids[a_idx]
        ti = batch.target_ids if t_idx is None else batch.target_ids[t_idx]
        not_self = ai[:, None] != ti[None, :]
    else:
        not_self = np.ones_like(same)
    num = same & not_self
    if cfg.kind == "nce_amdim" and not cfg.include_positive_in_denominator:
        den = ~same & not_self
    else:
        den = not_self
    return num, den


def _check_anchor_positives(batch: RepresentationBatch, cfg: LossConfig) -> None:
    counts = np.zeros(len(batch.anchor_keys), dtype=np.int64)
    keys, freq = np.unique(batch.target_keys, return_counts=True)
    lookup = dict(zip(keys.tolist(), freq.tolist()))
    counts = np.array([lookup.get(k, 0) for k in batch.anchor_keys.tolist()])
    if batch.anchor_ids is not None and batch.target_ids is not None:
        counts = counts - np.isin(batch.anchor_ids, batch.target_ids)
    if np.any(counts == 0):
        raise LossError("an anchor has no positive target")
    if cfg.kind in ("info_nce", "nt_xent") and np.any(counts != 1):
        raise LossError(f"{cfg.kind} needs exactly one positive per anchor")


def batch_loss(batch: RepresentationBatch, cfg: LossConfig, sim: Similarity = DOT, shards: int = 1,
               shard_sizes: Sequence[int] | None = None) -> Tensor:
    """Mean contrastive loss over the anchors of ``batch``.

    Targets are split by ``target_owner`` into ``shards`` contiguous groups;
    each group contributes log-sum-exp partials which are then merged, so the
    result does not depend on the number of shards.
    """
    _check_anchor_positives(batch, cfg)
    scores = sim.matrix(batch.anchors, batch.targets)
    if cfg.temperature != 1.0:
        scores = scores * (1.0 / cfg.temperature)
    groups = _owner_groups(batch.target_owner, shards, shard_sizes)
    num_parts, den_parts = [], []
    num_mask, den_mask = _masks(batch, cfg)
    for cols in groups:
        block = scores if len(groups) == 1 else scores[:, cols]
        num_parts.append(ShardedScores.from_scores(block, num_mask[:, cols]))
        den_parts.append(ShardedScores.from_scores(block, den_mask[:, cols]))
    num = merge_partials(num_parts).logsumexp()
    den = merge_partials(den_parts).logsumexp()
    return (den - num).mean()


def _owner_groups(owner: np.ndarray, shards: int, shard_sizes=None) -> list[np.ndarray]:
    owners = np.unique(owner)
    if shards < 1:
        raise LossError("shard count must be >= 1")
    if shard_sizes is not None:
        if sum(shard_sizes) != len(owners) or len(shard_sizes) != shards or min(shard_sizes) < 1:
            raise LossError(f"shard sizes {list(shard_sizes)} do not partition {len(owners)} owners into {shards}")
        bounds = np.cumsum(shard_sizes)[:-1]
        owner_sets = np.split(owners, bounds)
    else:
        if shards > len(owners):
            raise LossError(f"cannot split {len(owners)} owners into {shards} shards")
        owner_sets = np.array_split(owners, shards)
    return [np.flatnonzero(np.isin(owner, s)) for s in owner_sets]


def split_batch(batch: RepresentationBatch, shards: int, shard_sizes: Sequence[int] | None = None) -> list[RepresentationBatch]:
    """Partition a batch by owner image into per-shard local batches.

    Anchors travel with the owner of their positive; ids are made global so
    shards can be checked for overlap.
    """
    n, m = len(batch.anchor_keys), len(batch.target_keys)
    a_ids = batch.anchor_ids if batch.anchor_ids is not None else np.arange(n)
    t_ids = batch.target_ids if batch.target_ids is not None else np.arange(m) + n
    # owner of each anchor = owner of its first positive target
    first_pos = {}
    for t, (k, o) in enumerate(zip(batch.target_keys.tolist(), batch.target_owner.tolist())):
        first_pos.setdefault(k, o)
    a_owner = np.array([first_pos[k] for k in batch.anchor_keys.tolist()])
    out = []
    for cols in _owner_groups(batch.target_owner, shards, shard_sizes):
        owners = np.unique(batch.target_owner[cols])
        rows = np.flatnonzero(np.isin(a_owner, owners))
        out.append(RepresentationBatch(
            anchors=batch.anchors[rows], targets=batch.targets[cols],
            anchor_keys=batch.anchor_keys[rows], target_keys=batch.target_keys[cols],
            anchor_ids=a_ids[rows], target_ids=t_ids[cols], target_owner=batch.target_owner[cols],
            labels=None, source=batch.source,
        ))
    return out


def sharded_negatives(local_batches: Sequence[RepresentationBatch], cfg: LossConfig | str,
                      sim: Similarity = DOT) -> Tensor:
    """Loss over the union of per-shard batches, as if one worker held them all.

    Phase 1: every shard scores all anchors against its local targets and
    keeps log-sum-exp partials.  Phase 2: partials are merged per anchor.
    """
    cfg = LossConfig(cfg) if isinstance(cfg, str) else cfg
    local_batches = list(local_batches)
    if not local_batches:
        raise LossError("no shards given")
    seen_a: set[int] = set()
    seen_t: set[int] = set()
    for s, b in enumerate(local_batches):
        if b.anchor_ids is None or b.target_ids is None:
            raise LossError(f"shard {s} lacks global ids; build shards with split_batch")
        a, t = set(b.anchor_ids.tolist()), set(b.target_ids.tolist())
        if a & seen_a or t & seen_t:
            raise LossError(f"shard {s} overlaps an earlier shard")
        seen_a |= a
        seen_t |= t

    losses = []
    counts = []
    for anchor_shard in local_batches:
        num_parts, den_parts = [], []
        for target_shard in local_batches:
            pair = RepresentationBatch(
                anchors=anchor_shard.anchors, targets=target_shard.targets,
                anchor_keys=anchor_shard.anchor_keys, target_keys=target_shard.target_keys,
                anchor_ids=anchor_shard.anchor_ids, target_ids=target_shard.target_ids,
                target_owner=target_shard.target_owner,
            )
            scores = sim.matrix(pair.anchors, pair.targets)
            if cfg.temperature != 1.0:
                scores = scores * (1.0 / cfg.temperature)
            nm, dm = _masks(pair, cfg)
            num_parts.append(ShardedScores.from_scores(scores, nm))
            den_parts.append(ShardedScores.from_scores(scores, dm))
        if anchor_shard.anchors.shape[0] == 0:
            continue
        per_anchor = merge_partials(den_parts).logsumexp() - merge_partials(num_parts).logsumexp()
        losses.append(per_anchor.sum())
        counts.append(anchor_shard.anchors.shape[0])
    return T.stack(losses).sum() * (1.0 / sum(counts))
