"""Representation extraction: which encoder outputs become anchors, positives and negatives.

Every strategy emits :class:`RepresentationBatch` objects.  A batch is a set of
anchor vectors scored against a set of target vectors; integer keys decide
which targets are positives for which anchors (equal key) and ids mark
self-pairs that must be ignored entirely.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import rng
from . import tensor as T
from .encoder import FeatureMapSet
from .layers import Linear, Module
from .tensor import Tensor


class ExtractionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# comparison specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonSpec:
    """Pairs ``(j, k)``: anchors from layer ``j`` of view a, targets from layer ``k``."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((int(j), int(k)) for j, k in self.pairs))
        if not self.pairs:
            raise ExtractionError("comparison spec is empty")
        for j, k in self.pairs:
            if j >= 0 or k >= 0:
                raise ExtractionError(f"comparison indices must be negative layer offsets, got ({j}, {k})")

    def validate(self, depth: int) -> None:
        for j, k in self.pairs:
            if j < -depth or k < -depth:
                raise ExtractionError(
                    f"comparison ({j}:{k}) reaches deeper than the encoder's {depth} feature maps"
                )

    def to_text(self) -> str:
        return ",".join(f"{j}:{k}" for j, k in self.pairs)


NAMED_SPECS = {
    "last_only": ((-1, -1),),
    "amdim": ((-1, -2), (-1, -3), (-2, -2)),
    "same_level": ((-1, -1), (-2, -2), (-3, -3)),
}

_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<pair>-?\d+\s*:\s*-?\d+)"
    r"|(?P<random>last_random)(?:\(\s*seed\s*=\s*(?P<seed>\d+)\s*\))?"
    r"|(?P<name>[a-z_]+)"
    r"|(?P<legacy>\d\d)"
    r")\s*"
)
_SEP = re.compile(r"[,+]\s*")


def parse_comparison_spec(text: str, depth: int = 3, seed: int = 0) -> ComparisonSpec:
    """Parse ``"j:k,j:k"`` or a strategy keyword.

    Keywords: ``last_only``, ``amdim``, ``same_level`` and
    ``last_random`` / ``last_random(seed=N)`` which pairs the last map with
    a uniformly drawn layer in ``[-depth, -1]``.  Two-digit tokens such as
    ``"01, 02, 11"`` index maps deepest-first (``0`` is layer ``-1``).
    """
    pairs: list[tuple[int, int]] = []
    pos = 0
    text = text.strip()
    if not text:
        raise ExtractionError("parse error at position 0: empty comparison spec")
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ExtractionError(f"parse error at position {pos}: {text[pos:]!r}")
        if m.group("pair"):
            j, k = (int(s) for s in m.group("pair").split(":"))
            if j >= 0 or k >= 0:
                raise ExtractionError(f"parse error at position {pos}: indices must be negative")
            pairs.append((j, k))
        elif m.group("random"):
            s = int(m.group("seed")) if m.group("seed") else seed
            k = -int(rng.stream(s, "last_random").integers(1, depth + 1))
            pairs.append((-1, k))
        elif m.group("name"):
            name = m.group("name")
            if name not in NAMED_SPECS:
                raise ExtractionError(f"parse error at position {pos}: unknown strategy {name!r}")
            pairs.extend(NAMED_SPECS[name])
        else:
            a, b = m.group("legacy")
            pairs.append((-(int(a) + 1), -(int(b) + 1)))
        pos = m.end()
        if pos < len(text):
            sep = _SEP.match(text, pos)
            if not sep:
                raise ExtractionError(f"parse error at position {pos}: expected ',' or '+', got {text[pos:]!r}")
            pos = sep.end()
            if pos >= len(text):
                raise ExtractionError(f"parse error at position {pos}: trailing separator")
    return ComparisonSpec(tuple(pairs))


# ---------------------------------------------------------------------------
# representation batches
# ---------------------------------------------------------------------------


@dataclass
class RepresentationBatch:
    anchors: Tensor                 # (n, c)
    targets: Tensor                 # (m, c)
    anchor_keys: np.ndarray         # target t is a positive for anchor i iff keys match
    target_keys: np.ndarray
    anchor_ids: np.ndarray | None = None   # equal ids mark a self-pair, excluded everywhere
    target_ids: np.ndarray | None = None
    target_owner: np.ndarray | None = None  # source image of each target; sharding unit
    labels: np.ndarray | None = None        # index of the unique positive, when there is one
    source: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.anchor_keys = np.asarray(self.anchor_keys, dtype=np.int64)
        self.target_keys = np.asarray(self.target_keys, dtype=np.int64)
        n, m = self.anchors.shape[0], self.targets.shape[0]
        if self.anchors.ndim != 2 or self.targets.ndim != 2 or self.anchors.shape[1] != self.targets.shape[1]:
            raise T.ShapeError(
                f"anchors {self.anchors.shape} and targets {self.targets.shape} must be (n, c) and (m, c)"
            )
        if self.anchor_keys.shape != (n,) or self.target_keys.shape != (m,):
            raise T.ShapeError("one key per anchor and per target is required")
        if self.target_owner is None:
            self.target_owner = self.target_keys.copy()
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,) or np.any(self.labels < 0) or np.any(self.labels >= m):
                raise ExtractionError(f"labels out of range [0, {m})")

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]

    def self_mask(self) -> np.ndarray:
        if self.anchor_ids is None or self.target_ids is None:
            return np.zeros((len(self.anchor_keys), len(self.target_keys)), dtype=bool)
        return self.anchor_ids[:, None] == self.target_ids[None, :]

    def positive_mask(self) -> np.ndarray:
        return (self.anchor_keys[:, None] == self.target_keys[None, :]) & ~self.self_mask()

    def negative_mask(self) -> np.ndarray:
        return (self.anchor_keys[:, None] != self.target_keys[None, :]) & ~self.self_mask()

    def positives(self, i: int) -> Tensor:
        return self.targets[np.flatnonzero(self.positive_mask()[i])]

    def negatives(self, i: int) -> Tensor:
        return self.targets[np.flatnonzero(self.negative_mask()[i])]


def _cells(m: Tensor) -> Tensor:
    """(c, h, w) -> (h*w, c) row-major over the grid."""
    c = m.shape[0]
    return m.reshape(c, -1).permute(1, 0)


def _batched_cells(m: Tensor) -> Tensor:
    """(b, c, h, w) -> (b*h*w, c)."""
    b, c = m.shape[:2]
    return m.permute(0, 2, 3, 1).reshape(-1, c)


def extract_amdim(Ma: FeatureMapSet, Mb: FeatureMapSet, neg_maps: list[FeatureMapSet], spec: ComparisonSpec,
                  *, sample_anchor: bool = False, seed: int = 0) -> list[RepresentationBatch]:
    """Multiscale triplets for one image.

    For each ``(j, k)``: anchors are the grid cells of ``Ma[j]`` (all of them,
    or one drawn at random with ``sample_anchor``), positives every cell of
    ``Mb[k]``, negatives every cell of ``neg[k]`` for each negative image.
    """
    spec.validate(len(Ma))
    if not neg_maps:
        raise ExtractionError("extract_amdim needs at least one negative image")
    out = []
    for j, k in spec.pairs:
        anchors = _cells(Ma[j])
        if sample_anchor:
            idx = int(rng.stream(seed, "amdim_anchor", j, k).integers(anchors.shape[0]))
            anchors = anchors[idx : idx + 1]
        pos = _cells(Mb[k])
        negs = [_cells(nm[k]) for nm in neg_maps]
        if anchors.shape[1] != pos.shape[1]:
            raise T.ShapeError(
                f"layers {j} and {k} have different widths {anchors.shape[1]} and {pos.shape[1]}; "
                "set embed_dim on the encoder"
            )
        targets = T.concatenate([pos] + negs, axis=0)
        keys = np.concatenate([np.zeros(pos.shape[0], np.int64)]
                              + [np.full(n.shape[0], i + 1, np.int64) for i, n in enumerate(negs)])
        out.append(RepresentationBatch(anchors, targets, np.zeros(anchors.shape[0], np.int64), keys,
                                       source=f"amdim({j}:{k})"))
    return out


def extract_amdim_batch(Ma: FeatureMapSet, Mb: FeatureMapSet, spec: ComparisonSpec, *,
                        sample_anchor: bool = False, seed: int = 0) -> list[RepresentationBatch]:
    """Batched multiscale triplets; the other images of view b are the negatives."""
    spec.validate(len(Ma))
    b = Ma[-1].shape[0]
    if b < 2:
        raise ExtractionError("a batch needs at least two images to provide negatives")
    out = []
    for j, k in spec.pairs:
        ma, mb = Ma[j], Mb[k]
        if ma.shape[1] != mb.shape[1]:
            raise T.ShapeError(
                f"layers {j} and {k} have different widths {ma.shape[1]} and {mb.shape[1]}; set embed_dim on the encoder"
            )
        na = ma.shape[2] * ma.shape[3]
        nb = mb.shape[2] * mb.shape[3]
        anchors = _batched_cells(ma)
        akeys = np.repeat(np.arange(b), na)
        if sample_anchor:
            pick = rng.stream(seed, "amdim_anchor", j, k).integers(na, size=b)
            rows = np.arange(b) * na + pick
            anchors = anchors[rows]
            akeys = akeys[rows]
        out.append(RepresentationBatch(anchors, _batched_cells(mb), akeys, np.repeat(np.arange(b), nb),
                                       source=f"amdim({j}:{k})"))
    return out


# ---------------------------------------------------------------------------
# CPC: context encoder, prediction matrices, labels
# ---------------------------------------------------------------------------


class ContextEncoder(Module):
    """Two stacked 3x3 convolutions whose kernel row below the centre is zero.

    Output row ``i`` therefore depends only on input rows ``<= i``.
    """

    def __init__(self, channels: int, seed: int = 0, layers: int = 2):
        super().__init__()
        from .layers import Conv2d

        self.n_layers = layers
        for i in range(layers):
            setattr(self, f"conv{i}", Conv2d(channels, channels, 3, padding=1, seed=seed, name=f"context.conv{i}"))
        mask = np.ones((1, 1, 3, 3))
        mask[:, :, 2, :] = 0.0
        object.__setattr__(self, "mask", mask)

    def forward(self, h: Tensor) -> Tensor:
        x = h
        for i in range(self.n_layers):
            conv = getattr(self, f"conv{i}")
            w = conv.weight * Tensor(self.mask.astype(conv.weight.dtype))
            x = T.conv2d(x, w, conv.bias, stride=1, padding=1)
            if i < self.n_layers - 1:
                x = x.relu()
        return x


class PredictionMatrices(Module):
    """One ``c x c`` matrix per downward offset ``k >= 1``."""

    def __init__(self, channels: int, offsets=(1, 2), seed: int = 0):
        super().__init__()
        offsets = tuple(int(k) for k in offsets)
        if not offsets or min(offsets) < 1:
            raise ExtractionError(f"prediction offsets must be >= 1, got {offsets}")
        object.__setattr__(self, "offsets", offsets)
        for k in offsets:
            setattr(self, f"W{k}", Linear(channels, channels, seed=seed, name=f"predict.W{k}", gain=3.0))

    def matrix(self, k: int) -> Tensor:
        return getattr(self, f"W{k}").weight

    def forward(self, c: Tensor, k: int) -> Tensor:
        return c @ self.matrix(k)


def cpc_labels(b: int, h: int, w: int, i: int) -> np.ndarray:
    """Target index for every prediction row at ``i + 1`` rows below its source.

    Rows are ordered (image, source row, column); targets are the flattened
    ``(b, h, w)`` grid.  ``c1`` counts rows within each image.
    """
    rows = h - i - 1
    n = b * rows * w
    b1 = np.arange(n) // (rows * w)
    c1 = np.arange(n) % (rows * w)
    return b1 * h * w + (i + 1) * w + c1


def extract_cpc(H: Tensor, ctx: ContextEncoder, W: PredictionMatrices, embed_scale: float = 0.1) -> RepresentationBatch:
    """Downward spatial prediction over a ``(b, c, h, w)`` grid.

    Anchors are ``embed_scale * W_k c_{i,j}``, the positive is ``H_{i+k,j}``
    and every other grid vector in the batch is a negative.
    """
    if H.ndim == 3:
        H = H.reshape((1,) + H.shape)
    b, c, h, w = H.shape
    C = ctx(H)
    targets = _batched_cells(H)
    preds, labels, offsets = [], [], []
    for k in W.offsets:
        if k >= h:
            continue
        ctx_rows = C[:, :, : h - k, :]
        rows = _batched_cells(ctx_rows)
        preds.append(W(rows, k) * embed_scale)
        labels.append(cpc_labels(b, h, w, k - 1))
        offsets.append(np.full(rows.shape[0], k))
    if not preds:
        raise ExtractionError(f"no prediction targets: every offset in {W.offsets} is >= grid height {h}")
    labels = np.concatenate(labels)
    m = b * h * w
    return RepresentationBatch(
        anchors=T.concatenate(preds, axis=0),
        targets=targets,
        anchor_keys=labels,
        target_keys=np.arange(m),
        target_owner=np.arange(m) // (h * w),
        labels=labels,
        source="cpc",
        meta={"offsets": np.concatenate(offsets)},
    )


# ---------------------------------------------------------------------------
# SimCLR
# ---------------------------------------------------------------------------


class ProjectionHead(Module):
    """``z = W2 relu(W1 h)``, optionally L2-normalized; width preserved."""

    def __init__(self, dim: int, hidden: int | None = None, *, normalize: bool = True, identity: bool = False,
                 seed: int = 0):
        super().__init__()
        object.__setattr__(self, "dim", dim)
        object.__setattr__(self, "normalize", normalize)
        object.__setattr__(self, "identity", identity)
        if not identity:
            hidden = hidden or dim
            self.fc1 = Linear(dim, hidden, seed=seed, name="head.fc1")
            self.fc2 = Linear(hidden, dim, seed=seed, name="head.fc2", gain=3.0)

    def forward(self, h: Tensor) -> Tensor:
        z = h if self.identity else self.fc2(self.fc1(h).relu())
        return T.l2_normalize(z, axis=-1) if self.normalize else z


def flatten_deepest(M: FeatureMapSet) -> Tensor:
    m = M[-1]
    if not M.batched:
        return m.reshape(-1)
    return m.reshape(m.shape[0], -1)


def extract_simclr(Ma: FeatureMapSet, Mb: FeatureMapSet, head: ProjectionHead) -> RepresentationBatch:
    """Flatten deepest maps, project, and pair view a with view b image by image.

    Anchors and targets are both ``concat(z1, z2)``; each row's positive is
    its partner view and the other ``2n - 2`` rows are negatives.
    """
    if not Ma.batched:
        Ma = FeatureMapSet([m.reshape((1,) + m.shape) for m in Ma.maps], batched=True)
        Mb = FeatureMapSet([m.reshape((1,) + m.shape) for m in Mb.maps], batched=True)
    z1 = head(flatten_deepest(Ma))
    z2 = head(flatten_deepest(Mb))
    n = z1.shape[0]
    out = T.concatenate([z1, z2], axis=0)
    keys = np.concatenate([np.arange(n), np.arange(n)])
    ids = np.arange(2 * n)
    labels = np.concatenate([np.arange(n) + n, np.arange(n)])
    return RepresentationBatch(out, out, keys, keys, anchor_ids=ids, target_ids=ids, labels=labels,
                               source="simclr", meta={"z1": z1, "z2": z2})
