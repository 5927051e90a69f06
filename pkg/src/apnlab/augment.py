"""Stochastic augmentation pipelines that turn one image into many views.

Images are ``(d, h, w)`` float arrays.  A pipeline is an ordered tuple of
stages; ``apply`` runs them left to right with an independent random stream
per (seed, caller keys, stage index), so inserting or removing a stage does
not change the draws seen by the others.

Stage definitions (fixed here, the upstream method descriptions defer to
their original references):

``random_flip(p)``
    mirror along the width axis with probability ``p``.
``image_jitter(j, p)``
    with probability ``p``, reflect-pad by ``j`` pixels and crop back to the
    original extent at a uniformly drawn offset, i.e. translate by up to
    ``±j`` pixels per axis.
``color_jitter(c, p)``
    with probability ``p``, per channel ``x -> s*x + t`` with
    ``s ~ U[1-c, 1+c]`` and ``t ~ U[-c, c]``.
``random_grayscale(p)``
    with probability ``p``, replace every channel by the luma mix
    (0.299, 0.587, 0.114) for 3 channels, the channel mean otherwise.
``z_normalize()``
    per-channel zero mean, unit standard deviation.
``patchify(q, overlap)``
    cut into ``q x q`` patches on a stride of ``q - overlap``; output is
    ``(p, d, q, q)`` in row-major patch order.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng

STAGE_KINDS = ("random_flip", "image_jitter", "color_jitter", "random_grayscale", "z_normalize", "patchify")

_DEFAULTS = {
    "random_flip": {"p": 0.5},
    "image_jitter": {"j": 2.0, "p": 1.0},
    "color_jitter": {"c": 0.4, "p": 0.8},
    "random_grayscale": {"p": 0.25},
    "z_normalize": {},
    "patchify": {"q": 16, "overlap": 8},
}

_LUMA = np.array([0.299, 0.587, 0.114])


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class PatchifyConfig:
    q: int
    overlap: int = 0

    def __post_init__(self):
        if self.q < 1 or not 0 <= self.overlap < self.q:
            raise AugmentError(f"patchify needs 0 <= overlap < q, got q={self.q}, overlap={self.overlap}")

    @property
    def stride(self) -> int:
        return self.q - self.overlap

    def grid(self, h: int, w: int) -> tuple[int, int]:
        """Patch rows and columns for an ``h x w`` image."""
        s = self.stride
        if self.q > min(h, w):
            raise AugmentError(f"patch side {self.q} exceeds image extent {h}x{w}")
        if (h - self.q) % s or (w - self.q) % s:
            raise AugmentError(
                f"patchify stride {s} (q={self.q}, overlap={self.overlap}) does not tile image extents {h}x{w}"
            )
        return (h - self.q) // s + 1, (w - self.q) // s + 1


@dataclass(frozen=True)
class Stage:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise AugmentError(f"unknown stage kind {self.kind!r}")
        merged = dict(_DEFAULTS[self.kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise AugmentError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        merged.update(self.params)
        object.__setattr__(self, "params", merged)
        p = merged.get("p")
        if p is not None and not 0.0 <= p <= 1.0:
            raise AugmentError(f"{self.kind}: probability {p} outside [0, 1]")
        for mag in ("j", "c"):
            if mag in merged and merged[mag] < 0:
                raise AugmentError(f"{self.kind}: magnitude {mag}={merged[mag]} must be >= 0")
        if self.kind == "patchify":
            PatchifyConfig(int(merged["q"]), int(merged["overlap"]))

    def __hash__(self):
        return hash((self.kind, tuple(sorted(self.params.items()))))

    def to_text(self) -> str:
        args = ", ".join(f"{k}={_fmt(v)}" for k, v in self.params.items())
        return f"{self.kind}({args})"


def _fmt(v) -> str:
    if isinstance(v, float) and v.is_integer():
        return str(int(v)) if abs(v) >= 1 else repr(v)
    return repr(v) if isinstance(v, float) else str(v)


@dataclass(frozen=True)
class Pipeline:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        for i, st in enumerate(self.stages):
            if st.kind == "patchify" and i != len(self.stages) - 1:
                raise AugmentError("patchify must be the final stage")

    @property
    def patchify(self) -> PatchifyConfig | None:
        if self.stages and self.stages[-1].kind == "patchify":
            prm = self.stages[-1].params
            return PatchifyConfig(int(prm["q"]), int(prm["overlap"]))
        return None

    def deterministic(self) -> Pipeline:
        """The evaluation-time pipeline: only the non-random stages."""
        return Pipeline(tuple(s for s in self.stages if s.kind in ("z_normalize", "patchify")))

    def to_text(self) -> str:
        return ", ".join(s.to_text() for s in self.stages)


@dataclass
class ViewTriplet:
    anchor_view: np.ndarray
    positive_view: np.ndarray
    negative_views: list[np.ndarray]


_STAGE_RE = re.compile(r"\s*([a-z_]+)\s*(?:\(([^()]*)\))?\s*(?:,|$)")


def parse_pipeline(text: str) -> Pipeline:
    """Parse ``"random_flip(p=0.5), z_normalize, patchify(q=16, overlap=8)"``."""
    stages = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _STAGE_RE.match(text, pos)
        if not m or m.end() == pos:
            raise AugmentError(f"cannot parse pipeline at position {pos}: {text[pos:]!r}")
        kind, args = m.group(1), m.group(2)
        params = {}
        if args and args.strip():
            for item in args.split(","):
                if "=" not in item:
                    raise AugmentError(f"{kind}: expected key=value, got {item.strip()!r}")
                key, val = (s.strip() for s in item.split("=", 1))
                params[key] = int(val) if key in ("q", "overlap") else float(val)
        stages.append(Stage(kind, params))
        pos = m.end()
    return Pipeline(tuple(stages))


# ---------------------------------------------------------------------------
# stage kernels
# ---------------------------------------------------------------------------


def _random_flip(x, prm, g):
    return x[:, :, ::-1].copy() if g.random() < prm["p"] else x


def _image_jitter(x, prm, g):
    j = int(round(prm["j"]))
    hit = g.random() < prm["p"]
    dy, dx = g.integers(0, 2 * j + 1, size=2) if j > 0 else (0, 0)
    if not hit or j == 0:
        return x
    h, w = x.shape[1:]
    mode = "reflect" if j < min(h, w) else "symmetric"
    padded = np.pad(x, ((0, 0), (j, j), (j, j)), mode=mode)
    return padded[:, dy : dy + h, dx : dx + w].copy()


def _color_jitter(x, prm, g):
    c = prm["c"]
    d = x.shape[0]
    hit = g.random() < prm["p"]
    scale = g.uniform(1 - c, 1 + c, size=(d, 1, 1))
    shift = g.uniform(-c, c, size=(d, 1, 1))
    return (x * scale + shift).astype(x.dtype) if hit else x


def _random_grayscale(x, prm, g):
    if g.random() >= prm["p"]:
        return x
    if x.shape[0] == 3:
        gray = np.tensordot(_LUMA, x, axes=(0, 0))
    else:
        gray = x.mean(axis=0)
    return np.broadcast_to(gray, x.shape).astype(x.dtype)


def _z_normalize(x, prm, g):
    mu = x.mean(axis=(1, 2), keepdims=True)
    sd = x.std(axis=(1, 2), keepdims=True)
    return ((x - mu) / np.where(sd > 1e-12, sd, 1.0)).astype(x.dtype)


def patchify(x: np.ndarray, cfg: PatchifyConfig) -> np.ndarray:
    d, h, w = x.shape
    rows, cols = cfg.grid(h, w)
    s, q = cfg.stride, cfg.q
    out = np.empty((rows * cols, d, q, q), dtype=x.dtype)
    for r in range(rows):
        for c in range(cols):
            out[r * cols + c] = x[:, r * s : r * s + q, c * s : c * s + q]
    return out


def _patchify(x, prm, g):
    return patchify(x, PatchifyConfig(int(prm["q"]), int(prm["overlap"])))


_KERNELS = {
    "random_flip": _random_flip,
    "image_jitter": _image_jitter,
    "color_jitter": _color_jitter,
    "random_grayscale": _random_grayscale,
    "z_normalize": _z_normalize,
    "patchify": _patchify,
}


def apply(pipeline: Pipeline, image, seed: int, *keys) -> np.ndarray:
    """Run ``pipeline`` on one ``(d, h, w)`` image.

    The output is a pure function of ``(pipeline, image, seed, keys)``.
    """
    x = np.asarray(getattr(image, "data", image))
    if x.ndim != 3:
        raise AugmentError(f"expected a (d, h, w) image, got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    for i, stage in enumerate(pipeline.stages):
        g = rng.stream(seed, *keys, "stage", i, stage.kind)
        x = _KERNELS[stage.kind](x, stage.params, g)
    return np.ascontiguousarray(x)


def apply_batch(pipeline: Pipeline, images: np.ndarray, seed: int, *keys, ids: Sequence[int] | None = None) -> np.ndarray:
    """Apply to each image of an ``(n, d, h, w)`` batch; ``ids`` key the per-image streams."""
    ids = range(len(images)) if ids is None else ids
    return np.stack([apply(pipeline, img, seed, *keys, int(i)) for img, i in zip(images, ids)])


def sample_triplet(pipeline: Pipeline, x, negatives_source: Sequence, seed: int) -> ViewTriplet:
    """Anchor and positive from two independent draws on ``x``; one draw per negative source."""
    if len(negatives_source) == 0:
        raise AugmentError("sample_triplet needs at least one negative source")
    x = np.asarray(getattr(x, "data", x))
    for i, neg in enumerate(negatives_source):
        if np.shape(getattr(neg, "data", neg)) != x.shape:
            raise AugmentError(f"negative source {i} has shape {np.shape(neg)}, expected {x.shape}")
    return ViewTriplet(
        anchor_view=apply(pipeline, x, seed, "anchor"),
        positive_view=apply(pipeline, x, seed, "positive"),
        negative_views=[apply(pipeline, n, seed, "negative", i) for i, n in enumerate(negatives_source)],
    )


def patch_count(h: int, w: int, q: int, overlap: int) -> int:
    rows, cols = PatchifyConfig(q, overlap).grid(h, w)
    return rows * cols


# ---------------------------------------------------------------------------
# method pipelines
# ---------------------------------------------------------------------------


def amdim_pipeline(jitter: float = 2.0, color: float = 0.4) -> Pipeline:
    return Pipeline((
        Stage("random_flip", {"p": 0.5}),
        Stage("image_jitter", {"j": jitter, "p": 1.0}),
        Stage("color_jitter", {"c": color, "p": 0.8}),
        Stage("random_grayscale", {"p": 0.25}),
        Stage("z_normalize"),
    ))


def union_pipeline(q: int = 16, overlap: int = 8, **kw) -> Pipeline:
    """The AMDIM stages followed by patchify (used by both CPC and YADIM)."""
    return Pipeline(amdim_pipeline(**kw).stages + (Stage("patchify", {"q": q, "overlap": overlap}),))


def simclr_pipeline(color: float = 0.4) -> Pipeline:
    # resized crop and gaussian blur are not implemented
    return Pipeline((
        Stage("random_flip", {"p": 0.5}),
        Stage("color_jitter", {"c": color, "p": 0.8}),
        Stage("random_grayscale", {"p": 0.2}),
        Stage("z_normalize"),
    ))
