"""Independent reference checks shared by the CLI and the acceptance suite.

Each check returns :class:`Check` records.  They recompute expected values by
a route that does not go through the code under test (closed forms, nested
loops, finite differences) and compare at a fixed tolerance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .augment import PatchifyConfig, patch_count, patchify
from .extraction import ContextEncoder, RepresentationBatch, cpc_labels
from .simloss import (
    DOT,
    LossConfig,
    amdim_total,
    batch_loss,
    info_nce,
    nce_amdim,
    nt_xent,
    sharded_negatives,
    split_batch,
)
from .tensor import Tensor


@dataclass
class Check:
    name: str
    passed: bool
    value: float = float("nan")
    tolerance: float = float("nan")
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f" value={self.value:.3g} tol={self.tolerance:.1g}" if not math.isnan(self.value) else ""
        return f"{tag}  {self.name}{extra}{'  ' + self.detail if self.detail else ''}"


# ---------------------------------------------------------------------------
# finite-difference gradient suite
# ---------------------------------------------------------------------------


def _split(x: Tensor, sizes) -> list[Tensor]:
    out, start = [], 0
    for s in sizes:
        out.append(x[start : start + s])
        start += s
    return out


def _nce_case(g: np.random.Generator):
    c, p, n = int(g.integers(2, 6)), int(g.integers(1, 4)), int(g.integers(1, 6))
    flag = bool(g.integers(2))
    x = g.standard_normal((1 + p + n, c))

    def f(t: Tensor) -> Tensor:
        a, P, N = _split(t, (1, p, n))
        return nce_amdim(a.reshape(-1), P, N, DOT, flag)

    return f, x


def _info_case(g):
    c, n = int(g.integers(2, 6)), int(g.integers(1, 8))
    x = g.standard_normal((2 + n, c))

    def f(t):
        a, pos, N = _split(t, (1, 1, n))
        return info_nce(a.reshape(-1), pos.reshape(-1), N, DOT)

    return f, x


def _ntx_case(g):
    n, c = int(g.integers(1, 5)), int(g.integers(2, 6))
    tau = float(g.uniform(0.2, 2.0))
    x = g.standard_normal((2 * n, c))
    x /= np.linalg.norm(x, axis=1, keepdims=True)

    def f(t):
        return nt_xent(t[:n], t[n:], tau)

    return f, x


def _total_case(g):
    b, c = int(g.integers(2, 4)), int(g.integers(2, 5))
    cells = [int(g.integers(1, 4)) for _ in range(3)]
    sizes = []
    for na in cells:
        sizes += [b * na, b * na]
    x = 0.5 * g.standard_normal((sum(sizes), c))

    def f(t):
        parts = _split(t, sizes)
        batches = []
        for i, na in enumerate(cells):
            keys = np.repeat(np.arange(b), na)
            batches.append(RepresentationBatch(parts[2 * i], parts[2 * i + 1], keys, keys))
        return amdim_total(batches, DOT, include_positive_in_denominator=bool(cells[0] % 2))

    return f, x


GRAD_CASES: dict[str, Callable] = {
    "nce_amdim": _nce_case,
    "amdim_total": _total_case,
    "info_nce": _info_case,
    "nt_xent": _ntx_case,
}


def gradient_suite(instances: int = 10, seed: int = 0, tol: float = 1e-4) -> list[Check]:
    out = []
    for name, make in GRAD_CASES.items():
        g = np.random.default_rng([seed, len(name)])
        worst = 0.0
        for _ in range(instances):
            f, x = make(g)
            worst = max(worst, T.grad_check(f, x))
        out.append(Check(f"gradient {name} ({instances} instances, float64)", worst < tol, worst, tol))
    return out


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------


def closed_forms(tol: float = 1e-9) -> list[Check]:
    out = []
    for K in (1, 4, 16, 64):
        a = np.zeros(8)
        a[0] = 1.0
        # every candidate scores exactly 1.0
        loss = float(info_nce(a, a, np.tile(a, (K, 1))).data)
        out.append(Check(f"info_nce uniform K={K} = ln(1+K)", abs(loss - math.log(1 + K)) < tol,
                         abs(loss - math.log(1 + K)), tol))
    for p, n in ((1, 8), (3, 5), (4, 4)):
        a = np.full(4, 0.5)
        loss = float(nce_amdim(a, np.tile(a, (p, 1)), np.tile(a, (n, 1))).data)
        out.append(Check(f"nce_amdim uniform |R+|={p} |R-|={n} = ln(|R-|/|R+|)",
                         abs(loss - math.log(n / p)) < tol, abs(loss - math.log(n / p)), tol))
    z = np.array([[0.6, 0.8]])
    loss = float(nt_xent(z, z, 0.5).data)
    out.append(Check("nt_xent single identical pair = 0", abs(loss) < tol, abs(loss), tol))
    ref = -math.log(math.e / (math.e + 2))
    # two images with orthogonal embeddings, each seen identically in both views
    Z1 = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss2 = float(nt_xent(Z1, Z1, 1.0).data)
    out.append(Check("nt_xent n=2 orthogonal = -ln(e/(e+2))", abs(loss2 - ref) < 1e-6, abs(loss2 - ref), 1e-6))
    return out


# ---------------------------------------------------------------------------
# shard invariance
# ---------------------------------------------------------------------------


def _random_batch(kind: str, g: np.random.Generator, dtype) -> RepresentationBatch:
    c = 4
    if kind == "nt_xent":
        n = 6
        z = g.standard_normal((2 * n, c))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        ids = np.arange(2 * n)
        keys = np.concatenate([np.arange(n), np.arange(n)])
        return RepresentationBatch(Tensor(z.astype(dtype)), Tensor(z.astype(dtype)), keys, keys, ids, ids,
                                   target_owner=keys)
    images, cells = 6, 3
    owner = np.repeat(np.arange(images), cells)
    targets = g.standard_normal((images * cells, c))
    if kind == "info_nce":
        anchors = g.standard_normal((images * cells, c))
        keys = np.arange(images * cells)
        return RepresentationBatch(Tensor(anchors.astype(dtype)), Tensor(targets.astype(dtype)), keys, keys,
                                   target_owner=owner)
    anchors = g.standard_normal((images * 2, c))
    return RepresentationBatch(Tensor(anchors.astype(dtype)), Tensor(targets.astype(dtype)),
                               np.repeat(np.arange(images), 2), owner, target_owner=owner)


def shard_invariance(seed: int = 0) -> list[Check]:
    out = []
    for dtype, tol in ((np.float64, 1e-9), (np.float32, 1e-5)):
        worst = 0.0
        for kind in ("nce_amdim", "info_nce", "nt_xent"):
            cfg = LossConfig(kind, temperature=0.5 if kind == "nt_xent" else 1.0)
            g = np.random.default_rng([seed, len(kind)])
            batch = _random_batch(kind, g, dtype)
            ref = float(batch_loss(batch, cfg).data)
            for shards, sizes in ((2, None), (4, None), (4, [1, 2, 1, 2]), (3, [3, 2, 1])):
                got = float(batch_loss(batch, cfg, shards=shards, shard_sizes=sizes).data)
                worst = max(worst, abs(got - ref) / max(1.0, abs(ref)))
                dist = float(sharded_negatives(split_batch(batch, shards, sizes), cfg).data)
                worst = max(worst, abs(dist - ref) / max(1.0, abs(ref)))
        name = np.dtype(dtype).name
        out.append(Check(f"shard invariance K in {{1,2,4}} incl. unequal ({name})", worst < tol, worst, tol))
    return out


# ---------------------------------------------------------------------------
# CPC labels and causality
# ---------------------------------------------------------------------------


def cpc_label_oracle(b: int, h: int, w: int, i: int) -> np.ndarray:
    """Nested-loop enumeration: the cell ``i + 1`` rows below each source cell."""
    labels = []
    for img in range(b):
        for row in range(h - i - 1):
            for col in range(w):
                labels.append(img * h * w + (row + i + 1) * w + col)
    return np.array(labels, dtype=np.int64)


def cpc_labels_check() -> list[Check]:
    bad = []
    total = 0
    for b in (1, 2, 3):
        for h in (1, 2, 3):
            for w in (1, 2, 3):
                for i in range(h):
                    total += 1
                    if not np.array_equal(cpc_labels(b, h, w, i), cpc_label_oracle(b, h, w, i)):
                        bad.append((b, h, w, i))
    return [Check(f"cpc labels = nested-loop oracle ({total} cases)", not bad,
                  detail=f"mismatch at {bad[:3]}" if bad else "")]


def causality_check(draws: int = 100, seed: int = 0) -> list[Check]:
    """Perturbing rows below ``r`` leaves context rows ``<= r`` unchanged."""
    failures = 0
    for d in range(draws):
        g = np.random.default_rng([seed, d])
        c = int(g.integers(1, 4))
        h, w = int(g.integers(2, 6)), int(g.integers(1, 5))
        ctx = ContextEncoder(c, seed=d)
        for p in ctx.parameters():
            p.data = g.standard_normal(p.shape)
        x = g.standard_normal((1, c, h, w))
        r = int(g.integers(0, h - 1))
        y = x.copy()
        y[:, :, r + 1 :, :] += g.standard_normal(y[:, :, r + 1 :, :].shape) * 10
        with T.no_grad():
            a = ctx(Tensor(x)).data[:, :, : r + 1]
            b = ctx(Tensor(y)).data[:, :, : r + 1]
        if not np.array_equal(a, b):
            failures += 1
    return [Check(f"context encoder causality ({draws} draws)", failures == 0, detail=f"{failures} violations")]


# ---------------------------------------------------------------------------
# patchify
# ---------------------------------------------------------------------------


def patchify_checks(configs: int = 50, seed: int = 0) -> list[Check]:
    img = np.zeros((1, 256, 256))
    n = patchify(img, PatchifyConfig(64, 32)).shape[0]
    out = [Check("patchify 256/64/32 -> 49 patches", n == 49 and patch_count(256, 256, 64, 32) == 49,
                 detail=f"got {n}")]
    g = np.random.default_rng(seed)
    bad = 0
    done = 0
    while done < configs:
        q = int(g.integers(2, 12))
        overlap = int(g.integers(0, q))
        s = q - overlap
        h = q + s * int(g.integers(0, 5))
        w = q + s * int(g.integers(0, 5))
        expected = ((h - q) // s + 1) * ((w - q) // s + 1)
        got = patchify(g.standard_normal((2, h, w)), PatchifyConfig(q, overlap))
        if got.shape != (expected, 2, q, q) or patch_count(h, w, q, overlap) != expected:
            bad += 1
        done += 1
    out.append(Check(f"patch count formula ({configs} random configs)", bad == 0, detail=f"{bad} mismatches"))
    return out


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def centroid_oracle(seed: int = 0) -> list[Check]:
    from .harness.data import make_synthetic, split_indices

    data = make_synthetic(200, 2, nuisance=0.0, seed=seed)
    tr, _, te = split_indices(len(data), seed)
    x = data.images.reshape(len(data), -1).astype(np.float64)
    cents = np.stack([x[tr][data.labels[tr] == k].mean(axis=0) for k in range(2)])
    pred = np.argmin(((x[te][:, None] - cents[None]) ** 2).sum(-1), axis=1)
    acc = float(np.mean(pred == data.labels[te]))
    return [Check("nuisance 0: pixel nearest-centroid = 100%", acc == 1.0, acc, 0.0)]


def all_checks(seed: int = 0) -> list[Check]:
    return (gradient_suite(seed=seed) + closed_forms() + shard_invariance(seed) + cpc_labels_check()
            + causality_check(seed=seed) + patchify_checks(seed=seed) + centroid_oracle(seed))
