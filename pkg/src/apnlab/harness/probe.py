"""Frozen-encoder evaluation: fit an MLP on pooled features, report held-out accuracy."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .. import rng
from .. import tensor as T
from ..layers import MLP
from ..tensor import Tensor
from .config import ProbeConfig
from .data import Dataset, split_indices
from .model import ContrastiveModel
from .optim import Adam

log = logging.getLogger(__name__)


class ProbeError(ValueError):
    pass


@dataclass
class ProbeResult:
    accuracy: float            # test accuracy at the best-validation epoch
    val_accuracy: float
    train_accuracy: float
    best_epoch: int
    n_train: int
    n_test: int


def _accuracy(mlp: MLP, x: np.ndarray, y: np.ndarray) -> float:
    with T.no_grad():
        logits = mlp(Tensor(x)).data
    return float(np.mean(np.argmax(logits, axis=1) == y))


def probe_features(features: np.ndarray, labels: np.ndarray | None, pcfg: ProbeConfig | None = None,
                   seed: int = 0, splits=None) -> ProbeResult:
    """Train the probe MLP on fixed features.

    Features are standardised with train-split statistics.  The reported
    accuracy is on the test split at the epoch with the best validation
    accuracy (ties go to the earliest epoch).
    """
    pcfg = pcfg or ProbeConfig()
    if labels is None:
        raise ProbeError("probing needs labels; the dataset has none")
    if pcfg.hidden < 1:
        raise ProbeError(f"hidden must be >= 1, got {pcfg.hidden}")
    x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) != len(y):
        raise ProbeError(f"{len(x)} feature rows but {len(y)} labels")
    tr, va, te = splits if splits is not None else split_indices(len(x), seed)
    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    x = ((x - mu) / sd).astype(np.float32)
    classes = int(y.max()) + 1
    mlp = MLP(x.shape[1], pcfg.hidden, classes, seed=seed).to(np.float32)
    opt = Adam(list(mlp.named_parameters()), lr=pcfg.lr)
    best = (-1.0, 0.0, 0.0, -1)
    for epoch in range(pcfg.epochs):
        order = rng.stream(seed, "probe", epoch).permutation(tr)
        for start in range(0, len(order), pcfg.batch_size):
            idx = order[start : start + pcfg.batch_size]
            logits = mlp(Tensor(x[idx]))
            logp = logits.log_softmax(axis=1)
            loss = -logp[np.arange(len(idx)), y[idx]].mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        val = _accuracy(mlp, x[va], y[va]) if len(va) else 0.0
        if val > best[0]:
            best = (val, _accuracy(mlp, x[te], y[te]), _accuracy(mlp, x[tr], y[tr]), epoch)
    val, test, train, epoch = best
    log.info("probe: best epoch %d val %.4f test %.4f", epoch, val, test)
    return ProbeResult(test, val, train, epoch, len(tr), len(te))


def probe(model: ContrastiveModel, data: Dataset, pcfg: ProbeConfig | None = None, seed: int = 0) -> ProbeResult:
    """Freeze ``model``'s encoder, extract features and fit the probe."""
    if data.labels is None:
        raise ProbeError("probing needs a labelled dataset")
    model.encoder.freeze()
    feats = model.features(data.images)
    if any(p.grad is not None for p in model.encoder.parameters()):
        raise ProbeError("encoder received gradients during probing")
    return probe_features(feats, data.labels, pcfg, seed=seed)


def random_baseline(cfg, data: Dataset, pcfg: ProbeConfig | None = None, seed: int = 0) -> ProbeResult:
    """Probe on a freshly initialised, untrained encoder with the same config."""
    return probe(ContrastiveModel(cfg, data.shape), data, pcfg, seed=seed)
