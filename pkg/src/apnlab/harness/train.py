"""Pretraining loop: augment, encode, extract, score, step.

Determinism contract: with ``shards == 1`` the same config and seed produce
identical per-step losses, metrics rows and checkpoints.  Batch order and
augmentation draws are keyed by ``(seed, epoch, image id, view)``, so a run
resumed from an end-of-epoch checkpoint replays the remaining epochs exactly.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .. import checkpoint, rng
from .. import tensor as T
from ..augment import apply_batch
from .config import RunConfig, to_ini
from .data import Dataset
from .model import ContrastiveModel
from .optim import Adam

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("run_id", "epoch", "step", "loss", "wall_ms", "shard_count")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, detail: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}{': ' + detail if detail else ''}")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainResult:
    model: ContrastiveModel
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    checkpoint_path: str | None = None
    best_checkpoint_path: str | None = None
    metrics_path: str | None = None


def default_out_dir() -> str:
    return os.environ.get("APN_LAB_OUT", "out")


def model_state(model: ContrastiveModel, opt: Adam, epoch: int, best: float) -> dict[str, np.ndarray]:
    state = dict(model.state_dict())
    state.update(opt.state_dict())
    state["meta.epoch"] = np.array([epoch], dtype=np.int64)
    state["meta.best_loss"] = np.array([best], dtype=np.float64)
    return state


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = rng.stream(seed, "order", epoch).permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def pretrain(cfg: RunConfig, data: Dataset, out_dir: str | None = None, resume: str | None = None,
             write_files: bool = True) -> TrainResult:
    """Train the configured model without labels.

    Writes ``metrics.csv`` (one row per epoch), ``steps.csv`` (one row per
    step), ``config.ini`` (the expanded config), ``ckpt.bin`` and
    ``ckpt_best.bin`` into ``out_dir``.
    """
    cfg.validate()
    data = data.unlabeled()
    images = data.images.astype(cfg.dtype, copy=False)
    pipeline = cfg.pipeline_obj()
    model = ContrastiveModel(cfg, data.shape)
    model.train()
    opt = Adam(list(model.named_parameters()), lr=cfg.optimizer.lr,
               betas=(cfg.optimizer.beta1, cfg.optimizer.beta2), eps=cfg.optimizer.eps)
    start_epoch, best = 0, math.inf
    if resume is not None:
        state = checkpoint.load(resume)
        model.load_state_dict(state)
        opt.load_state_dict(state)
        start_epoch = int(state["meta.epoch"][0])
        best = float(state["meta.best_loss"][0])

    result = TrainResult(model)
    out_dir = out_dir or default_out_dir()
    rows: list[dict] = []
    step_rows: list[tuple] = []
    if write_files:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.ini"), "w") as fh:
            fh.write(to_ini(cfg))
        log.info("expanded config for %s:\n%s", cfg.run_id, to_ini(cfg))

    step = opt.step_count
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for idx in _batches(len(images), cfg.batch_size, cfg.seed, epoch):
            va = apply_batch(pipeline, images[idx], cfg.seed, "epoch", epoch, "view", "a", ids=idx)
            vb = apply_batch(pipeline, images[idx], cfg.seed, "epoch", epoch, "view", "b", ids=idx) \
                if model.uses_two_views else None
            try:
                loss = model.loss(va, vb, shards=cfg.shards)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(epoch, step, str(exc)) from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            losses.append(value)
            step_rows.append((cfg.run_id, epoch, step, repr(value)))
        mean = float(np.mean(losses))
        wall_ms = int(round((time.perf_counter() - t0) * 1000)) if cfg.wall_time else 0
        rows.append({"run_id": cfg.run_id, "epoch": epoch, "step": step, "loss": repr(mean),
                     "wall_ms": wall_ms, "shard_count": cfg.shards})
        result.epoch_losses.append(mean)
        result.step_losses.extend(losses)
        log.info("%s epoch %d loss %.5f (%d ms)", cfg.run_id, epoch, mean, wall_ms)
        if write_files:
            state = model_state(model, opt, epoch + 1, min(best, mean))
            if mean < best:
                best = mean
                checkpoint.save(os.path.join(out_dir, "ckpt_best.bin"), state)
            checkpoint.save(os.path.join(out_dir, "ckpt.bin"), state)
        else:
            best = min(best, mean)

    if write_files:
        if cfg.epochs == start_epoch:
            checkpoint.save(os.path.join(out_dir, "ckpt.bin"), model_state(model, opt, start_epoch, best))
        result.checkpoint_path = os.path.join(out_dir, "ckpt.bin")
        best_path = os.path.join(out_dir, "ckpt_best.bin")
        result.best_checkpoint_path = best_path if os.path.exists(best_path) else None
        result.metrics_path = os.path.join(out_dir, "metrics.csv")
        _write_csv(result.metrics_path, METRICS_COLUMNS, [[r[c] for c in METRICS_COLUMNS] for r in rows],
                   append=resume is not None)
        _write_csv(os.path.join(out_dir, "steps.csv"), ("run_id", "epoch", "step", "loss"), step_rows,
                   append=resume is not None)
    return result


def _write_csv(path: str, header, rows, append: bool = False) -> None:
    exists = append and os.path.exists(path)
    with open(path, "a" if exists else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not exists:
            writer.writerow(header)
        writer.writerows(rows)


def load_model(cfg: RunConfig, image_shape, path: str) -> ContrastiveModel:
    model = ContrastiveModel(cfg, image_shape)
    model.load_state_dict(checkpoint.load(path), strict=False)
    return model
