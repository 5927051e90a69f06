"""Wires the five framework stages of a :class:`RunConfig` into one trainable model."""
from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..augment import Pipeline
from ..encoder import Encoder, FeatureMapSet, build_encoder, pooled_features
from ..extraction import (
    ContextEncoder,
    PredictionMatrices,
    ProjectionHead,
    extract_amdim_batch,
    extract_cpc,
    extract_simclr,
    parse_comparison_spec,
)
from ..layers import Module
from ..simloss import Similarity, batch_loss
from ..tensor import Tensor
from .config import RunConfig


class ContrastiveModel(Module):
    """Encoder plus whatever heads the extraction strategy needs.

    Encoder parameters keep their bare ``stage{i}.block{j}.*`` names; heads
    are prefixed ``context.``, ``predict.``, ``head.`` and ``sim.``.
    """

    def __init__(self, cfg: RunConfig, image_shape: tuple[int, int, int]):
        super().__init__()
        cfg.validate()
        object.__setattr__(self, "cfg", cfg)
        object.__setattr__(self, "pipeline", cfg.pipeline_obj())
        dtype = np.dtype(cfg.dtype)
        enc_cfg = cfg.encoder
        if enc_cfg.input_channels != image_shape[0]:
            enc_cfg.input_channels = image_shape[0]
        object.__setattr__(self, "encoder", build_encoder(enc_cfg, seed=cfg.seed))
        self.depth = len(enc_cfg.stage_channels)
        patch = self.pipeline.patchify
        if patch is not None:
            self.grid = patch.grid(image_shape[1], image_shape[2])
            view_hw = (patch.q, patch.q)
        else:
            self.grid = None
            view_hw = image_shape[1:]
        extents = self.encoder.spatial_extents(*view_hw)
        width = self.encoder.out_channels[-1]
        strategy = cfg.extraction.strategy
        if strategy == "multiscale":
            self.spec = parse_comparison_spec(cfg.extraction.comparison, depth=self.depth, seed=cfg.seed)
        elif strategy == "cpc":
            if self.grid is None:
                raise ValueError("the cpc strategy needs a patchify stage to build a patch grid")
            self.context = ContextEncoder(width, seed=cfg.seed)
            self.predict = PredictionMatrices(width, cfg.extraction.cpc_offsets, seed=cfg.seed)
        else:
            if self.grid is not None:
                hh, ww = self.grid
            else:
                hh, ww = extents[-1]
            flat = width * hh * ww
            self.head = ProjectionHead(flat, cfg.extraction.head_hidden, seed=cfg.seed)
        sim_w = None
        if cfg.similarity == "bilinear":
            rng_w = np.eye(width) + 0.01 * np.random.default_rng(cfg.seed).standard_normal((width, width))
            sim_w = Tensor(rng_w, requires_grad=True)
            self.sim_W = sim_w
        object.__setattr__(self, "similarity", Similarity(cfg.similarity, sim_w))
        self.to(dtype)

    # the encoder is held outside the registry so its names stay unprefixed
    def named_parameters(self, prefix: str = ""):
        yield from self.encoder.named_parameters(prefix)
        for name, p in super().named_parameters(prefix):
            yield name.replace("sim_W", "sim.W"), p

    def named_buffers(self, prefix: str = ""):
        yield from self.encoder.named_buffers(prefix)
        yield from super().named_buffers(prefix)

    def _set_buffer(self, dotted, value):
        own = dict(super().named_buffers())
        if dotted in own:
            super()._set_buffer(dotted, value)
        else:
            self.encoder._set_buffer(dotted, value)

    def modules(self):
        yield from super().modules()
        yield from self.encoder.modules()

    @property
    def uses_two_views(self) -> bool:
        return self.cfg.extraction.strategy != "cpc"

    def encode(self, views: np.ndarray) -> FeatureMapSet:
        x = Tensor(np.asarray(views, dtype=self.cfg.dtype))
        return self.encoder.encode_batch(x, self.grid)

    def loss(self, view_a: np.ndarray, view_b: np.ndarray | None = None, shards: int = 1) -> Tensor:
        cfg = self.cfg
        strategy = cfg.extraction.strategy
        Ma = self.encode(view_a)
        if strategy == "cpc":
            batch = extract_cpc(Ma[-1], self.context, self.predict, cfg.extraction.embed_scale)
            return batch_loss(batch, cfg.loss, self.similarity, shards=shards)
        Mb = self.encode(view_b)
        if strategy == "simclr":
            batch = extract_simclr(Ma, Mb, self.head)
            return batch_loss(batch, cfg.loss, self.similarity, shards=shards)
        batches = extract_amdim_batch(Ma, Mb, self.spec, sample_anchor=cfg.extraction.anchor_mode == "sample",
                                      seed=cfg.seed)
        terms = [batch_loss(b, cfg.loss, self.similarity, shards=shards) for b in batches]
        return terms[0] if len(terms) == 1 else T.stack(terms).mean()

    def features(self, images: np.ndarray, pipeline: Pipeline | None = None, chunk: int = 256) -> np.ndarray:
        """Frozen-encoder features: deterministic views, deepest map mean-pooled."""
        from ..augment import apply_batch

        pipeline = pipeline or self.pipeline.deterministic()
        self.eval()
        out = []
        with T.no_grad():
            for start in range(0, len(images), chunk):
                views = apply_batch(pipeline, images[start : start + chunk], 0, "eval")
                out.append(pooled_features(self.encode(views)).data)
        return np.concatenate(out, axis=0)
