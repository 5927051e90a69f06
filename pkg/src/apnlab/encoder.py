"""Convolutional encoders returning one feature map per stage."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import BatchNorm2d, Conv2d, Identity, LayerNorm, Module
from .tensor import Tensor

NORM_KINDS = ("none", "batch", "layer")


class EncoderConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 128])
    blocks_per_stage: list[int] | None = None
    use_padding: bool = False
    norm: str = "none"
    input_channels: int = 3
    kernel: int = 3
    stage_strides: list[int] | None = None
    # 1x1 projection of every stage output to a shared width, so maps from
    # different depths can be compared with a dot product
    embed_dim: int | None = None
    width_multiplier: float = 1.0

    def __post_init__(self):
        if self.blocks_per_stage is None:
            self.blocks_per_stage = [1] * len(self.stage_channels)
        if self.stage_strides is None:
            self.stage_strides = [1] * len(self.stage_channels)
        self.validate()

    def validate(self) -> None:
        if not self.stage_channels:
            raise EncoderConfigError("stage_channels must be non-empty")
        if any(int(c) < 1 for c in self.stage_channels):
            raise EncoderConfigError(f"stage_channels must be positive, got {self.stage_channels}")
        if len(self.blocks_per_stage) != len(self.stage_channels):
            raise EncoderConfigError("blocks_per_stage must have the same length as stage_channels")
        if any(int(b) < 1 for b in self.blocks_per_stage):
            raise EncoderConfigError(f"blocks_per_stage must be positive, got {self.blocks_per_stage}")
        if len(self.stage_strides) != len(self.stage_channels) or any(int(s) < 1 for s in self.stage_strides):
            raise EncoderConfigError(f"stage_strides must be positive, one per stage, got {self.stage_strides}")
        if self.norm not in NORM_KINDS:
            raise EncoderConfigError(f"norm must be one of {NORM_KINDS}, got {self.norm!r}")
        if self.input_channels < 1:
            raise EncoderConfigError("input_channels must be positive")
        if self.kernel < 1:
            raise EncoderConfigError("kernel must be positive")
        if self.width_multiplier <= 0:
            raise EncoderConfigError("width_multiplier must be positive")
        if self.embed_dim is not None and self.embed_dim < 1:
            raise EncoderConfigError("embed_dim must be positive")

    @property
    def widths(self) -> list[int]:
        return [max(1, int(round(c * self.width_multiplier))) for c in self.stage_channels]


@dataclass
class FeatureMapSet:
    """Per-stage outputs, shallowest first; ``maps[-1]`` is the deepest.

    Unbatched maps are ``(c, h, w)``; batched ones carry a leading image axis.
    """

    maps: list[Tensor]
    batched: bool = False

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, idx: int) -> Tensor:
        return self.maps[idx]

    def image(self, b: int) -> FeatureMapSet:
        if not self.batched:
            raise ValueError("FeatureMapSet is not batched")
        return FeatureMapSet([m[b] for m in self.maps], batched=False)


class _Block(Module):
    def __init__(self, in_ch, out_ch, cfg: EncoderConfig, stride, seed, name):
        super().__init__()
        pad = cfg.kernel // 2 if cfg.use_padding else 0
        self.conv = Conv2d(in_ch, out_ch, cfg.kernel, stride=stride, padding=pad, seed=seed, name=f"{name}.conv")
        if cfg.norm == "batch":
            self.norm = BatchNorm2d(out_ch)
        elif cfg.norm == "layer":
            self.norm = LayerNorm(out_ch)
        else:
            self.norm = Identity()

    def forward(self, x):
        return self.norm(self.conv(x)).relu()


class _Stage(Module):
    def __init__(self, blocks: list[_Block], embed: Conv2d | None):
        super().__init__()
        self.n_blocks = len(blocks)
        for j, blk in enumerate(blocks):
            setattr(self, f"block{j}", blk)
        if embed is not None:
            self.embed = embed


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        object.__setattr__(self, "cfg", cfg)
        in_ch = cfg.input_channels
        self.n_stages = len(cfg.stage_channels)
        for i, (width, n_blocks, stride) in enumerate(zip(cfg.widths, cfg.blocks_per_stage, cfg.stage_strides)):
            blocks = []
            for j in range(n_blocks):
                blocks.append(_Block(in_ch, width, cfg, stride if j == 0 else 1, seed, f"stage{i}.block{j}"))
                in_ch = width
            embed = None
            if cfg.embed_dim is not None:
                embed = Conv2d(width, cfg.embed_dim, 1, seed=seed, name=f"stage{i}.embed")
            setattr(self, f"stage{i}", _Stage(blocks, embed))

    @property
    def out_channels(self) -> list[int]:
        if self.cfg.embed_dim is not None:
            return [self.cfg.embed_dim] * self.n_stages
        return list(self.cfg.widths)

    def spatial_extents(self, h: int, w: int) -> list[tuple[int, int]]:
        """Map extents per stage for an ``h x w`` input; raises on underflow."""
        cfg = self.cfg
        pad = cfg.kernel // 2 if cfg.use_padding else 0
        out = []
        for i, (n_blocks, stride) in enumerate(zip(cfg.blocks_per_stage, cfg.stage_strides)):
            for j in range(n_blocks):
                if h + 2 * pad < cfg.kernel or w + 2 * pad < cfg.kernel:
                    raise T.ShapeError(
                        f"stage {i} block {j}: input extent {h}x{w} smaller than kernel {cfg.kernel}"
                    )
                s = stride if j == 0 else 1
                h = (h + 2 * pad - cfg.kernel) // s + 1
                w = (w + 2 * pad - cfg.kernel) // s + 1
            out.append((h, w))
        return out

    def forward(self, x: Tensor) -> list[Tensor]:
        """``(n, d, h, w)`` -> list of ``(n, c_l, h_l, w_l)``."""
        if x.shape[1] != self.cfg.input_channels:
            raise T.ShapeError(f"encoder expects {self.cfg.input_channels} input channels, got shape {x.shape}")
        self.spatial_extents(*x.shape[2:])
        maps = []
        for i in range(self.n_stages):
            stage = getattr(self, f"stage{i}")
            for j in range(stage.n_blocks):
                x = getattr(stage, f"block{j}")(x)
            maps.append(stage.embed(x) if "embed" in stage._modules else x)
        return maps

    def encode_batch(self, x, grid: tuple[int, int] | None = None) -> FeatureMapSet:
        """Batched encode.

        ``x`` is ``(n, d, h, w)`` or patched ``(n, p, d, q, q)``.  Patches are
        encoded independently, mean-pooled to one vector each and laid out on
        the ``(rows, cols)`` patch grid, giving maps of shape ``(n, c, rows, cols)``.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 4:
            return FeatureMapSet(self.forward(x), batched=True)
        if x.ndim != 5:
            raise T.ShapeError(f"encode_batch expects rank 4 or 5 input, got shape {x.shape}")
        n, p = x.shape[:2]
        rows, cols = grid if grid is not None else _square_grid(p)
        if rows * cols != p:
            raise T.ShapeError(f"grid {rows}x{cols} does not hold {p} patches")
        maps = self.forward(x.reshape((n * p,) + x.shape[2:]))
        gridded = []
        for m in maps:
            c = m.shape[1]
            pooled = m.mean(axis=(2, 3))  # (n*p, c)
            gridded.append(pooled.reshape(n, rows, cols, c).permute(0, 3, 1, 2))
        return FeatureMapSet(gridded, batched=True)

    def encode(self, v, grid: tuple[int, int] | None = None) -> FeatureMapSet:
        """Encode one image ``(d, h, w)`` or one patched image ``(p, d, q, q)``."""
        v = v if isinstance(v, Tensor) else Tensor(v)
        if v.ndim not in (3, 4):
            raise T.ShapeError(f"encode expects rank 3 or 4 input, got shape {v.shape}")
        batched = self.encode_batch(v.reshape((1,) + v.shape), grid)
        return batched.image(0)


def _square_grid(p: int) -> tuple[int, int]:
    r = math.isqrt(p)
    if r * r != p:
        raise T.ShapeError(f"{p} patches do not form a square grid; pass grid=(rows, cols)")
    return r, r


def build_encoder(cfg: EncoderConfig, seed: int = 0, dtype=np.float64) -> Encoder:
    enc = Encoder(cfg, seed=seed)
    if dtype != np.float64:
        enc.to(dtype)
    return enc


def pooled_features(fms: FeatureMapSet, level: int = -1) -> Tensor:
    """Global mean over the spatial (or patch-grid) axes of one batched map."""
    return fms[level].mean(axis=(2, 3))
