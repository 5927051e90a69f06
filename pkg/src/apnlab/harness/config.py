"""Run configuration: INI file format, presets and their expansion.

File format (``configparser`` INI; every key optional, defaults come from
the preset named in ``[run] preset``)::

    [run]        preset, run_id, seed, epochs, batch_size, shards, dtype, wall_time
    [data]       n, classes, nuisance, channels, height, width
    [augment]    stages = random_flip(p=0.5), ..., patchify(q=16, overlap=8)
    [encoder]    stage_channels, blocks_per_stage, stage_strides, use_padding,
                 norm, kernel, embed_dim, width_multiplier
    [extraction] strategy (multiscale | cpc | simclr), comparison, anchor_mode,
                 cpc_offsets, embed_scale, head_hidden
    [similarity] kind (dot | bilinear | cosine)
    [loss]       kind (nce_amdim | info_nce | nt_xent), temperature,
                 include_positive_in_denominator
    [optimizer]  name (adam), lr, beta1, beta2, eps
    [probe]      hidden, epochs, lr, batch_size

Lists are comma separated; ``embed_dim = none`` disables the shared
projection.
"""
from __future__ import annotations

import configparser
import copy
import io
from dataclasses import asdict, dataclass, field

from ..augment import Pipeline, amdim_pipeline, parse_pipeline, simclr_pipeline, union_pipeline
from ..encoder import EncoderConfig
from ..extraction import parse_comparison_spec
from ..simloss import LossConfig

PRESETS = ("amdim", "cpc", "simclr", "yadim", "custom")
STRATEGIES = ("multiscale", "cpc", "simclr")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n: int = 2000
    classes: int = 2
    nuisance: float = 3.0
    channels: int = 3
    height: int = 32
    width: int = 32


@dataclass
class ExtractionConfig:
    strategy: str = "multiscale"
    comparison: str = "last_only"
    anchor_mode: str = "all"
    cpc_offsets: list[int] = field(default_factory=lambda: [1, 2])
    embed_scale: float = 0.1
    head_hidden: int | None = None


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ProbeConfig:
    hidden: int = 1024
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 128

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigError("probe hidden units must be >= 1")


@dataclass
class RunConfig:
    preset: str = "custom"
    run_id: str = "run"
    seed: int = 0
    epochs: int = 10
    batch_size: int = 64
    shards: int = 1
    dtype: str = "float32"
    wall_time: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    pipeline: str = ""
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    similarity: str = "dot"
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def validate(self) -> RunConfig:
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.extraction.strategy not in STRATEGIES:
            raise ConfigError(f"extraction strategy must be one of {STRATEGIES}")
        if self.extraction.anchor_mode not in ("all", "sample"):
            raise ConfigError("anchor_mode must be 'all' or 'sample'")
        if self.epochs < 0 or self.batch_size < 2 or self.shards < 1:
            raise ConfigError("epochs >= 0, batch_size >= 2 and shards >= 1 are required")
        if self.shards > self.batch_size:
            raise ConfigError("cannot use more shards than images per batch")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.optimizer.name != "adam":
            raise ConfigError("only the adam optimizer is available")
        self.encoder.validate()
        self.pipeline_obj()
        if self.extraction.strategy == "multiscale":
            depth = len(self.encoder.stage_channels)
            parse_comparison_spec(self.extraction.comparison, depth=depth, seed=self.seed).validate(depth)
        return self

    def pipeline_obj(self) -> Pipeline:
        return parse_pipeline(self.pipeline)

    def copy(self, **changes) -> RunConfig:
        new = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(new, k, v)
        return new


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def preset(name: str) -> RunConfig:
    """Fully explicit desk-scale configuration for a named method."""
    if name == "amdim":
        return RunConfig(
            preset="amdim", run_id="amdim",
            pipeline=amdim_pipeline().to_text(),
            encoder=EncoderConfig(stage_channels=[16, 32, 64], stage_strides=[3, 2, 2], norm="batch",
                                  use_padding=False, embed_dim=64),
            extraction=ExtractionConfig(strategy="multiscale", comparison="amdim"),
            similarity="dot",
            # scores divided by sqrt(embed_dim); unscaled dot products stall at chance
            loss=LossConfig("nce_amdim", temperature=8.0, include_positive_in_denominator=True),
        )
    if name == "cpc":
        return RunConfig(
            preset="cpc", run_id="cpc",
            pipeline=union_pipeline(q=16, overlap=8).to_text(),
            encoder=EncoderConfig(stage_channels=[16, 32, 64], stage_strides=[1, 2, 2], norm="layer",
                                  use_padding=False),
            extraction=ExtractionConfig(strategy="cpc", cpc_offsets=[1, 2], embed_scale=0.1),
            similarity="dot",
            loss=LossConfig("info_nce"),
        )
    if name == "simclr":
        return RunConfig(
            preset="simclr", run_id="simclr",
            pipeline=simclr_pipeline().to_text(),
            encoder=EncoderConfig(stage_channels=[16, 32, 64], stage_strides=[2, 2, 2], norm="batch",
                                  use_padding=False),
            extraction=ExtractionConfig(strategy="simclr", head_hidden=None),
            similarity="cosine",
            loss=LossConfig("nt_xent", temperature=0.5),
        )
    if name == "yadim":
        return RunConfig(
            preset="yadim", run_id="yadim",
            pipeline=union_pipeline(q=16, overlap=8).to_text(),
            encoder=EncoderConfig(stage_channels=[16, 32, 64], stage_strides=[1, 2, 2], norm="none",
                                  use_padding=False),
            extraction=ExtractionConfig(strategy="multiscale", comparison="last_only"),
            similarity="dot",
            loss=LossConfig("nce_amdim", include_positive_in_denominator=True),
        )
    if name == "custom":
        return RunConfig(pipeline=amdim_pipeline().to_text())
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


# ---------------------------------------------------------------------------
# INI round trip
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("none", "") else int(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


_PARSERS = {
    "run": {"preset": str, "run_id": str, "seed": int, "epochs": int, "batch_size": int, "shards": int,
            "dtype": str, "wall_time": _bool},
    "data": {"n": int, "classes": int, "nuisance": float, "channels": int, "height": int, "width": int},
    "augment": {"stages": str},
    "encoder": {"stage_channels": _int_list, "blocks_per_stage": _int_list, "stage_strides": _int_list,
                "use_padding": _bool, "norm": str, "kernel": int, "embed_dim": _opt_int,
                "width_multiplier": float, "input_channels": int},
    "extraction": {"strategy": str, "comparison": str, "anchor_mode": str, "cpc_offsets": _int_list,
                   "embed_scale": float, "head_hidden": _opt_int},
    "similarity": {"kind": str},
    "loss": {"kind": str, "temperature": float, "include_positive_in_denominator": _bool},
    "optimizer": {"name": str, "lr": float, "beta1": float, "beta2": float, "eps": float},
    "probe": {"hidden": int, "epochs": int, "lr": float, "batch_size": int},
}


def to_ini(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = {k: _fmt(getattr(cfg, k)) for k in _PARSERS["run"]}
    cp["data"] = {k: _fmt(v) for k, v in asdict(cfg.data).items()}
    cp["augment"] = {"stages": cfg.pipeline}
    cp["encoder"] = {k: _fmt(getattr(cfg.encoder, k)) for k in _PARSERS["encoder"]}
    cp["extraction"] = {k: _fmt(v) for k, v in asdict(cfg.extraction).items()}
    cp["similarity"] = {"kind": cfg.similarity}
    cp["loss"] = {k: _fmt(getattr(cfg.loss, k)) for k in _PARSERS["loss"]}
    cp["optimizer"] = {k: _fmt(v) for k, v in asdict(cfg.optimizer).items()}
    cp["probe"] = {k: _fmt(v) for k, v in asdict(cfg.probe).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def from_ini(text: str, preset_name: str | None = None) -> RunConfig:
    """Parse an INI config on top of its preset (or ``preset_name`` when given)."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for section in cp.sections():
        if section not in _PARSERS:
            raise ConfigError(f"unknown section [{section}]")
        unknown = set(cp[section]) - set(_PARSERS[section])
        if unknown:
            raise ConfigError(f"[{section}]: unknown keys {sorted(unknown)}")
    name = preset_name or (cp["run"].get("preset") if cp.has_section("run") else None) or "custom"
    cfg = preset(name)

    def get(section, key):
        try:
            return _PARSERS[section][key](cp[section][key])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None

    for section in cp.sections():
        for key in cp[section]:
            value = get(section, key)
            if section == "run":
                setattr(cfg, key, value)
            elif section == "data":
                setattr(cfg.data, key, value)
            elif section == "augment":
                cfg.pipeline = value
            elif section == "encoder":
                setattr(cfg.encoder, key, value)
            elif section == "extraction":
                setattr(cfg.extraction, key, value)
            elif section == "similarity":
                cfg.similarity = value
            elif section == "loss":
                setattr(cfg.loss, key, value)
            elif section == "optimizer":
                setattr(cfg.optimizer, key, value)
            elif section == "probe":
                setattr(cfg.probe, key, value)
    cfg.preset = name
    n_stages = len(cfg.encoder.stage_channels)
    for attr, default in (("blocks_per_stage", 1), ("stage_strides", 1)):
        if len(getattr(cfg.encoder, attr)) != n_stages and not cp.has_option("encoder", attr):
            setattr(cfg.encoder, attr, [default] * n_stages)
    flag = cfg.loss.include_positive_in_denominator
    if cp.has_option("loss", "kind") and not cp.has_option("loss", "include_positive_in_denominator"):
        flag = None
    cfg.loss = LossConfig(cfg.loss.kind, cfg.loss.temperature, flag)
    return cfg.validate()


def load(path) -> RunConfig:
    with open(path) as fh:
        return from_ini(fh.read())


def field_names() -> dict[str, list[str]]:
    return {s: list(keys) for s, keys in _PARSERS.items()}


__all__ = [
    "RunConfig", "DataConfig", "ExtractionConfig", "OptimizerConfig", "ProbeConfig", "ConfigError",
    "preset", "to_ini", "from_ini", "load", "PRESETS",
]
