"""Command line entry point: ``apnlab <subcommand> [flags]``.

Subcommands: pretrain, probe, ablate, grad-check, oracle.  Output goes to
``--out``, else ``$APN_LAB_OUT``, else ``./out``.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import time

from .. import oracles
from .config import ConfigError, RunConfig, from_ini, preset
from .data import from_config
from .train import default_out_dir, load_model, pretrain

log = logging.getLogger("apnlab")

ABLATION_STRATEGIES = ("last_only", "amdim", "same_level", "last_random")
ABLATION_COLUMNS = ("strategy", "pairs", "epochs", "first_loss", "final_loss", "probe_accuracy", "wall_ms")


def _load_config(args) -> RunConfig:
    if args.config:
        with open(args.config) as fh:
            cfg = from_ini(fh.read(), preset_name=args.preset)
    else:
        cfg = preset(args.preset or "yadim")
    for attr in ("epochs", "seed", "shards", "batch_size"):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, attr, value)
    if getattr(args, "lr", None) is not None:
        cfg.optimizer.lr = args.lr
    if getattr(args, "n", None) is not None:
        cfg.data.n = args.n
    if getattr(args, "no_wall_time", False):
        cfg.wall_time = False
    return cfg.validate()


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=("amdim", "cpc", "simclr", "yadim", "custom"))
    p.add_argument("--config", help="INI run config; keys override the preset")
    p.add_argument("--out", help="output directory (default $APN_LAB_OUT or ./out)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--n", type=int, help="synthetic dataset size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apnlab", description="contrastive self-supervised learning lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain an encoder without labels")
    _common(p)
    p.add_argument("--shards", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--no-wall-time", action="store_true", help="write wall_ms = 0 for byte-stable metrics")

    p = sub.add_parser("probe", help="train the MLP probe on a frozen encoder")
    _common(p)
    p.add_argument("--checkpoint", help="pretrained checkpoint (default <out>/ckpt.bin)")
    p.add_argument("--random", action="store_true", help="probe a freshly initialised encoder instead")
    p.add_argument("--probe-epochs", type=int)

    p = sub.add_parser("ablate", help="pretrain once per comparison strategy")
    _common(p)
    p.add_argument("--strategies", default=",".join(ABLATION_STRATEGIES),
                   help="comma separated comparison strategies")
    p.add_argument("--probe", action="store_true", help="also probe each pretrained encoder")

    p = sub.add_parser("grad-check", help="finite-difference check of every loss")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("oracle", help="run every reference oracle")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _out(args) -> str:
    return args.out or default_out_dir()


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    data = from_config(cfg.data, seed=cfg.seed)
    result = pretrain(cfg, data, _out(args), resume=args.resume)
    print(f"final loss {result.epoch_losses[-1] if result.epoch_losses else float('nan'):.6f}")
    print(f"wrote {result.metrics_path} and {result.checkpoint_path}")
    return 0


def cmd_probe(args) -> int:
    from .probe import probe

    cfg = _load_config(args)
    if args.probe_epochs is not None:
        cfg.probe.epochs = args.probe_epochs
    data = from_config(cfg.data, seed=cfg.seed)
    if args.random:
        from .model import ContrastiveModel

        model = ContrastiveModel(cfg, data.shape)
    else:
        path = args.checkpoint or os.path.join(_out(args), "ckpt.bin")
        model = load_model(cfg, data.shape, path)
    res = probe(model, data, cfg.probe, seed=cfg.seed)
    print(f"test accuracy {res.accuracy:.4f} (val {res.val_accuracy:.4f}, best epoch {res.best_epoch})")
    return 0


def cmd_ablate(args) -> int:
    from .probe import probe

    base = _load_config(args)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if base.encoder.embed_dim is None:
        # cross-layer comparisons need a shared width
        base.encoder.embed_dim = base.encoder.widths[-1]
    data = from_config(base.data, seed=base.seed)
    out_dir = _out(args)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "ablation.csv")
    rows = []
    for strat in strategies:
        cfg = base.copy(run_id=f"ablate-{strat}")
        cfg.extraction.strategy = "multiscale"
        cfg.extraction.comparison = strat
        cfg.validate()
        t0 = time.perf_counter()
        res = pretrain(cfg, data, os.path.join(out_dir, f"ablate-{strat}"))
        acc = probe(res.model, data, cfg.probe, seed=cfg.seed).accuracy if args.probe else float("nan")
        from ..extraction import parse_comparison_spec

        pairs = parse_comparison_spec(strat, depth=len(cfg.encoder.stage_channels), seed=cfg.seed).to_text()
        losses = res.epoch_losses or [float("nan")]
        rows.append((strat, pairs, cfg.epochs, repr(losses[0]), repr(losses[-1]), repr(acc),
                     int((time.perf_counter() - t0) * 1000)))
        print(f"{strat:12s} pairs={pairs:24s} final_loss={losses[-1]:.5f}"
              + (f" probe={acc:.4f}" if args.probe else ""))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        writer.writerows(rows)
    print(f"wrote {path}")
    return 0 if all(math.isfinite(float(r[4])) for r in rows) else 1


def _report(checks) -> int:
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} passed")
    return 1 if failed else 0


def cmd_grad_check(args) -> int:
    return _report(oracles.gradient_suite(instances=args.instances, seed=args.seed))


def cmd_oracle(args) -> int:
    return _report(oracles.all_checks(seed=args.seed))


COMMANDS = {"pretrain": cmd_pretrain, "probe": cmd_probe, "ablate": cmd_ablate,
            "grad-check": cmd_grad_check, "oracle": cmd_oracle}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"apnlab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
