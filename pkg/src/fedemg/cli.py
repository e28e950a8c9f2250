"""Command-line entry point: ``fedemg <stage> [--config FILE] [--out DIR] [--seed N] [--workers N]``."""
from __future__ import annotations

import argparse
import logging
import sys
import time

from . import pipeline
from .config import config_help, load_config
from .errors import FedEMGError

STAGES = {
    "synth": "generate synthetic subject sessions",
    "open-loop": "Local / FedAvg / Per-FedAvg over intra- and cross-subject folds",
    "closed-loop": "simulated co-adaptive trials (Local, sequential Per-FedAvg, Static)",
    "attack": "decoder linkage attack on every snapshot set",
    "analyze": "distance-to-final and PCA tables",
    "all": "synth, open-loop, closed-loop, attack and analyze in sequence",
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fedemg",
        description="Federated EMG cursor-decoder experiments on synthetic subjects.",
        epilog="config keys (flat 'key = value' file, '#' comments):\n" + config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = ap.add_subparsers(dest="stage", required=True, metavar="stage")
    for name, help in STAGES.items():
        sp = sub.add_parser(name, help=help, description=help)
        sp.add_argument("--config", help="config file")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--workers", type=int, help="worker processes (overrides the config)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(stage: str, cfg) -> None:
    if stage == "synth":
        pipeline.stage_synth(cfg)
    elif stage == "open-loop":
        pipeline.stage_open_loop(cfg)
    elif stage == "closed-loop":
        pipeline.stage_closed_loop(cfg)
    elif stage == "attack":
        for name, k, acc, shuf, p0, band in pipeline.stage_attack(cfg):
            print(f"{name}: accuracy {acc:.3f} (shuffled {shuf:.3f}, chance {p0:.3f} +/- {band:.3f})")
    elif stage == "analyze":
        pipeline.stage_analyze(cfg)
    else:
        pipeline.run_all(cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, out=args.out, seed=args.seed, workers=args.workers)
        t0 = time.time()
        run(args.stage, cfg)
        logging.getLogger("fedemg").info("%s finished in %.1f s", args.stage, time.time() - t0)
    except FedEMGError as exc:
        print(f"fedemg {args.stage}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"fedemg {args.stage}: I/O error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
