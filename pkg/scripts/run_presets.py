"""Run every experiment preset into one run directory, then print the summaries.

    python3 scripts/run_presets.py runs/desk -c configs/desk.ini -j 1

Finished cells are reused, so an interrupted run can simply be restarted.
"""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

from sivforecast import config as C
from sivforecast import experiments as X

PRESETS = ("main_table", "carry_forward", "sign_flip", "ablations", "noise_sweep")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("-c", "--config", type=Path)
    ap.add_argument("-j", "--jobs", type=int, default=1)
    ap.add_argument("-p", "--preset", action="append", choices=PRESETS)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = C.load(args.config) if args.config else C.RunConfig()
    for preset in args.preset or PRESETS:
        summary = X.run_experiment(cfg, args.out, preset, jobs=args.jobs)
        print(f"\n== {preset}")
        print(X.format_summary(summary, cfg))


if __name__ == "__main__":
    main()
