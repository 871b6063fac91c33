"""Command-line front end: simulate | train | evaluate | experiment | report.

Hyperparameters live in an INI file (see ``config.py``); flags only carry
paths, the preset, parallelism and a seed override. ``SIV_SEED`` in the
environment overrides the config seed, ``--seed`` overrides both.

Exit codes: 0 ok, 2 bad config or data schema, 3 file system error,
4 training aborted on a non-finite loss.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import autodiff as ad
from . import datagen as D
from . import evaluation as E
from . import experiments as X
from . import model as M
from . import training as TR
from . import transform as Tr
from .config import PRESETS, RunConfig, load

EXIT_CONFIG, EXIT_IO, EXIT_NAN = 2, 3, 4

log = logging.getLogger("sivforecast")


class Aborted(Exception):
    def __init__(self, message: str, log_path: Path):
        super().__init__(message)
        self.log_path = log_path


def _config(args) -> RunConfig:
    cfg = load(args.config) if args.config else RunConfig()
    seed = args.seed if args.seed is not None else os.environ.get("SIV_SEED")
    if seed is not None:
        seed = int(seed)
        cfg = cfg.with_seed(seed)
        cfg = dataclasses.replace(cfg, experiment=dataclasses.replace(cfg.experiment, seeds=(seed,)))
    return cfg


def _individuals(cfg: RunConfig, data_dir) -> list[Tr.IndividualSeries]:
    return X.load_individuals(cfg, data_dir)


# -------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = D.Manifest(cfg.data.generator, cfg.data.seed)
    for i in range(cfg.data.individuals):
        if cfg.data.generator == "toy":
            gcfg = D.toy_individual(i, cfg.data.seed, length=cfg.data.toy_length)
            series = D.gen_toy(gcfg, f"toy{i:02d}")
        elif cfg.data.generator == "physio":
            gcfg = D.physio_individual(i, cfg.data.seed, days=cfg.data.physio_days)
            series, _ = D.simulate_physio(gcfg, f"patient{i:02d}")
        else:
            raise Tr.DataError("simulate needs generator = toy or physio")
        Tr.write_csv(series, out / f"{series.ident}.csv")
        manifest.individuals.append({
            "ident": series.ident, "file": f"{series.ident}.csv",
            "generator_config": dataclasses.asdict(gcfg), "generator_hash": D.config_hash(gcfg),
            "events": D.event_log(series),
        })
    doc = json.loads(manifest.to_json())
    doc.update(config_hash=cfg.hash, version=__version__)
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    log.info("wrote %d individuals to %s", cfg.data.individuals, out)
    return 0


def _cell(cfg: RunConfig, arch: str, index: int) -> X.Cell:
    d = cfg.data
    return X.normalise(X.Cell(arch, index, cfg.train.seed, d.missing_fraction, d.noise_magnitude,
                              d.corruption_seed, d.carry_forward))


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    for sub in ("models", "logs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    for i, series in enumerate(_individuals(cfg, args.data)):
        cell = _cell(cfg, cfg.model.arch, i)
        train_ws, val_ws, _ = X.prepare(series, cell, cfg)
        stem = f"{series.ident}_{cfg.model.arch}"
        try:
            m, logs = X.fit(cfg.model.arch, train_ws, val_ws, cfg)
        except TR.TrainingAborted as exc:
            path = out / "logs" / f"{stem}.aborted.jsonl"
            (exc.log or TR.TrainLog()).write(path)
            raise Aborted(str(exc), path) from None
        with (out / "logs" / f"{stem}.jsonl").open("w") as fh:
            for tl in logs:
                for r in tl.records:
                    fh.write(json.dumps({**dataclasses.asdict(r), "phase": tl.phase}) + "\n")
        M.save_model(out / "models" / f"{stem}.ckpt", m,
                     {"config_hash": cfg.hash, "seed": cfg.train.seed, "version": __version__,
                      "individual": series.ident})
        log.info("%s: best validation loss %.6g after %d updates", stem, logs[-1].best_val,
                 logs[-1].updates)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    scale = Tr.ScaleSpec()
    rows = []
    for i, series in enumerate(_individuals(cfg, args.data)):
        stem = f"{series.ident}_{cfg.model.arch}"
        m, meta = M.load_model(out / "models" / f"{stem}.ckpt")
        _, _, test_ws = X.prepare(series, _cell(cfg, cfg.model.arch, i), cfg)
        preds = M.predict(m, test_ws.inputs) * scale.target
        labels = test_ws.labels * scale.target
        rep = E.evaluate(series.ident, preds, labels, cfg.experiment.bootstrap, seed=cfg.train.seed)
        rows.append({"arch": cfg.model.arch, **rep.row(), "config_hash": cfg.hash,
                     "seed": cfg.train.seed, "version": __version__})
    (out / "reports").mkdir(parents=True, exist_ok=True)
    path = out / "reports" / f"eval_{cfg.model.arch}.csv"
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows({k: repr(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows)
    print(path)
    return 0


def cmd_experiment(args) -> int:
    cfg = _config(args)
    preset = args.preset or cfg.experiment.preset
    summary = X.run_experiment(cfg, args.out, preset, args.jobs, args.data)
    print(X.format_summary(summary, cfg), end="")
    failures = Path(args.out) / "failures.json"
    return 1 if failures.exists() and json.loads(failures.read_text()) else 0


def cmd_report(args) -> int:
    cfg = _config(args)
    cfg_file = Path(args.out) / "config.ini"
    if not args.config and cfg_file.exists():
        cfg = load(cfg_file)
    presets = [args.preset] if args.preset else [cfg.experiment.preset]
    for preset in presets:
        summary = X.write_report(args.out, preset, cfg)
        print(X.format_summary(summary, cfg), end="")
    return 0


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sivforecast", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("-c", "--config", help="INI run configuration")
        sp.add_argument("-o", "--out", required=True, help="run directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if data:
            sp.add_argument("-d", "--data", help="directory of per-individual CSV files")

    common(sub.add_parser("simulate", help="generate a synthetic dataset"), data=False)
    common(sub.add_parser("train", help="train one architecture per individual"))
    common(sub.add_parser("evaluate", help="score trained checkpoints on the test split"))
    for name in ("experiment", "report"):
        sp = sub.add_parser(name, help=f"{name} for a preset grid")
        common(sp, data=name == "experiment")
        sp.add_argument("-p", "--preset", choices=PRESETS)
        if name == "experiment":
            sp.add_argument("-j", "--jobs", type=int, default=1, help="parallel workers")
    return p


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate,
            "experiment": cmd_experiment, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (M.ConfigError, Tr.DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Aborted as exc:
        print(f"error: {exc}; training log at {exc.log_path}", file=sys.stderr)
        return EXIT_NAN
    except (ad.NumericalError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NAN
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
