"""Experiment grids: per-cell training runs persisted to disk, then reduced to tables.

A cell is one trained model: architecture x individual x seed x corruption x
SIV representation, optionally on the SIV-zeroed dataset. Each cell writes
``cells/<key>.json`` (metrics plus per-window final-point errors), a
checkpoint and its training log. Cells that already have a result file are
skipped, so an interrupted run resumes where it stopped.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import datagen as D
from . import evaluation as E
from . import model as M
from . import training as TR
from . import transform as Tr
from .config import RunConfig

log = logging.getLogger(__name__)

RESAMPLING = ("siv_initialize", "siv_finetune")
PRESET_ARCHS = {
    "main_table": ("encdec", "siv_finetune", "siv_initialize", "full_capacity", "linked"),
    "ablations": ("linked", "no_gating", "no_restriction", "no_siv_input", "only_siv_input"),
    "carry_forward": ("linked",),
    "noise_sweep": ("encdec", "linked"),
    "sign_flip": ("linked",),
}
# gated architectures never engage a SIV decoder on zeroed data, and build_model
# draws SIV decoder weights last, so their zeroed-data twin is exactly encdec
GATED = ("linked", "no_restriction", "no_siv_input")


@dataclass(frozen=True)
class Cell:
    arch: str
    individual: int
    seed: int
    missing: float = 0.0
    noise: float = 0.0
    corruption_seed: int = 0
    carry_forward: bool = True
    zeroed: bool = False

    @property
    def key(self) -> str:
        parts = [self.arch, f"i{self.individual}", f"s{self.seed}"]
        if self.missing or self.noise:
            parts.append(f"m{self.missing:g}n{self.noise:g}c{self.corruption_seed}")
        if not self.carry_forward:
            parts.append("nocf")
        if self.zeroed:
            parts.append("zero")
        return "_".join(parts)

    def null_twin(self) -> Cell:
        """The cell whose model is f0 for this one: same settings, SIVs zeroed."""
        arch = "encdec" if self.arch in GATED + RESAMPLING else self.arch
        # with every SIV zeroed, corruption and the SIV representation have no effect
        return replace(self, arch=arch, zeroed=True, missing=0.0, noise=0.0, corruption_seed=0,
                       carry_forward=True)


def normalise(cell: Cell) -> Cell:
    if cell.missing == 0 and cell.noise == 0:
        cell = replace(cell, corruption_seed=0)
    return cell


# ------------------------------------------------------------------ data

def load_individuals(cfg: RunConfig, data_dir: str | Path | None = None) -> list[Tr.IndividualSeries]:
    d = cfg.data
    src = data_dir or (d.csv_dir if d.generator == "csv" else None)
    if src:
        files = sorted(Path(src).glob("*.csv"))
        if not files:
            raise Tr.DataError(f"no CSV files in {src}")
        return [Tr.read_csv(f) for f in files[:d.individuals]]
    return [generate_individual(cfg, i) for i in range(d.individuals)]


def generate_individual(cfg: RunConfig, index: int) -> Tr.IndividualSeries:
    d = cfg.data
    if d.generator == "toy":
        return D.gen_toy(D.toy_individual(index, d.seed, length=d.toy_length), f"toy{index:02d}")
    if d.generator == "physio":
        series, _ = D.simulate_physio(D.physio_individual(index, d.seed, days=d.physio_days),
                                      f"patient{index:02d}")
        return series
    raise Tr.DataError(f"generator {d.generator!r} needs a data directory")


def prepare(series: Tr.IndividualSeries, cell: Cell, cfg: RunConfig,
            scale: Tr.ScaleSpec = Tr.ScaleSpec()) -> tuple[Tr.WindowSet, Tr.WindowSet, Tr.WindowSet]:
    if cell.missing or cell.noise:
        series = D.corrupt(series, D.CorruptionSpec(cell.missing, cell.noise, 0,
                                                    cell.corruption_seed))
    if cell.zeroed:
        series = series.without_sivs()
    return Tr.split_windows(Tr.scale(series, scale), cfg.data.T, cfg.data.h, cell.carry_forward)


# --------------------------------------------------------------- training

def fit(arch: str, train_ws, val_ws, cfg: RunConfig) -> tuple[M.LinkedModel, list[TR.TrainLog]]:
    mc = cfg.model
    base = "encdec" if arch in RESAMPLING else arch
    m = M.build_model(base, cfg.data.T, cfg.data.h, mc.hidden, mc.siv_specs(), mc.num_layers,
                      mc.bidirectional, rng=cfg.train.seed)
    if arch in RESAMPLING:
        # match the proposed model's minimum number of gradient updates
        ref = cfg.train.min_epochs * TR.batches_per_epoch(len(train_ws), cfg.train.batch_size)
        fn = TR.train_siv_initialize if arch == "siv_initialize" else TR.train_siv_finetune
        return fn(m, train_ws, val_ws, cfg.train, reference_updates=ref)
    m, tlog = TR.train(m, train_ws, val_ws, cfg.train)
    return m, [tlog]


def run_cell(cell: Cell, cfg: RunConfig, run_dir: str | Path, series: Tr.IndividualSeries,
             scale: Tr.ScaleSpec = Tr.ScaleSpec()) -> dict:
    run_dir = Path(run_dir)
    out = run_dir / "cells" / f"{cell.key}.json"
    if out.exists():
        return json.loads(out.read_text())
    for sub in ("cells", "models", "logs"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    cfg = replace(cfg, train=replace(cfg.train, seed=cell.seed))
    started = time.perf_counter()
    train_ws, val_ws, test_ws = prepare(series, cell, cfg, scale)
    m, logs = fit(cell.arch, train_ws, val_ws, cfg)
    log_path = run_dir / "logs" / f"{cell.key}.jsonl"
    with log_path.open("w") as fh:
        for tl in logs:
            for r in tl.records:
                fh.write(json.dumps({**asdict(r), "phase": tl.phase}) + "\n")
    M.save_model(run_dir / "models" / f"{cell.key}.ckpt", m,
                 {"config_hash": cfg.hash, "seed": cell.seed, "version": __version__})
    preds = M.predict(m, test_ws.inputs) * scale.target
    labels = test_ws.labels * scale.target
    errors = preds[:, -1] - labels[:, -1]
    rep = E.evaluate(series.ident, preds, labels, cfg.experiment.bootstrap, seed=cell.seed)
    result = {
        "cell": asdict(cell), "key": cell.key, "individual_id": series.ident,
        "config_hash": cfg.hash, "version": __version__,
        **{k: v for k, v in rep.row().items() if not k.startswith("usage")},
        "updates": logs[-1].updates, "best_val": logs[-1].best_val,
        "epochs": sum(len(tl.records) for tl in logs),
        "seconds": time.perf_counter() - started,
        "final_errors": errors.tolist(),
    }
    if M.mechanisms(m.arch).signed:
        flipped = M.predict(M.flip_restriction_sign(m), test_ws.inputs) * scale.target
        result["flip_rmse"], result["flip_mae"] = E.final_point_errors(flipped, labels)
    tmp = out.with_suffix(".tmp")
    tmp.write_text(json.dumps(result))
    tmp.replace(out)
    failed = out.with_suffix(".failed")
    if failed.exists():
        failed.unlink()
    return result


def _run_one(args) -> tuple[str, dict | None, str | None]:
    cell, cfg, run_dir, data_dir = args
    try:
        series = _series_for(cfg, cell.individual, data_dir)
        return cell.key, run_cell(cell, cfg, run_dir, series), None
    except Exception as exc:  # persisted as a failure marker, the grid goes on
        marker = Path(run_dir) / "cells" / f"{cell.key}.failed"
        marker.parent.mkdir(parents=True, exist_ok=True)
        marker.write_text(traceback.format_exc())
        return cell.key, None, f"{type(exc).__name__}: {exc}"


_SERIES_CACHE: dict = {}


def _series_for(cfg: RunConfig, index: int, data_dir) -> Tr.IndividualSeries:
    key = (cfg.data.generator, cfg.data.seed, cfg.data.toy_length, cfg.data.physio_days,
           str(data_dir or cfg.data.csv_dir), index)
    if key not in _SERIES_CACHE:
        if data_dir or cfg.data.generator == "csv":
            _SERIES_CACHE[key] = load_individuals(cfg, data_dir)[index]
        else:
            _SERIES_CACHE[key] = generate_individual(cfg, index)
    return _SERIES_CACHE[key]


# ------------------------------------------------------------------ grids

def preset_cells(cfg: RunConfig, preset: str | None = None) -> list[Cell]:
    """Every cell the preset needs, zeroed-data twins included, without duplicates."""
    ex = cfg.experiment
    preset = preset or ex.preset
    archs = ex.archs or PRESET_ARCHS[preset]
    inds = range(cfg.data.individuals)
    cells: list[Cell] = []
    for seed in ex.seeds:
        for i in inds:
            if preset == "noise_sweep":
                levels = [(m, 0.0) for m in ex.missing_levels]
                levels += [(0.0, n) for n in ex.noise_levels if n]
                for arch in archs:
                    for miss, noise in levels:
                        for cs in range(ex.corruption_seeds):
                            cells.append(Cell(arch, i, seed, miss, noise, cs))
            elif preset == "carry_forward":
                for arch in archs:
                    cells += [Cell(arch, i, seed), Cell(arch, i, seed, carry_forward=False)]
            else:
                for arch in archs:
                    cells.append(Cell(arch, i, seed))
    if ex.usage and preset in ("main_table", "ablations"):
        cells += [c.null_twin() for c in cells]
    seen, out = set(), []
    for c in map(normalise, cells):
        if c.key not in seen:
            seen.add(c.key)
            out.append(c)
    return out


def run_cells(cells: list[Cell], cfg: RunConfig, run_dir: str | Path, jobs: int = 1,
              data_dir: str | Path | None = None) -> dict[str, dict]:
    run_dir = Path(run_dir)
    (run_dir / "cells").mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(cfg.to_ini())
    todo = [(c, cfg, run_dir, data_dir) for c in cells]
    results, failures = {}, {}
    if jobs <= 1:
        outcomes = map(_run_one, todo)
    else:
        pool = ProcessPoolExecutor(max_workers=jobs)
        outcomes = pool.map(_run_one, todo)
    for key, res, err in outcomes:
        if err is None:
            results[key] = res
            log.info("cell %s done", key)
        else:
            failures[key] = err
            log.error("cell %s failed: %s", key, err)
    if jobs > 1:
        pool.shutdown()
    if failures:
        (run_dir / "failures.json").write_text(json.dumps(failures, indent=1))
    return results


def run_experiment(cfg: RunConfig, run_dir: str | Path, preset: str | None = None,
                   jobs: int = 1, data_dir: str | Path | None = None) -> list[dict]:
    """Train every missing cell of ``preset`` and write its report tables."""
    preset = preset or cfg.experiment.preset
    cells = preset_cells(cfg, preset)
    run_cells(cells, cfg, run_dir, jobs, data_dir)
    return write_report(run_dir, preset, cfg)


# ---------------------------------------------------------------- reports

CELL_COLUMNS = ("preset", "arch", "individual", "seed", "missing", "noise", "corruption_seed",
                "carry_forward", "n_windows", "rmse", "rmse_lo", "rmse_hi", "mae", "mae_lo",
                "mae_hi", "usage_rmse", "usage_mae", "flip_rmse", "clarke_A", "clarke_B",
                "clarke_C", "clarke_D", "clarke_E", "updates", "epochs", "config_hash")
SUMMARY_COLUMNS = ("preset", "arch", "seed", "missing", "noise", "carry_forward", "n_individuals",
                   "rmse", "rmse_lo", "rmse_hi", "mae", "mae_lo", "mae_hi", "usage_rmse",
                   "usage_mae", "flip_rmse")


def load_cells(run_dir: str | Path) -> dict[str, dict]:
    out = {}
    for p in sorted((Path(run_dir) / "cells").glob("*.json")):
        res = json.loads(p.read_text())
        out[res["key"]] = res
    return out


def cell_rows(run_dir: str | Path, preset: str, cfg: RunConfig) -> list[dict]:
    """One row per non-twin cell of ``preset``, with usage filled from the twin."""
    store = load_cells(run_dir)
    rows = []
    for cell in preset_cells(cfg, preset):
        if cell.zeroed or cell.key not in store:
            continue
        res = store[cell.key]
        row = {c: res.get(c, math.nan) for c in CELL_COLUMNS}
        row.update(preset=preset, arch=cell.arch, individual=res["individual_id"], seed=cell.seed,
                   missing=cell.missing, noise=cell.noise, corruption_seed=cell.corruption_seed,
                   carry_forward=cell.carry_forward)
        twin = store.get(normalise(cell.null_twin()).key)
        if twin is not None:
            row["usage_rmse"] = twin["rmse"] - res["rmse"]
            row["usage_mae"] = twin["mae"] - res["mae"]
        rows.append(row)
    return rows


def summarise(rows: list[dict]) -> list[dict]:
    """Unweighted means over individuals (and corruption seeds) per group."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        k = (r["preset"], r["arch"], r["seed"], r["missing"], r["noise"], r["carry_forward"])
        groups.setdefault(k, []).append(r)
    out = []
    for k, rs in groups.items():
        row = dict(zip(("preset", "arch", "seed", "missing", "noise", "carry_forward"), k))
        row["n_individuals"] = len({r["individual"] for r in rs})
        for col in SUMMARY_COLUMNS[7:]:
            vals = [float(r[col]) for r in rs]
            row[col] = float(np.mean(vals)) if vals else math.nan
        out.append(row)
    return out


def write_report(run_dir: str | Path, preset: str, cfg: RunConfig) -> list[dict]:
    run_dir = Path(run_dir)
    rows = cell_rows(run_dir, preset, cfg)
    summary = summarise(rows)
    rep = run_dir / "reports"
    rep.mkdir(parents=True, exist_ok=True)
    _write_csv(rep / f"{preset}_cells.csv", CELL_COLUMNS, rows)
    _write_csv(rep / f"{preset}_summary.csv", SUMMARY_COLUMNS, summary)
    (rep / f"{preset}_summary.txt").write_text(format_summary(summary, cfg))
    return summary


def _write_csv(path: Path, columns, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r.get(c, "")) for c in columns})


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def format_summary(summary: list[dict], cfg: RunConfig) -> str:
    lines = [f"config {cfg.hash}  version {__version__}", ""]
    hdr = f"{'arch':<16}{'seed':>5}{'miss':>6}{'noise':>6}{'cf':>4}  {'rMSE [95% CI]':<22}" \
          f"{'MAE':>7}{'usage':>8}"
    lines.append(hdr)
    for r in sorted(summary, key=lambda r: (r["arch"], r["seed"], r["missing"], r["noise"])):
        ci = f"{r['rmse']:.2f} [{r['rmse_lo']:.1f},{r['rmse_hi']:.1f}]"
        lines.append(f"{r['arch']:<16}{r['seed']:>5}{r['missing']:>6.1f}{r['noise']:>6.1f}"
                     f"{'y' if r['carry_forward'] else 'n':>4}  {ci:<22}{r['mae']:>7.2f}"
                     f"{r['usage_rmse']:>8.2f}")
    return "\n".join(lines) + "\n"
