"""Series container, CSV schema, scaling, sum-total SIV inputs, windows and splits."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CSV_HEADER = ("t", "glucose", "carbs", "bolus")
SIV_NAMES = ("carbs", "bolus")


class DataError(ValueError):
    """Input data violates a precondition (schema, length, sign)."""


class SchemaError(DataError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.row = row
        self.column = column


@dataclass
class IndividualSeries:
    """Aligned 5-minute channels for one individual.

    ``target`` holds glucose with NaN for missing readings; ``sivs`` is (L, S)
    with one column per name in ``siv_names``.
    """

    ident: str
    target: np.ndarray
    sivs: np.ndarray
    siv_names: tuple[str, ...] = SIV_NAMES
    t: np.ndarray | None = None

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        self.sivs = np.asarray(self.sivs, dtype=np.float64).reshape(len(self.target), -1)
        if self.t is None:
            self.t = np.arange(len(self.target), dtype=np.int64)
        if self.sivs.shape[1] != len(self.siv_names):
            raise DataError(f"{self.sivs.shape[1]} SIV columns but names {self.siv_names}")

    def __len__(self) -> int:
        return len(self.target)

    def segment(self, start: int, stop: int) -> IndividualSeries:
        return replace(self, target=self.target[start:stop].copy(),
                       sivs=self.sivs[start:stop].copy(), t=self.t[start:stop].copy())

    def without_sivs(self) -> IndividualSeries:
        """The same series with every SIV value set to zero."""
        return replace(self, sivs=np.zeros_like(self.sivs))


# ------------------------------------------------------------------- CSV

def write_csv(series: IndividualSeries, path: str | Path | None = None) -> str:
    if series.siv_names != SIV_NAMES:
        raise DataError(f"CSV schema needs SIV columns {SIV_NAMES}, got {series.siv_names}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for t, g, (carbs, bolus) in zip(series.t, series.target, series.sivs):
        w.writerow([int(t), "" if math.isnan(g) else repr(float(g)),
                    repr(float(carbs)), repr(float(bolus))])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_csv(path: str | Path, ident: str | None = None) -> IndividualSeries:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(h.strip() for h in rows[0]) != CSV_HEADER:
        raise SchemaError(f"header must be {','.join(CSV_HEADER)}", row=1)
    ts, gs, ss = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise SchemaError(f"expected 4 fields, got {len(row)}", row=lineno)
        try:
            t = int(row[0])
        except ValueError:
            raise SchemaError(f"bad integer {row[0]!r}", row=lineno, column="t") from None
        vals = []
        for col, raw, default in zip(CSV_HEADER[1:], row[1:], (math.nan, 0.0, 0.0)):
            raw = raw.strip()
            if raw == "":
                vals.append(default)
                continue
            try:
                v = float(raw)
            except ValueError:
                raise SchemaError(f"bad number {raw!r}", row=lineno, column=col) from None
            if col != "glucose" and (v < 0 or not math.isfinite(v)):
                raise SchemaError(f"value {v} must be finite and nonnegative", row=lineno, column=col)
            vals.append(v)
        if ts and t != ts[-1] + 1:
            raise SchemaError(f"t must increase by 1, got {t} after {ts[-1]}", row=lineno, column="t")
        ts.append(t)
        gs.append(vals[0])
        ss.append(vals[1:])
    return IndividualSeries(ident or path.stem, np.array(gs), np.array(ss).reshape(-1, 2),
                            SIV_NAMES, np.array(ts, dtype=np.int64))


# --------------------------------------------------------------- scaling

@dataclass(frozen=True)
class ScaleSpec:
    target: float = 400.0
    sivs: tuple[float, ...] = (200.0, 50.0)

    def __post_init__(self):
        if self.target <= 0 or any(d <= 0 for d in self.sivs):
            raise DataError(f"scale divisors must be positive: {self}")


def scale(series: IndividualSeries, spec: ScaleSpec) -> IndividualSeries:
    """Divide each channel by its divisor; no clamping."""
    if len(spec.sivs) != series.sivs.shape[1]:
        raise DataError(f"{len(spec.sivs)} SIV divisors for {series.sivs.shape[1]} channels")
    return replace(series, target=series.target / spec.target,
                   sivs=series.sivs / np.asarray(spec.sivs))


def unscale(series: IndividualSeries, spec: ScaleSpec) -> IndividualSeries:
    return replace(series, target=series.target * spec.target,
                   sivs=series.sivs * np.asarray(spec.sivs))


# ------------------------------------------------------------- sum total

def sum_total(siv_window: np.ndarray) -> np.ndarray:
    """Running total of the SIV inside the window, along the first axis."""
    siv_window = np.asarray(siv_window, dtype=np.float64)
    if np.any(siv_window < 0):
        raise DataError("sum_total: SIV values must be nonnegative")
    return np.cumsum(siv_window, axis=0)


# --------------------------------------------------------------- windows

@dataclass
class WindowSet:
    """Stride-1 windows: ``inputs`` (N, T, 1+S) with the target in channel 0."""

    inputs: np.ndarray
    labels: np.ndarray
    starts: np.ndarray
    ident: str = ""
    siv_names: tuple[str, ...] = SIV_NAMES

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def target(self) -> np.ndarray:
        return self.inputs[:, :, 0]

    @property
    def sivs(self) -> np.ndarray:
        return self.inputs[:, :, 1:]

    def siv_present(self) -> np.ndarray:
        """(N, S) flags: SIV ``s`` has a nonzero value somewhere in window ``n``."""
        return np.any(self.sivs != 0, axis=1)

    def subset(self, mask: np.ndarray) -> WindowSet:
        return replace(self, inputs=self.inputs[mask], labels=self.labels[mask],
                       starts=self.starts[mask])

    def with_siv_window(self) -> WindowSet:
        return self.subset(self.siv_present().any(axis=1))


def make_windows(series: IndividualSeries, T: int, h: int, carry_forward: bool = True) -> WindowSet:
    """All stride-1 windows of length ``T + h``, dropping those with missing target.

    With ``carry_forward`` each SIV channel of the input part is replaced by its
    running total inside the window.
    """
    L = len(series)
    if T < 1 or h < 1:
        raise DataError(f"need T >= 1 and h >= 1, got T={T}, h={h}")
    if L < T + h:
        raise DataError(f"series {series.ident!r} has {L} points, needs at least T+h={T + h}")
    n = L - (T + h) + 1
    idx = np.arange(n)[:, None] + np.arange(T + h)[None, :]
    tgt = series.target[idx]
    keep = ~np.isnan(tgt).any(axis=1)
    sivs = series.sivs[idx[:, :T]]
    if np.any(sivs < 0):
        raise DataError("SIV values must be nonnegative")
    if carry_forward:
        sivs = np.cumsum(sivs, axis=1)
    inputs = np.concatenate([tgt[:, :T, None], sivs], axis=2)
    return WindowSet(inputs[keep], tgt[keep, T:], series.t[:n][keep], series.ident,
                     series.siv_names)


# ---------------------------------------------------------------- splits

@dataclass
class Splits:
    train: IndividualSeries
    val: IndividualSeries
    test: IndividualSeries
    bounds: tuple[int, int, int, int] = field(default=(0, 0, 0, 0))


def split(series: IndividualSeries, fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
          min_length: int = 1) -> Splits:
    """Contiguous chronological train/val/test segments; remainder goes to train."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise DataError(f"split fractions must be nonnegative and sum to 1: {fractions}")
    L = len(series)
    n_val = math.floor(fractions[1] * L + 1e-9)
    n_test = math.floor(fractions[2] * L + 1e-9)
    n_train = L - n_val - n_test
    bounds = (0, n_train, n_train + n_val, L)
    parts = [series.segment(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    for name, part in zip(("train", "validation", "test"), parts):
        if len(part) < min_length:
            raise DataError(f"{name} segment of {series.ident!r} has {len(part)} points, "
                            f"needs at least {min_length}")
    return Splits(*parts, bounds=bounds)


def split_windows(series: IndividualSeries, T: int, h: int, carry_forward: bool = True,
                  fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
                  ) -> tuple[WindowSet, WindowSet, WindowSet]:
    s = split(series, fractions, min_length=T + h)
    return tuple(make_windows(part, T, h, carry_forward) for part in (s.train, s.val, s.test))
