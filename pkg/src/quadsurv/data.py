"""Survival datasets: CSV ingestion, standardization, stratified splits.

The CSV schema is a header row containing ``time`` and ``event`` columns;
every remaining column is a covariate, kept in header order.  Floats are
written with ``repr`` so a simulate -> ingest round trip is exact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError, IngestionError

RESERVED_COLUMNS = ("time", "event")


@dataclass
class SurvivalData:
    """Covariates, observed times and event indicators for n subjects."""

    x: np.ndarray
    time: np.ndarray
    event: np.ndarray
    columns: tuple

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.time = np.asarray(self.time, dtype=np.float64)
        self.event = np.asarray(self.event, dtype=np.int64)
        n = len(self.time)
        if self.x.ndim != 2 or self.x.shape[0] != n or len(self.event) != n:
            raise IngestionError(
                f"inconsistent dataset shapes: x {self.x.shape}, "
                f"time {self.time.shape}, event {self.event.shape}")
        if not np.all(np.isfinite(self.x)):
            raise IngestionError("covariates contain non-finite values")
        if np.any(self.time < 0) or not np.all(np.isfinite(self.time)):
            raise IngestionError("observed times must be finite and nonnegative")
        if not np.all((self.event == 0) | (self.event == 1)):
            raise IngestionError("event indicator must be 0 or 1")

    def __len__(self):
        return len(self.time)

    @property
    def n_features(self):
        return self.x.shape[1]

    @property
    def censoring_rate(self):
        return float(1.0 - self.event.mean())

    def subset(self, idx) -> "SurvivalData":
        return SurvivalData(self.x[idx], self.time[idx], self.event[idx], self.columns)


def load_csv(path) -> SurvivalData:
    """Read a survival CSV, validating the schema column by column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        for required in RESERVED_COLUMNS:
            if required not in header:
                raise IngestionError(f"{path}: missing required column {required!r}")
        covariate_cols = [c for c in header if c not in RESERVED_COLUMNS]
        if not covariate_cols:
            raise IngestionError(f"{path}: no covariate columns")
        idx = {c: header.index(c) for c in header}
        rows = list(reader)
    if not rows:
        raise IngestionError(f"{path}: no data rows")

    n = len(rows)
    x = np.empty((n, len(covariate_cols)))
    time = np.empty(n)
    event = np.empty(n, dtype=np.int64)
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise IngestionError(f"{path}: row {i + 2} has {len(row)} fields, "
                                 f"expected {len(header)}")
        for j, c in enumerate(covariate_cols):
            cell = row[idx[c]]
            if cell == "":
                raise IngestionError(f"{path}: missing value in column {c!r}, row {i + 2}")
            try:
                x[i, j] = float(cell)
            except ValueError:
                raise IngestionError(
                    f"{path}: non-numeric value {cell!r} in column {c!r}, row {i + 2}"
                ) from None
        try:
            time[i] = float(row[idx["time"]])
        except ValueError:
            raise IngestionError(
                f"{path}: non-numeric value in column 'time', row {i + 2}") from None
        cell = row[idx["event"]]
        if cell not in ("0", "1", "0.0", "1.0"):
            raise IngestionError(
                f"{path}: event must be 0 or 1, got {cell!r} in row {i + 2}")
        event[i] = int(float(cell))
    return SurvivalData(x, time, event, tuple(covariate_cols))


def save_csv(data: SurvivalData, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(data.columns) + ["time", "event"])
        for i in range(len(data)):
            row = [repr(float(v)) for v in data.x[i]]
            row.append(repr(float(data.time[i])))
            row.append(str(int(data.event[i])))
            writer.writerow(row)


class Standardizer:
    """Zero-mean unit-variance transform fitted on the training split."""

    def __init__(self, mean=None, scale=None):
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.scale = None if scale is None else np.asarray(scale, dtype=np.float64)

    def fit(self, x) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        self.mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.scale = np.where(std > 0, std, 1.0)
        return self

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def as_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(mean=d["mean"], scale=d["scale"])


def stratified_split(data: SurvivalData, val_fraction: float, rng):
    """Index split stratified by the event indicator.

    Guarantees at least one event in the validation part whenever the data
    contains two or more events.
    """
    n = len(data)
    if n < 2:
        raise DegenerateDataError(f"need at least 2 subjects, got {n}")
    if data.event.sum() == 0:
        raise DegenerateDataError("all subjects are censored; cannot fit")
    event_idx = np.flatnonzero(data.event == 1)
    censor_idx = np.flatnonzero(data.event == 0)
    rng.shuffle(event_idx)
    rng.shuffle(censor_idx)
    n_val_e = int(round(val_fraction * len(event_idx)))
    if len(event_idx) >= 2:
        n_val_e = min(max(n_val_e, 1), len(event_idx) - 1)
    else:
        n_val_e = 0
    n_val_c = int(round(val_fraction * len(censor_idx)))
    n_val_c = min(n_val_c, max(len(censor_idx) - 1, 0))
    val_idx = np.concatenate([event_idx[:n_val_e], censor_idx[:n_val_c]])
    train_idx = np.concatenate([event_idx[n_val_e:], censor_idx[n_val_c:]])
    train_idx.sort()
    val_idx.sort()
    if len(train_idx) == 0 or data.event[train_idx].sum() == 0:
        raise DegenerateDataError("training split has no events after splitting")
    return train_idx, val_idx
