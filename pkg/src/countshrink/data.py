"""Count datasets and CSV ingestion."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    """Malformed or out-of-domain input data."""


@dataclass(frozen=True)
class CountDataset:
    """Nonnegative integer counts with an optional constant exposure.

    ``exposure`` is the common multiplier N in ``y ~ Poi(N theta)``.  It only
    rescales reported rates; the count-level model never sees it.
    """

    y: np.ndarray
    exposure: float | None = None
    labels: tuple | None = None
    _hist: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.ndim != 1 or y.size == 0:
            raise DataError("counts must be a nonempty 1-d array")
        if y.dtype.kind == "f":
            if not np.all(np.isfinite(y)) or np.any(y != np.round(y)):
                raise DataError("counts must be integers")
        elif y.dtype.kind not in "iu":
            raise DataError(f"counts must be integers, got dtype {y.dtype}")
        if np.any(y < 0):
            raise DataError(f"counts must be nonnegative (first bad index {int(np.argmax(y < 0))})")
        y = y.astype(np.int64)
        y.setflags(write=False)
        object.__setattr__(self, "y", y)
        if self.exposure is not None and not (math.isfinite(self.exposure) and self.exposure > 0):
            raise DataError(f"exposure must be positive, got {self.exposure}")
        if self.labels is not None:
            labels = tuple(str(s) for s in self.labels)
            if len(labels) != y.size:
                raise DataError(f"{len(labels)} labels for {y.size} counts")
            object.__setattr__(self, "labels", labels)

    def __len__(self):
        return int(self.y.size)

    def histogram(self):
        """Distinct values and their multiplicities, computed once."""
        if self._hist is None:
            values, counts = np.unique(self.y, return_counts=True)
            object.__setattr__(self, "_hist", (values, counts))
        return self._hist


def as_dataset(counts) -> CountDataset:
    return counts if isinstance(counts, CountDataset) else CountDataset(np.asarray(counts))


def _parse_count(text, row):
    s = text.strip()
    try:
        v = int(s)
    except ValueError:
        try:
            f = float(s)
        except ValueError:
            raise DataError(f"row {row}: count {text!r} is not an integer") from None
        if not (math.isfinite(f) and f == int(f)):
            raise DataError(f"row {row}: count {text!r} is not an integer") from None
        v = int(f)
    if v < 0:
        raise DataError(f"row {row}: count {v} is negative")
    return v


def _parse_exposure(text, row):
    s = text.strip()
    if "=" in s:  # tolerate "N=120152"
        s = s.split("=", 1)[1]
    try:
        v = float(s)
    except ValueError:
        raise DataError(f"row {row}: exposure {text!r} is not a number") from None
    if not (math.isfinite(v) and v > 0):
        raise DataError(f"row {row}: exposure {text!r} must be positive")
    return v


def ingest_csv(
    path,
    count_col: str | int = "count",
    exposure_col: str | int | None = None,
    label_col: str | int | None = None,
    delimiter: str = ",",
    header: bool = True,
) -> CountDataset:
    """Read a count column (and optionally a constant exposure column) from CSV.

    Row numbers in error messages count data records from 1, not counting
    the header.  Without a header, columns are addressed by 0-based
    index.  When a header exists and no label column is named, the first
    non-count, non-exposure column is used as labels.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    if header:
        if not rows:
            raise DataError(f"{path}: empty file")
        names = [h.strip() for h in rows[0]]
        body = rows[1:]

        def col(c, what):
            if isinstance(c, int) or (isinstance(c, str) and c.isdigit() and c not in names):
                return int(c)
            if c not in names:
                raise DataError(f"{what} column {c!r} not found; available columns: {', '.join(names)}")
            return names.index(c)
    else:
        names, body = None, rows

        def col(c, what):
            try:
                return int(c)
            except (TypeError, ValueError):
                raise DataError(f"{what} column must be an index when the file has no header") from None

    ic = col(count_col, "count")
    ie = col(exposure_col, "exposure") if exposure_col is not None else None
    if label_col is not None:
        il = col(label_col, "label")
    elif names is not None:
        il = next((j for j in range(len(names)) if j not in (ic, ie)), None)
    else:
        il = None

    ys, labels, exposures = [], [], []
    for row, rec in enumerate(body, start=1):
        if not rec or all(not f.strip() for f in rec):
            continue
        need = max(j for j in (ic, ie, il) if j is not None)
        if len(rec) <= need:
            raise DataError(f"row {row}: expected at least {need + 1} fields, got {len(rec)}")
        ys.append(_parse_count(rec[ic], row))
        if il is not None:
            labels.append(rec[il].strip())
        if ie is not None:
            exposures.append(_parse_exposure(rec[ie], row))
    if not ys:
        raise DataError(f"{path}: no data rows")
    exposure = None
    if exposures:
        if any(e != exposures[0] for e in exposures):
            raise DataError("heterogeneous exposures are not supported; the model assumes a constant N")
        exposure = exposures[0]
    return CountDataset(np.array(ys, dtype=np.int64), exposure=exposure, labels=tuple(labels) if il is not None else None)
