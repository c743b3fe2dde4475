"""Metrics and trajectory CSV output.

Files start with the resolved run configuration as ``#`` comment lines so every
artifact carries its own provenance.
"""

import csv
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

METRICS_HEADER = ["epoch", "wall_time_s", "train_loss", "test_loss", "nfe_fwd", "nfe_bwd", "lu_count"]


@dataclass
class MetricsRow:
    """One epoch of training metrics."""

    epoch: int
    wall_time_s: float
    train_loss: float
    test_loss: Optional[float]
    nfe_fwd: int
    nfe_bwd: int
    lu_count: int

    def as_csv(self) -> List[str]:
        """Format the row; an absent test loss is written as '-'."""
        return [
            str(self.epoch),
            f"{self.wall_time_s:.6f}",
            f"{self.train_loss:.17g}",
            "-" if self.test_loss is None else f"{self.test_loss:.17g}",
            str(self.nfe_fwd),
            str(self.nfe_bwd),
            str(self.lu_count),
        ]


def _write_provenance(handle, provenance: Iterable[str]) -> None:
    for line in provenance:
        handle.write(f"# {line}\n")


class MetricsWriter:
    """Append-only metrics CSV; each recorded row is flushed immediately."""

    def __init__(self, output_file: str, provenance: Sequence[str] = ()):
        self.output_file = Path(output_file)
        self.output_file.parent.mkdir(parents=True, exist_ok=True)
        self.rows: List[MetricsRow] = []
        self._handle = self.output_file.open("w", encoding="utf-8", newline="")
        _write_provenance(self._handle, provenance)
        self._writer = csv.writer(self._handle, lineterminator="\n")
        self._writer.writerow(METRICS_HEADER)
        self._handle.flush()

    def record(self, row: MetricsRow) -> None:
        """Write one epoch row."""
        self.rows.append(row)
        self._writer.writerow(row.as_csv())
        self._handle.flush()

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: str) -> List[MetricsRow]:
    """Read a metrics CSV back, skipping provenance comments."""
    rows: List[MetricsRow] = []
    with open(path, encoding="utf-8", newline="") as handle:
        lines = [line for line in handle if not line.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader, None)
    if header != METRICS_HEADER:
        raise ValueError(f"Unexpected metrics header in {path}: {header}")
    for rec in reader:
        rows.append(MetricsRow(
            epoch=int(rec[0]),
            wall_time_s=float(rec[1]),
            train_loss=float(rec[2]),
            test_loss=None if rec[3] == "-" else float(rec[3]),
            nfe_fwd=int(rec[4]),
            nfe_bwd=int(rec[5]),
            lu_count=int(rec[6]),
        ))
    return rows


def write_trajectory_csv(
    path: str,
    times: Sequence[float],
    field: np.ndarray,
    provenance: Sequence[str] = (),
) -> None:
    """
    Write a space-time field as CSV: one row per snapshot, first column the time.

    Args:
        path: Output file
        times: Snapshot times, length n_times
        field: Array of shape (n_times, d)
        provenance: Comment lines for the header
    """
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    field = np.asarray(field)
    with out.open("w", encoding="utf-8", newline="") as handle:
        _write_provenance(handle, provenance)
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["t"] + [f"x{j}" for j in range(field.shape[1])])
        for t, row in zip(times, field):
            writer.writerow([f"{t:.10g}"] + [f"{v:.17g}" for v in row])


def row_tuple(row: MetricsRow) -> tuple:
    """Row without the wall-clock column, for determinism comparisons."""
    values = astuple(row)
    return values[:1] + values[2:]


def write_table_csv(
    path: str,
    header: Sequence[str],
    rows: Iterable[Sequence],
    provenance: Sequence[str] = (),
) -> None:
    """Plain CSV table with a provenance header, used by the convergence and NFE reports."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8", newline="") as handle:
        _write_provenance(handle, provenance)
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([f"{v:.17g}" if isinstance(v, float) else str(v) for v in row])
