"""On-disk artifacts of a run: ``log.csv``, ``summary.json`` and ``plotdata/``."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from platoonsec.engine import ScenarioConfig, SimLog, SummaryReport

PER_VEHICLE = ("pos", "v", "a", "u", "h", "mode", "rc", "gamma", "v2x_flag")
_INT_FIELDS = {"mode", "v2x_flag"}


class LogFormatError(ValueError):
    pass


def log_header(n_vehicles: int) -> list:
    cols = ["t"]
    for i in range(n_vehicles):
        cols.extend(f"{name}_{i}" for name in PER_VEHICLE)
    cols.append("v2i_flag")
    return cols


def _fmt(x: float) -> str:
    # repr is the shortest string that parses back to the same double
    return repr(float(x))


def write_log(log: SimLog, path):
    N = log.n_vehicles
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(log_header(N))
        for k in range(log.n_rows):
            row = [_fmt(log.t[k])]
            for i in range(N):
                row.extend((
                    _fmt(log.pos[k, i]), _fmt(log.v[k, i]), _fmt(log.a[k, i]), _fmt(log.u[k, i]),
                    _fmt(log.h[k, i]), str(int(log.mode[k, i])), _fmt(log.rc[k, i]),
                    _fmt(log.gamma[k, i]), str(int(log.v2x_flag[k, i])),
                ))
            row.append(str(int(log.v2i_flag[k])))
            writer.writerow(row)


def read_log(path) -> SimLog:
    """Parse ``log.csv``; errors name the offending row (1 = header)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LogFormatError(f"{path}: empty log") from None
        if not header or header[0] != "t" or header[-1] != "v2i_flag" or (len(header) - 2) % len(PER_VEHICLE):
            raise LogFormatError(f"{path}: row 1: unrecognised header")
        N = (len(header) - 2) // len(PER_VEHICLE)
        if header != log_header(N):
            raise LogFormatError(f"{path}: row 1: unexpected column names")
        rows = []
        for rowno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                last = f"row {rowno - 1} (t={rows[-1][0]!r})" if rows else "the header"
                raise LogFormatError(
                    f"{path}: row {rowno}: expected {len(header)} columns, got {len(row)}; last good row is {last}"
                )
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                last = f"row {rowno - 1}" if rows else "the header"
                raise LogFormatError(f"{path}: row {rowno}: non-numeric value; last good row is {last}") from None
    if not rows:
        raise LogFormatError(f"{path}: no data rows")
    data = np.array(rows)
    t = data[:, 0]
    if np.any(np.diff(t) <= 0):
        bad = int(np.argmax(np.diff(t) <= 0)) + 3
        raise LogFormatError(f"{path}: row {bad}: time is not increasing")
    block = data[:, 1:-1].reshape(len(rows), N, len(PER_VEHICLE))
    fields = {}
    for j, name in enumerate(PER_VEHICLE):
        col = block[:, :, j]
        fields[name] = col.astype(int) if name in _INT_FIELDS else col.copy()
    return SimLog(
        t=t.copy(),
        pos=fields["pos"],
        v=fields["v"],
        a=fields["a"],
        u=fields["u"],
        h=fields["h"],
        mode=fields["mode"],
        rc=fields["rc"],
        gamma=fields["gamma"],
        v2x_flag=fields["v2x_flag"],
        v2i_flag=data[:, -1].astype(int),
    )


def mark_aborted(log: SimLog, config: ScenarioConfig) -> SimLog:
    """A log read from disk is an aborted run when it stops before the horizon."""
    log.aborted = log.n_rows < config.n_steps + 1
    return log


def summary_json(report: SummaryReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def write_summary(report: SummaryReport, path):
    Path(path).write_text(summary_json(report), encoding="utf-8")


def _series(path: Path, t, values, prefix: str, vehicles):
    header = "t," + ",".join(f"{prefix}_{i}" for i in vehicles)
    table = np.column_stack([t, values[:, list(vehicles)]])
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.10g")


def write_plotdata(log: SimLog, directory):
    """Wide CSVs (time plus one column per vehicle) for external plotting."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    everyone = range(log.n_vehicles)
    followers = range(1, log.n_vehicles)
    _series(out / "velocity.csv", log.t, log.v, "v", everyone)
    _series(out / "position.csv", log.t, log.pos, "pos", everyone)
    _series(out / "headway.csv", log.t, log.h, "h", everyone)
    _series(out / "residual_ds.csv", log.t, log.rc, "rc", followers)
    _series(out / "residual_is.csv", log.t, log.gamma, "gamma", followers)
    return sorted(p.name for p in out.iterdir())
