"""Per-iteration trace CSV and its JSON sidecar.

The first column of every row is the schema version. Floats are written
with ``repr`` so that reading them back yields the identical double, which
is what makes offline replay byte-exact.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import Detection
from .errors import TraceFormatError
from .models import RobotModel
from .sim import IterationTrace

TRACE_SCHEMA_VERSION = 1


def _f(v: float) -> str:
    return repr(float(v))


def _vec(v) -> list[str]:
    return [_f(a) for a in np.asarray(v, dtype=float).ravel()]


@dataclass(frozen=True)
class TraceLayout:
    """Column names for one robot model."""

    state_dim: int
    control_dim: int
    sensors: tuple[tuple[str, int], ...]

    @classmethod
    def for_model(cls, model: RobotModel) -> "TraceLayout":
        return cls(model.state_dim, model.control_dim,
                   tuple((s.name, s.reading_dim) for s in model.sensors))

    def input_columns(self) -> list[str]:
        cols = ["schema_version", "k", "t"]
        cols += [f"x_true_{i}" for i in range(self.state_dim)]
        cols += [f"u_planned_{i}" for i in range(self.control_dim)]
        cols += [f"u_executed_{i}" for i in range(self.control_dim)]
        cols += [f"d_a_true_{i}" for i in range(self.control_dim)]
        for name, dim in self.sensors:
            cols += [f"z_true_{name}_{i}" for i in range(dim)]
        for name, dim in self.sensors:
            cols += [f"z_{name}_{i}" for i in range(dim)]
        for name, dim in self.sensors:
            cols += [f"d_s_true_{name}_{i}" for i in range(dim)]
        return cols

    def detection_columns(self) -> list[str]:
        cols = []
        for name, dim in self.sensors:
            cols += [f"dhat_s_{name}_{i}" for i in range(dim)]
        cols += [f"dhat_a_{i}" for i in range(self.control_dim)]
        cols += ["sensor_stat", "sensor_threshold", "sensor_mode",
                 "actuator_stat", "actuator_threshold", "actuator_mode",
                 "selected_mode", "confirmed_sensors", "b_s", "b_a",
                 "sensor_alarm", "actuator_alarm"]
        cols += [f"x_hat_{i}" for i in range(self.state_dim)]
        return cols

    def columns(self) -> list[str]:
        return self.input_columns() + self.detection_columns()


def detection_fields(det: Detection, layout: TraceLayout) -> list[str]:
    out: list[str] = []
    for name, _ in layout.sensors:
        out += _vec(det.residuals[name])
    out += _vec(det.d_a)
    out += [
        _f(det.sensor_stat), _f(det.sensor_threshold), det.sensor_mode,
        _f(det.actuator_stat), _f(det.actuator_threshold), det.actuator_mode,
        det.selected_mode, ";".join(det.confirmed_sensors),
        str(int(det.b_s)), str(int(det.b_a)),
        str(int(det.sensor_alarm)), str(int(det.actuator_alarm)),
    ]
    out += _vec(det.x)
    return out


def trace_row(tr: IterationTrace, layout: TraceLayout) -> list[str]:
    row = [str(TRACE_SCHEMA_VERSION), str(tr.k), _f(tr.t)]
    row += _vec(tr.x_true) + _vec(tr.u_planned) + _vec(tr.u_executed) + _vec(tr.d_a_true)
    for z in tr.z_true:
        row += _vec(z)
    for z in tr.z_delivered:
        row += _vec(z)
    for d in tr.d_s_true:
        row += _vec(d)
    return row + detection_fields(tr.detection, layout)


def write_trace(
    path: str | Path,
    traces: Sequence[IterationTrace],
    layout: TraceLayout,
    meta: dict,
) -> Path:
    """Write the CSV and ``<path minus .csv>.meta.json``; returns the sidecar path."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(layout.columns())
        for tr in traces:
            writer.writerow(trace_row(tr, layout))
    side = sidecar_path(path)
    body = dict(meta)
    body["schema_version"] = TRACE_SCHEMA_VERSION
    body["rows"] = len(traces)
    body["layout"] = {"state_dim": layout.state_dim, "control_dim": layout.control_dim,
                      "sensors": [list(s) for s in layout.sensors]}
    side.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return side


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    stem = path.name[:-4] if path.name.endswith(".csv") else path.name
    return path.with_name(stem + ".meta.json")


@dataclass
class LoadedTrace:
    meta: dict
    layout: TraceLayout
    header: list[str]
    rows: list[dict[str, str]]

    def control(self, i: int) -> np.ndarray:
        r = self.rows[i]
        return np.array([float(r[f"u_planned_{j}"]) for j in range(self.layout.control_dim)])

    def readings(self, i: int) -> list[np.ndarray]:
        r = self.rows[i]
        return [np.array([float(r[f"z_{name}_{j}"]) for j in range(dim)])
                for name, dim in self.layout.sensors]


def read_trace(path: str | Path) -> LoadedTrace:
    """Load a trace and check it against its sidecar.

    Raises
    ------
    TraceFormatError
        Missing sidecar, unknown schema, wrong header, or a row count that
        disagrees with the sidecar (truncation).
    """
    path = Path(path)
    side = sidecar_path(path)
    try:
        meta = json.loads(side.read_text())
    except OSError as exc:
        raise TraceFormatError(f"cannot read sidecar {side}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"sidecar {side} is not valid JSON: {exc}") from exc
    if meta.get("schema_version") != TRACE_SCHEMA_VERSION:
        raise TraceFormatError(f"unsupported trace schema {meta.get('schema_version')!r}")
    try:
        lay = meta["layout"]
        layout = TraceLayout(int(lay["state_dim"]), int(lay["control_dim"]),
                             tuple((str(n), int(d)) for n, d in lay["sensors"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceFormatError(f"sidecar layout is malformed: {exc}") from exc
    try:
        text = path.read_text()
    except OSError as exc:
        raise TraceFormatError(f"cannot read trace {path}: {exc.strerror}") from exc
    if text and not text.endswith("\n"):
        raise TraceFormatError("trace does not end with a newline (truncated?)")
    reader = csv.reader(text.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise TraceFormatError("trace is empty") from None
    if header != layout.columns():
        raise TraceFormatError("trace header does not match the recorded layout")
    rows = []
    for lineno, raw in enumerate(reader, start=2):
        if len(raw) != len(header):
            raise TraceFormatError(f"line {lineno}: expected {len(header)} fields, got {len(raw)}")
        if raw[0] != str(TRACE_SCHEMA_VERSION):
            raise TraceFormatError(f"line {lineno}: unknown schema version {raw[0]!r}")
        rows.append(dict(zip(header, raw)))
    if len(rows) != meta.get("rows"):
        raise TraceFormatError(f"trace has {len(rows)} rows but the sidecar records {meta.get('rows')}")
    return LoadedTrace(meta, layout, header, rows)


def replay_trace(loaded: LoadedTrace, cfg) -> int:
    """Re-run the detector over the recorded ``(u, z)`` and compare outputs.

    ``cfg`` is the :class:`~rids.scenario.ScenarioConfig` the trace was
    produced with. Returns the number of verified rows.

    Raises
    ------
    ReplayMismatch
        At the first iteration whose detection fields differ from the file.
    """
    from .detector import rids_init, rids_step
    from .errors import ReplayMismatch
    from .sim import default_initial_cov

    model = cfg.build_model()
    if TraceLayout.for_model(model) != loaded.layout:
        raise TraceFormatError("trace layout does not match the scenario's robot model")
    state = rids_init(model, cfg.rids, cfg.initial_state_vector(), default_initial_cov(model), cfg.dt)
    columns = loaded.layout.detection_columns()
    for i, row in enumerate(loaded.rows):
        det = rids_step(state, loaded.control(i), loaded.readings(i))
        for col, value in zip(columns, detection_fields(det, loaded.layout)):
            if row[col] != value:
                raise ReplayMismatch(int(row["k"]), col, row[col], value)
    return len(loaded.rows)
