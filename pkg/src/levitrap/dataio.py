"""CSV and binary readers/writers for traces, profiles and result tables.

Trace CSVs carry units in their header, one ``<name>_<unit>`` per column,
for example ``t_s,z_m``. An optional first comment line
``# dt_s=<float> t0_s=<float>`` pins the sampling grid so that a round trip
is bit-exact. Profiles use ``position_m,intensity``. The binary profile
layout is little-endian: uint64 count, float64 pixel pitch (m), then
``count`` float64 intensities. JSON files hold the same information as one
object per series; Python's float repr makes both round trips exact.
"""

from __future__ import annotations

import csv
import json
import re
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .detection import IntensityProfile
from .spectral import AllanResult, FrequencySeries
from .traces import TimeTrace

KNOWN_UNITS = {"s", "m", "V", "V2", "m2", "J", "kT0", "Hz", "1", "N", "K", "px"}
_COLUMN = re.compile(r"^(?P<name>[A-Za-z][A-Za-z0-9]*(?:_[A-Za-z0-9]+)*?)_(?P<unit>[A-Za-z0-9]+)$")
_META = re.compile(r"^#\s*dt_s=(?P<dt>\S+)\s+t0_s=(?P<t0>\S+)\s*$")
_BIN_HEADER = struct.Struct("<Qd")


class ParseError(ValueError):
    """A data file does not follow its documented layout."""

    def __init__(self, message, path=None, line=None, column=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.path, self.line, self.column = path, line, column


def _fmt(x):
    return "%.17g" % x


def split_column(header: str):
    """``'z_m'`` -> ``('z', 'm')``; raises when no known unit suffix is present."""
    m = _COLUMN.match(header.strip())
    if not m or m.group("unit") not in KNOWN_UNITS:
        raise ValueError(f"column {header!r} has no recognised unit suffix "
                         f"(expected <name>_<unit>, unit in {sorted(KNOWN_UNITS)})")
    return m.group("name"), m.group("unit")


def load_mapping(path) -> dict:
    """Header-mapping file: JSON object from source column names to ``<name>_<unit>``."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"unreadable header mapping: {exc}", path) from exc
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        raise ParseError("header mapping must be an object of strings", path)
    return data


def _read_rows(path):
    lines = Path(path).read_text().splitlines()
    meta = None
    start = 0
    if lines and lines[0].startswith("#"):
        m = _META.match(lines[0])
        if m:
            meta = (float(m.group("dt")), float(m.group("t0")))
        start = 1
    rows = list(csv.reader(lines[start:]))
    return rows, meta, start


def _parse_numbers(rows, path, first_line, ncol):
    out = np.empty((len(rows), ncol))
    for i, row in enumerate(rows):
        if len(row) != ncol:
            raise ParseError(f"expected {ncol} fields, found {len(row)}", path, first_line + i)
        for j, field in enumerate(row):
            try:
                out[i, j] = float(field)
            except ValueError:
                raise ParseError(f"not a number: {field!r}", path, first_line + i, j + 1) from None
    return out


def import_trace(path, fmt: Optional[str] = None, mapping: Optional[dict] = None
                 ) -> Union[TimeTrace, IntensityProfile]:
    """Read a trace or profile file.

    ``fmt`` is ``"csv"``, ``"json"`` or ``"bin"`` (inferred from the suffix when
    omitted). A CSV whose first column is ``position_m`` becomes an
    :class:`IntensityProfile`; otherwise the first column must be ``t_s``
    and the second any ``<name>_<unit>`` value column, giving a
    :class:`TimeTrace`. An optional ``valid_1`` column carries the
    illumination mask.
    """
    path = Path(path)
    fmt = fmt or {".bin": "bin", ".raw": "bin", ".json": "json"}.get(path.suffix, "csv")
    if fmt == "bin":
        return read_profile_binary(path)
    if fmt == "json":
        return _import_json(path, mapping)
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    rows, meta, skip = _read_rows(path)
    if not rows:
        raise ParseError("empty file", path, 1)
    header = [h.strip() for h in rows[0]]
    if mapping:
        header = [mapping.get(h, h) for h in header]
    first_data = skip + 2
    if header[:1] == ["position_m"]:
        if len(header) != 2 or header[1] not in ("intensity", "intensity_1"):
            raise ParseError("profile CSV must have columns position_m,intensity", path, skip + 1)
        data = _parse_numbers(rows[1:], path, first_data, 2)
        return _profile_from_columns(data[:, 0], data[:, 1], path)
    names = []
    for j, h in enumerate(header):
        try:
            names.append(split_column(h))
        except ValueError as exc:
            raise ParseError(str(exc), path, skip + 1, j + 1) from None
    if names[0] != ("t", "s"):
        raise ParseError("first column must be t_s", path, skip + 1, 1)
    if len(names) not in (2, 3) or (len(names) == 3 and names[2] != ("valid", "1")):
        raise ParseError("expected columns t_s,<name>_<unit>[,valid_1]", path, skip + 1)
    data = _parse_numbers(rows[1:], path, first_data, len(names))
    if data.shape[0] < 2:
        raise ParseError("a trace needs at least two samples", path, first_data)
    t = data[:, 0]
    if meta is not None:
        dt, t0 = meta
        # the column only has to agree with the pinned grid to its own precision
        grid = t0 + dt * np.arange(t.size)
        tol = 1e-6 * dt + 16 * np.finfo(float).eps * np.max(np.abs(grid))
        uniform = dt > 0 and np.all(np.abs(t - grid) <= tol)
    else:
        dt = (t[-1] - t[0]) / (t.size - 1)
        t0 = t[0]
        uniform = dt > 0 and np.allclose(np.diff(t), dt, rtol=1e-6, atol=0)
    if not uniform:
        raise ParseError("time column is not uniformly sampled", path, first_data)
    valid = data[:, 2].astype(bool) if len(names) == 3 else None
    name, unit = names[1]
    return TimeTrace(data[:, 1], dt, unit, t0, name, valid)


def _import_json(path, mapping=None):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, exc.lineno, exc.colno) from None
    if not isinstance(data, dict):
        raise ParseError("expected a JSON object", path, 1)
    if "intensities" in data:
        try:
            return IntensityProfile(np.asarray(data["intensities"], dtype=float),
                                    float(data["pixel_pitch_m"]), float(data.get("origin_px", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad profile object: {exc}", path) from None
    column = data.get("column")
    if mapping and column in mapping:
        column = mapping[column]
    if not isinstance(column, str):
        raise ParseError("trace object needs a 'column' naming <name>_<unit>", path)
    try:
        name, unit = split_column(column)
    except ValueError as exc:
        raise ParseError(str(exc), path) from None
    try:
        values = np.asarray(data["values"], dtype=float)
        valid = data.get("valid")
        return TimeTrace(values, float(data["dt_s"]), unit, float(data.get("t0_s", 0.0)), name,
                         None if valid is None else np.asarray(valid, dtype=bool))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad trace object: {exc}", path) from None


def _profile_from_columns(pos, inten, path=None):
    if pos.size < 2:
        raise ParseError("a profile needs at least two pixels", path)
    pitch = (pos[-1] - pos[0]) / (pos.size - 1)
    if not pitch > 0 or not np.allclose(np.diff(pos), pitch, rtol=1e-6, atol=0):
        raise ParseError("pixel positions are not uniformly spaced", path)
    return IntensityProfile(inten, pitch, pos[0] / pitch)


def _column_name(trace: TimeTrace):
    name = re.sub(r"[^A-Za-z0-9_]+", "", trace.name or "value").strip("_") or "value"
    column = f"{name}_{trace.unit}"
    split_column(column)  # refuses unit tags the reader would reject
    return column


def series_to_json(obj) -> dict:
    """JSON-ready dict for a trace, profile, frequency series or Allan result."""
    if isinstance(obj, TimeTrace):
        out = {"column": _column_name(obj), "dt_s": obj.dt, "t0_s": obj.t0,
               "values": obj.values.tolist()}
        if obj.valid is not None:
            out["valid"] = obj.valid.astype(int).tolist()
        return out
    if isinstance(obj, IntensityProfile):
        return {"pixel_pitch_m": obj.pixel_pitch, "origin_px": obj.origin,
                "intensities": obj.intensities.tolist()}
    if isinstance(obj, FrequencySeries):
        return {"f_nominal_Hz": obj.f_nominal, "t_s": obj.times.tolist(),
                "f_Hz": obj.frequencies.tolist(), "valid_1": obj.valid.astype(int).tolist()}
    if isinstance(obj, AllanResult):
        return {"tau_s": obj.taus.tolist(), "sigma_1": obj.sigma.tolist(),
                "error_1": obj.error.tolist(), "n_intervals_1": obj.n_intervals.tolist()}
    if isinstance(obj, dict):
        return {k: np.asarray(v).tolist() for k, v in obj.items()}
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_series(obj, path, fmt: str = "csv"):
    """Write any series object in ``fmt`` (``csv`` or ``json``); returns the path."""
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(series_to_json(obj)) + "\n")
        return path
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    if isinstance(obj, (TimeTrace, IntensityProfile)):
        return export_trace(obj, path, "csv")
    if isinstance(obj, FrequencySeries):
        return write_frequency_series(obj, path)
    if isinstance(obj, AllanResult):
        return write_allan(obj, path)
    if isinstance(obj, dict):
        return write_table(path, obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def export_trace(obj, path, fmt: str = "csv"):
    """Write a :class:`TimeTrace` (CSV or JSON) or :class:`IntensityProfile`
    (CSV, JSON or binary)."""
    path = Path(path)
    if fmt == "json":
        return write_series(obj, path, "json")
    if isinstance(obj, IntensityProfile):
        if fmt == "bin":
            return write_profile_binary(obj, path)
        with path.open("w", newline="") as fh:
            fh.write("position_m,intensity\n")
            for x, y in zip(obj.positions_m, obj.intensities):
                fh.write(f"{_fmt(x)},{_fmt(y)}\n")
        return path
    if not isinstance(obj, TimeTrace):
        raise TypeError(f"cannot export {type(obj).__name__}")
    if fmt != "csv":
        raise ValueError("traces are exported as CSV or JSON")
    column = _column_name(obj)
    with path.open("w", newline="") as fh:
        fh.write(f"# dt_s={_fmt(obj.dt)} t0_s={_fmt(obj.t0)}\n")
        cols = ["t_s", column] + (["valid_1"] if obj.valid is not None else [])
        fh.write(",".join(cols) + "\n")
        for i, (t, v) in enumerate(zip(obj.times, obj.values)):
            line = f"{_fmt(t)},{_fmt(v)}"
            if obj.valid is not None:
                line += f",{int(obj.valid[i])}"
            fh.write(line + "\n")
    return path


def write_profile_binary(profile: IntensityProfile, path):
    path = Path(path)
    data = np.ascontiguousarray(profile.intensities, dtype="<f8")
    with path.open("wb") as fh:
        fh.write(_BIN_HEADER.pack(data.size, float(profile.pixel_pitch)))
        fh.write(data.tobytes())
    return path


def read_profile_binary(path) -> IntensityProfile:
    raw = Path(path).read_bytes()
    if len(raw) < _BIN_HEADER.size:
        raise ParseError("truncated header", path, column=0)
    count, pitch = _BIN_HEADER.unpack_from(raw)
    body = len(raw) - _BIN_HEADER.size
    if body != 8 * count:
        raise ParseError(f"header announces {count} values but {body} bytes follow",
                         path, column=_BIN_HEADER.size)
    values = np.frombuffer(raw, dtype="<f8", offset=_BIN_HEADER.size).astype(float)
    return IntensityProfile(values, pitch)


def write_frequency_series(series: FrequencySeries, path):
    with Path(path).open("w") as fh:
        fh.write(f"# f_nominal_Hz={_fmt(series.f_nominal)}\n")
        fh.write("t_s,f_Hz,valid_1\n")
        for t, f, ok in zip(series.times, series.frequencies, series.valid):
            fh.write(f"{_fmt(t)},{_fmt(f)},{int(ok)}\n")
    return path


def write_allan(result: AllanResult, path):
    with Path(path).open("w") as fh:
        fh.write("tau_s,sigma_1,error_1,n_intervals_1\n")
        for row in zip(result.taus, result.sigma, result.error, result.n_intervals):
            fh.write(f"{_fmt(row[0])},{_fmt(row[1])},{_fmt(row[2])},{int(row[3])}\n")
    return path


def write_table(path, columns: dict):
    """Write equal-length 1-D arrays as a CSV with the given headers."""
    keys = list(columns)
    arrays = [np.asarray(columns[k]) for k in keys]
    n = {a.size for a in arrays}
    if len(n) > 1:
        raise ValueError("table columns differ in length")
    with Path(path).open("w") as fh:
        fh.write(",".join(keys) + "\n")
        for row in zip(*arrays):
            fh.write(",".join(_fmt(x) if isinstance(x, (float, np.floating)) else str(x)
                              for x in row) + "\n")
    return path


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_table(path) -> dict:
    """Read a numeric CSV table into ``{header: array}``.

    Leading ``#`` comment lines are skipped. Every header must carry a unit
    suffix; the values must all parse as floats.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    skip = 0
    while skip < len(lines) and lines[skip].startswith("#"):
        skip += 1
    rows = list(csv.reader(lines[skip:]))
    if not rows:
        raise ParseError("empty table", path, skip + 1)
    header = [h.strip() for h in rows[0]]
    for j, h in enumerate(header):
        try:
            split_column(h)
        except ValueError as exc:
            raise ParseError(str(exc), path, skip + 1, j + 1) from None
    data = _parse_numbers(rows[1:], path, skip + 2, len(header))
    return {h: data[:, j] for j, h in enumerate(header)}
