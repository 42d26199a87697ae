"""Event-log CSV and JSON document formats.

Event-log CSV layout::

    # window_length=5000.0
    # replications=0,1,2
    replication,stage,module,time
    0,1,1,0.8133450370281523
    ...

The optional comment lines carry the observation window ``T`` (without
it the reader needs ``window_length`` from the caller) and the list of
replication ids, so a replication with no events survives a round trip. Rows are sorted by
(replication, time, stage, module). Times are written with ``repr``, the
shortest decimal string that parses back to the identical double, so
files round-trip bit-exactly. No field is ever quoted.

JSON documents are UTF-8 objects with a ``schema_version`` field.
"""
from __future__ import annotations

import csv
import json
import os
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import EventLog, EventLogError, ModelParams, ModuleRef, SystemTopology

SCHEMA_VERSION = 1
CSV_HEADER = ["replication", "stage", "module", "time"]
_WINDOW_TAG = "# window_length="
_REPS_TAG = "# replications="


class InputError(ValueError):
    """Malformed user input (config field or event-file line)."""


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary sibling file and rename, so readers never see partial output."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from None
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_event_csv(logs: Mapping[int, EventLog]) -> str:
    lines = []
    windows = {lg.window_length for lg in logs.values()}
    if len(windows) == 1:
        lines.append(f"{_WINDOW_TAG}{next(iter(windows))!r}")
    elif len(windows) > 1:
        raise ValueError("all replications in one file must share the window length")
    if logs:
        lines.append(_REPS_TAG + ",".join(str(r) for r in sorted(logs)))
    lines.append(",".join(CSV_HEADER))
    for rep in sorted(logs):
        rows = []
        for m, arr in logs[rep].events.items():
            rows.extend((float(t), m.stage, m.module) for t in arr)
        rows.sort()
        lines.extend(f"{rep},{s},{m},{t!r}" for t, s, m in rows)
    return "\n".join(lines) + "\n"


def write_event_csv(path, logs: Mapping[int, EventLog]) -> None:
    atomic_write_text(path, format_event_csv(logs))


def read_event_csv(path, window_length: float | None = None) -> dict[int, EventLog]:
    """Parse an event-log CSV into ``{replication: EventLog}``.

    Errors name the file line that failed.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise InputError(f"{path}: not UTF-8 text ({exc})") from None
    lines = text.splitlines()
    T = window_length
    start = 0
    if lines and lines[0].startswith(_WINDOW_TAG):
        try:
            file_T = float(lines[0][len(_WINDOW_TAG):])
        except ValueError:
            raise InputError(f"{path}:1: bad window length line {lines[0]!r}") from None
        T = file_T if T is None else T
        start = 1
    declared = []
    if start < len(lines) and lines[start].startswith(_REPS_TAG):
        try:
            declared = [int(x) for x in lines[start][len(_REPS_TAG):].split(",") if x.strip()]
        except ValueError:
            raise InputError(f"{path}:{start + 1}: bad replications line {lines[start]!r}") from None
        start += 1
    if T is None:
        raise InputError(f"{path}: no window length in the file; pass it explicitly")
    if start >= len(lines) or [c.strip() for c in lines[start].split(",")] != CSV_HEADER:
        raise InputError(f"{path}:{start + 1}: expected header {','.join(CSV_HEADER)}")
    per_rep: dict[int, dict[ModuleRef, list]] = {r: {} for r in declared}
    for lineno, row in enumerate(csv.reader(lines[start + 1:]), start=start + 2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 4:
            raise InputError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        try:
            rep, stage, mod = int(row[0]), int(row[1]), int(row[2])
            t = float(row[3])
        except ValueError:
            raise InputError(f"{path}:{lineno}: cannot parse {','.join(row)!r}") from None
        if stage < 1 or mod < 1 or rep < 0:
            raise InputError(f"{path}:{lineno}: stage and module must be >= 1, replication >= 0")
        per_rep.setdefault(rep, {}).setdefault(ModuleRef(stage, mod), []).append(t)
    out = {}
    for rep, ev in sorted(per_rep.items()):
        try:
            out[rep] = EventLog(T, ev)
        except EventLogError as exc:
            raise InputError(f"{path}: replication {rep}: {exc}") from None
    return out


# ---------------------------------------------------------------- JSON

def _np_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dump_json(path, doc: Mapping) -> None:
    body = {"schema_version": SCHEMA_VERSION, **doc}
    atomic_write_text(path, json.dumps(body, indent=2, default=_np_default) + "\n")


def load_json(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise InputError(f"{path}: top level must be a JSON object")
    ver = doc.get("schema_version", SCHEMA_VERSION)
    if ver != SCHEMA_VERSION:
        raise InputError(f"{path}: unsupported schema_version {ver!r} (this build reads {SCHEMA_VERSION})")
    return doc


def field(doc: Mapping, name: str, kind=None, default=..., where: str = "config"):
    """Fetch ``doc[name]`` with a diagnostic naming the field on failure."""
    if name not in doc:
        if default is ...:
            raise InputError(f"{where}: missing field '{name}'")
        return default
    value = doc[name]
    if kind is not None:
        try:
            value = kind(value)
        except (TypeError, ValueError) as exc:
            raise InputError(f"{where}: field '{name}' is invalid: {exc}") from None
    return value


def topology_from_doc(doc: Mapping, where: str = "config") -> SystemTopology:
    raw = field(doc, "topology", where=where)
    if isinstance(raw, Mapping):
        raw = field(raw, "modules_per_stage", where=f"{where}.topology")
    try:
        return SystemTopology(tuple(int(x) for x in raw))
    except (TypeError, ValueError) as exc:
        raise InputError(f"{where}: field 'topology' is invalid: {exc}") from None


def topology_to_doc(topology: SystemTopology) -> list:
    return list(topology.modules_per_stage)


def params_from_doc(doc: Mapping, topology: SystemTopology, where: str = "config") -> ModelParams:
    """Explicit ``{"lambda0": {...}, "alpha": {...}, "beta": {...}}`` or
    ``{"uniform": {"lambda0": x, "alpha": a, "beta": b, "stage1_rate": r}}``."""
    raw = field(doc, "params", where=where)
    if not isinstance(raw, Mapping):
        raise InputError(f"{where}: field 'params' must be an object")
    try:
        if "uniform" in raw:
            u = raw["uniform"]
            return ModelParams.uniform(topology, float(u["lambda0"]), float(u["alpha"]), float(u["beta"]),
                                       stage1_rate=u.get("stage1_rate"))
        return ModelParams.from_dict(raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{where}: field 'params' is invalid: {exc}") from None
