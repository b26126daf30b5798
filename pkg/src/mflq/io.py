"""Problem files, result documents and CSV export."""

from __future__ import annotations

import datetime as _dt
import json
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .model import COEFFICIENTS, ProblemSpec, _LAYOUT

CSV_FORMAT = "%.17e"


class ProblemFileError(ValueError):
    """A problem file is unreadable or does not match the schema."""


def problem_schema() -> dict:
    text = resources.files("mflq").joinpath("problem.schema.json").read_text()
    return json.loads(text)


def problem_from_dict(doc: dict, steps: int | None = None) -> ProblemSpec:
    """Build a spec from a parsed problem document.

    ``steps`` overrides the grid: the spec is first built on the file's grid
    and then resampled, so per-cell paths keep their meaning.
    """
    try:
        jsonschema.validate(doc, problem_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ProblemFileError(f"field {where}: {exc.message}") from None
    coeffs = doc.get("coefficients", {})
    spec = ProblemSpec.build(
        horizon=doc["horizon"], steps=doc["steps"], n=doc["n"], m=doc["m"],
        gamma1=doc.get("gamma1", 0.0), name=doc.get("name", "problem"),
        **{k: coeffs[k] for k in COEFFICIENTS if k in coeffs})
    if steps is not None and steps != spec.grid.steps:
        spec = spec.regrid(steps)
    return spec


def load_problem(path, steps: int | None = None) -> ProblemSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ProblemFileError(f"cannot read problem file {path}: {exc}") from None
    return problem_from_dict(doc, steps)


def problem_to_dict(spec: ProblemSpec) -> dict:
    """Document form of a spec; paths that do not change over time are written once."""
    coeffs = {}
    for key, (kind, _, _) in _LAYOUT.items():
        arr = np.asarray(getattr(spec, key))
        if kind in ("path", "vpath") and np.all(arr == arr[:1]):
            arr = arr[0]
        coeffs[key] = arr.tolist()
    return {"name": spec.name, "horizon": spec.grid.horizon, "steps": spec.grid.steps,
            "n": spec.n, "m": spec.m, "gamma1": spec.gamma1, "coefficients": coeffs}


def save_problem(spec: ProblemSpec, path) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(spec), indent=2) + "\n")


def header_line() -> str:
    """The single timestamped comment line that opens every CSV."""
    from . import __version__

    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return f"# generated {stamp} by mflq {__version__}"


def write_csv(path, columns: list[str], data, int_columns=()) -> None:
    """Write rows in full double precision; ``int_columns`` are column indices written as integers."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    ints = set(int_columns)
    fmt = ["%d" if i in ints else CSV_FORMAT for i in range(data.shape[1])]
    with open(path, "w", newline="") as fh:
        fh.write(header_line() + "\n")
        fh.write(",".join(columns) + "\n")
        np.savetxt(fh, data, fmt=fmt, delimiter=",")


def write_text_table(path, columns: list[str], rows: list[list]) -> None:
    """Plain CSV for mixed text rows (check summaries), with the same header line."""
    import csv

    with open(path, "w", newline="") as fh:
        fh.write(header_line() + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def read_csv_body(path) -> list[str]:
    """CSV lines without the timestamped header (for comparisons)."""
    lines = Path(path).read_text().splitlines()
    return [ln for ln in lines if not ln.startswith("# generated")]


def flat_names(prefix: str, shape: tuple) -> list[str]:
    if len(shape) == 0:
        return [prefix]
    idx = np.indices(shape).reshape(len(shape), -1).T
    return [prefix + "_" + "".join(str(i) for i in ix) for ix in idx]


def to_jsonable(obj):
    """Recursively convert numpy values for ``json.dumps``."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(to_jsonable(doc), indent=2, sort_keys=True) + "\n")
