"""Problem instances for conditional mean-field LQ control.

A problem is described by coefficient paths on a uniform time grid. Every
path is piecewise constant on grid cells and the value on cell ``k`` is the
value at its left endpoint ``t_k``. Paths are stored with a leading cell axis
of length ``steps``; node-indexed views (length ``steps + 1``) repeat the last
cell at the terminal node.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

SYMMETRY_RTOL = 1e-12

# name -> (kind, row dim, col dim); kinds: "path" (per cell), "const", "vpath", "vec"
_LAYOUT = {
    "A": ("path", "n", "n"),
    "Atil": ("path", "n", "n"),
    "C": ("path", "n", "n"),
    "Ctil": ("path", "n", "n"),
    "B": ("path", "n", "m"),
    "Btil": ("path", "n", "m"),
    "D": ("path", "n", "m"),
    "Dtil": ("path", "n", "m"),
    "Q": ("path", "n", "n"),
    "Qtil": ("path", "n", "n"),
    "R": ("path", "m", "m"),
    "Rtil": ("path", "m", "m"),
    "G": ("const", "n", "n"),
    "Gtil": ("const", "n", "n"),
    "b": ("vpath", "n", None),
    "sigma": ("vpath", "n", None),
    "gamma2": ("vec", "n", None),
    "x0": ("vec", "n", None),
}
COEFFICIENTS = tuple(_LAYOUT)
SYMMETRIC = ("Q", "Qtil", "R", "Rtil", "G", "Gtil")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k * horizon / steps`` on ``[0, horizon]``."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 2:
            raise ValueError(f"steps must be an integer >= 2, got {self.steps}")
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def step_size(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return self.step_size * np.arange(self.steps + 1)

    def index_of(self, t: float) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a grid node."""
        x = t / self.step_size
        k = int(round(x))
        if abs(x - k) > 1e-9 or not 0 <= k <= self.steps:
            raise ValueError(f"time {t} is not a node of {self}")
        return k

    def cells_of(self, length: float) -> int:
        """Number of whole cells spanned by ``length``; raises if misaligned."""
        x = length / self.step_size
        k = int(round(x))
        if abs(x - k) > 1e-9 or k < 1:
            raise ValueError(f"length {length} is not a positive multiple of h={self.step_size}")
        return k


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """All coefficient and cost-weight paths of one LQ instance.

    Matrix paths have shape ``(steps, r, c)``, vector paths ``(steps, n)``,
    ``G``/``Gtil`` are ``(n, n)`` and ``gamma2``/``x0`` are ``(n,)``.  The
    constructor does not check shapes; use :func:`validate`.  Use
    :meth:`build` for convenient construction from constants or callables.
    """

    grid: TimeGrid
    n: int
    m: int
    A: np.ndarray
    Atil: np.ndarray
    B: np.ndarray
    Btil: np.ndarray
    C: np.ndarray
    Ctil: np.ndarray
    D: np.ndarray
    Dtil: np.ndarray
    Q: np.ndarray
    Qtil: np.ndarray
    R: np.ndarray
    Rtil: np.ndarray
    G: np.ndarray
    Gtil: np.ndarray
    b: np.ndarray
    sigma: np.ndarray
    gamma2: np.ndarray
    x0: np.ndarray
    gamma1: float = 0.0
    name: str = field(default="problem")

    @classmethod
    def build(cls, horizon: float = 1.0, steps: int = 100, n: int = 1, m: int = 1,
              gamma1: float = 0.0, name: str = "problem", **coeffs: Any) -> "ProblemSpec":
        """Build a spec; each coefficient may be a number, an array or a callable.

        Numbers and constant arrays are broadcast to every cell.  An array with
        a leading axis of length ``steps`` is taken as per-cell values.  A
        callable ``f(t)`` is sampled at the left endpoint of each cell.
        Missing coefficients are zero.
        """
        unknown = set(coeffs) - set(COEFFICIENTS)
        if unknown:
            raise TypeError(f"unknown coefficients: {sorted(unknown)}")
        grid = TimeGrid(horizon, steps)
        dims = {"n": n, "m": m}
        values = {}
        for key, (kind, r, c) in _LAYOUT.items():
            shape = (dims[r],) if c is None else (dims[r], dims[c])
            values[key] = _expand(coeffs.get(key), kind, shape, grid)
        return cls(grid=grid, n=n, m=m, gamma1=float(gamma1), name=name, **values)

    def replace(self, **changes) -> "ProblemSpec":
        """Copy with some fields replaced (coefficients given as full arrays)."""
        return dataclasses.replace(self, **changes)

    def coefficients(self) -> dict[str, np.ndarray]:
        return {key: getattr(self, key) for key in COEFFICIENTS}

    def regrid(self, steps: int) -> "ProblemSpec":
        """Resample every path onto a grid with ``steps`` cells.

        The new cell ``k`` takes the value of the old cell containing its left
        endpoint, so the piecewise-constant function of time is preserved
        whenever the new grid refines the old one.
        """
        new = TimeGrid(self.grid.horizon, steps)
        idx = (np.arange(steps) * self.grid.steps) // steps
        changes = {}
        for key, (kind, _, _) in _LAYOUT.items():
            arr = getattr(self, key)
            changes[key] = arr[idx] if kind in ("path", "vpath") else arr
        return dataclasses.replace(self, grid=new, **changes)

    def scaled(self, alpha: float) -> "ProblemSpec":
        """Multiply every coefficient (and gamma1) by ``alpha``."""
        changes = {k: alpha * v for k, v in self.coefficients().items()}
        return dataclasses.replace(self, gamma1=alpha * self.gamma1, **changes)

    def __add__(self, other: "ProblemSpec") -> "ProblemSpec":
        if other.grid != self.grid:
            raise ValueError("specs live on different grids")
        changes = {k: v + getattr(other, k) for k, v in self.coefficients().items()}
        return dataclasses.replace(self, gamma1=self.gamma1 + other.gamma1, **changes)


def _expand(value, kind: str, shape: tuple, grid: TimeGrid) -> np.ndarray:
    N = grid.steps
    if value is None:
        value = 0.0
    if callable(value):
        value = np.array([np.asarray(value(t), dtype=float) for t in grid.nodes[:-1]])
    arr = np.asarray(value, dtype=float)
    if kind in ("const", "vec"):
        return np.array(np.broadcast_to(arr, shape)) if arr.ndim == 0 else arr
    if arr.ndim == 0:
        return np.full((N,) + shape, float(arr))
    if arr.ndim == len(shape):
        return np.repeat(arr[None], N, axis=0)
    return arr


def nodes_view(path: np.ndarray) -> np.ndarray:
    """Node-indexed view of a per-cell path: length ``steps + 1``."""
    return np.concatenate([path, path[-1:]], axis=0)


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class ValidationIssue:
    field: str
    kind: str  # "shape", "nonfinite", "asymmetric", "grid", "scalar"
    message: str
    cell: int | None = None


@dataclass
class ValidationReport:
    issues: list[ValidationIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def fields(self) -> set[str]:
        return {i.field for i in self.issues}

    def __str__(self) -> str:
        if self.ok:
            return "problem is well-formed"
        return "\n".join(f"{i.field}: {i.message}" for i in self.issues)


def validate(spec: ProblemSpec) -> ValidationReport:
    """List every violated invariant of ``spec``; an empty report means well-formed."""
    issues = []
    N = spec.grid.steps
    dims = {"n": spec.n, "m": spec.m}
    for key, (kind, r, c) in _LAYOUT.items():
        arr = np.asarray(getattr(spec, key))
        inner = (dims[r],) if c is None else (dims[r], dims[c])
        expected = (N,) + inner if kind in ("path", "vpath") else inner
        if arr.shape != expected:
            issues.append(ValidationIssue(
                key, "shape", f"dimension mismatch: expected shape {expected}, got {arr.shape}"))
            continue
        bad = ~np.isfinite(arr)
        if bad.any():
            where = np.argwhere(bad)[0]
            cell = int(where[0]) if kind in ("path", "vpath") else None
            issues.append(ValidationIssue(key, "nonfinite", "non-finite entries", cell))
            continue
        if key in SYMMETRIC:
            mats = arr if kind == "path" else arr[None]
            defect = np.linalg.norm(mats - np.swapaxes(mats, -1, -2), axis=(-2, -1))
            scale = np.linalg.norm(mats, axis=(-2, -1))
            bad_cells = np.flatnonzero(defect > SYMMETRY_RTOL * scale)
            if bad_cells.size:
                cell = int(bad_cells[0]) if kind == "path" else None
                where = f" at cell {cell}" if cell is not None else ""
                issues.append(ValidationIssue(
                    key, "asymmetric",
                    f"not symmetric{where} ({bad_cells.size} offending cell(s))", cell))
    if not np.isfinite(spec.gamma1):
        issues.append(ValidationIssue("gamma1", "nonfinite", "gamma1 must be finite"))
    return ValidationReport(issues)


def require_valid(spec: ProblemSpec) -> None:
    report = validate(spec)
    if not report.ok:
        raise ValueError(f"invalid problem '{spec.name}':\n{report}")


# ---------------------------------------------------------------------------
# Derived coefficients


@dataclass(frozen=True, eq=False)
class AggregatedCoeffs:
    """Sums of state and mean-field coefficients (per-cell paths)."""

    sA: np.ndarray
    sB: np.ndarray
    sC: np.ndarray
    sD: np.ndarray
    sQ: np.ndarray
    sR: np.ndarray
    sG: np.ndarray


def aggregate(spec: ProblemSpec) -> AggregatedCoeffs:
    return AggregatedCoeffs(
        sA=spec.A + spec.Atil,
        sB=spec.B + spec.Btil,
        sC=spec.C + spec.Ctil,
        sD=spec.D + spec.Dtil,
        sQ=spec.Q + spec.Qtil,
        sR=spec.R + spec.Rtil,
        sG=spec.G + spec.Gtil,
    )


def aggregated_spec(spec: ProblemSpec) -> ProblemSpec:
    """Spec whose state coefficients are the aggregates and whose tilde parts vanish.

    Its state equation is the one satisfied by the auxiliary process that does
    not depend on the anchor time.
    """
    agg = aggregate(spec)
    z_nn, z_nm = np.zeros_like(spec.A), np.zeros_like(spec.B)
    return dataclasses.replace(
        spec, A=agg.sA, Atil=z_nn, B=agg.sB, Btil=z_nm, C=agg.sC, Ctil=z_nn,
        D=agg.sD, Dtil=z_nm)


@dataclass(frozen=True, eq=False)
class QCoeffs:
    """Node-indexed paths ``Q1..Q4`` (``steps + 1`` entries)."""

    Q1: np.ndarray
    Q2: np.ndarray
    Q3: np.ndarray
    Q4: np.ndarray


def q_coeffs_at(C, Ctil, Atil, Btil, Dtil, Q, Qtil, cP1):
    """Pointwise ``Q1..Q4`` from one cell's data and the value of cP1.

    Broadcasts over leading axes.
    """
    T = lambda x: np.swapaxes(x, -1, -2)  # noqa: E731
    cross = T(C) @ cP1 @ Ctil + cP1 @ Atil
    ctrl = T(C) @ cP1 @ Dtil + cP1 @ Btil
    return -(Q + cross), -(Qtil - cross), -ctrl, ctrl


def build_q_coeffs(spec: ProblemSpec, cP1) -> QCoeffs:
    """Q-coefficients along the grid, given the first representation coefficient.

    ``cP1`` is a :class:`mflq.riccati.BackwardOdeSolution` (or node array)
    on the spec's grid.
    """
    values = getattr(cP1, "values", cP1)
    grid = getattr(cP1, "grid", None)
    if grid is not None and grid != spec.grid:
        raise ValueError(f"grid mismatch: spec on {spec.grid}, cP1 on {grid}")
    if values.shape[0] != spec.grid.steps + 1:
        raise ValueError("grid mismatch: cP1 must have steps + 1 node values")
    nv = nodes_view
    q = q_coeffs_at(nv(spec.C), nv(spec.Ctil), nv(spec.Atil), nv(spec.Btil),
                    nv(spec.Dtil), nv(spec.Q), nv(spec.Qtil), values)
    return QCoeffs(*q)
