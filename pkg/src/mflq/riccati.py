"""Backward sweeps for the Riccati-type systems and the equilibrium gains.

All equations are integrated backward from the terminal time with classical
RK4 on the spec's grid.  Coefficients are constant on each cell, so every
stage of a step uses the data of the cell being crossed.  Martingale parts of
the backward equations vanish identically because ``b`` and ``sigma`` are
deterministic, so they are not represented.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import ProblemSpec, TimeGrid, aggregate, nodes_view, q_coeffs_at

PINV_CUTOFF = 1e-10
RANGE_RTOL = 1e-8
SYMMETRY_ATOL = 1e-12
MARGIN_TOL = 1e-10


class SweepDivergence(ArithmeticError):
    """A backward sweep produced non-finite values."""

    def __init__(self, label: str, node: int, time: float):
        super().__init__(f"{label}: non-finite values at node {node} (t={time:.6g})")
        self.label = label
        self.node = node
        self.time = time


@dataclass(frozen=True, eq=False)
class BackwardOdeSolution:
    """Matrix or vector path indexed by grid node (``values.shape[0] == steps + 1``)."""

    grid: TimeGrid
    values: np.ndarray
    label: str

    def __getitem__(self, k):
        return self.values[k]

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]


@dataclass(frozen=True, eq=False)
class FeedbackLaw:
    """Gain pair on grid nodes: ``Theta`` is ``(steps+1, m, n)``, ``phi`` is ``(steps+1, m)``.

    On cell ``k`` the law uses the values at node ``k``.
    """

    grid: TimeGrid
    Theta: np.ndarray
    phi: np.ndarray

    @classmethod
    def zero(cls, grid: TimeGrid, n: int, m: int) -> "FeedbackLaw":
        N = grid.steps
        return cls(grid, np.zeros((N + 1, m, n)), np.zeros((N + 1, m)))

    @classmethod
    def constant(cls, grid: TimeGrid, Theta, phi) -> "FeedbackLaw":
        Theta, phi = np.atleast_2d(Theta).astype(float), np.atleast_1d(phi).astype(float)
        N = grid.steps
        return cls(grid, np.repeat(Theta[None], N + 1, 0), np.repeat(phi[None], N + 1, 0))

    def regrid(self, grid: TimeGrid) -> "FeedbackLaw":
        """Sample the law at the nodes of another grid on the same horizon.

        Each new node takes the gain of the old cell containing it, which is
        the piecewise-constant reading of the law.
        """
        if grid.horizon != self.grid.horizon:
            raise ValueError("horizon mismatch")
        idx = np.minimum((np.arange(grid.steps + 1) * self.grid.steps) // grid.steps,
                         self.grid.steps)
        return FeedbackLaw(grid, self.Theta[idx], self.phi[idx])


@dataclass(frozen=True, eq=False)
class EquilibriumSolution:
    P1s: BackwardOdeSolution
    P2s: BackwardOdeSolution
    P3s: BackwardOdeSolution
    P4s: BackwardOdeSolution
    law: FeedbackLaw
    range_report: np.ndarray  # (steps+1, 2) booleans: gain and offset inclusions
    second_order_margin: np.ndarray  # (steps+1,)
    Y0: BackwardOdeSolution
    hatP1: BackwardOdeSolution

    @property
    def grid(self) -> TimeGrid:
        return self.law.grid

    @property
    def range_ok(self) -> bool:
        return bool(self.range_report.all())

    @property
    def second_order_ok(self) -> bool:
        return bool(np.min(self.second_order_margin) >= -MARGIN_TOL)

    def symmetry_defect(self) -> float:
        """Largest ``|P1* - P1*^T|`` entry over the grid (reported, never corrected)."""
        P = self.P1s.values
        return float(np.max(np.abs(P - np.swapaxes(P, -1, -2))))


# ---------------------------------------------------------------------------
# Integrator


def rk4_backward(grid: TimeGrid, terminal: Sequence[np.ndarray],
                 rhs: Callable[[int, tuple], tuple], label: str,
                 post: Callable[[tuple], tuple] | None = None) -> tuple[np.ndarray, ...]:
    """Integrate ``dy/ds = rhs(k, y)`` backward from ``y(T) = terminal``.

    ``y`` is a tuple of arrays and ``rhs(k, y)`` returns the tuple of forward
    derivatives on cell ``k``.  ``post`` is applied after each full step
    (e.g. symmetrisation).  Returns node-indexed arrays, one per component,
    whose last entry equals the terminal value exactly.
    """
    N, h = grid.steps, grid.step_size
    y = tuple(np.array(v, dtype=float) for v in terminal)
    paths = tuple(np.empty((N + 1,) + v.shape) for v in y)
    for p, v in zip(paths, y):
        p[N] = v
    for k in range(N - 1, -1, -1):
        k1 = rhs(k, y)
        k2 = rhs(k, tuple(a - 0.5 * h * d for a, d in zip(y, k1)))
        k3 = rhs(k, tuple(a - 0.5 * h * d for a, d in zip(y, k2)))
        k4 = rhs(k, tuple(a - h * d for a, d in zip(y, k3)))
        y = tuple(a - (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
                  for a, d1, d2, d3, d4 in zip(y, k1, k2, k3, k4))
        if post is not None:
            y = post(y)
        for p, v in zip(paths, y):
            if not np.all(np.isfinite(v)):
                raise SweepDivergence(label, k, float(grid.nodes[k]))
            p[k] = v
    return paths


def _sym(P):
    return 0.5 * (P + P.T)


class _Cells:
    """Per-cell coefficient access with transposes precomputed."""

    def __init__(self, spec: ProblemSpec):
        agg = aggregate(spec)
        self.spec = spec
        for name in ("A", "Atil", "B", "Btil", "C", "Ctil", "D", "Dtil", "Q", "Qtil",
                     "b", "sigma"):
            setattr(self, name, getattr(spec, name))
        for name in ("sA", "sB", "sC", "sD", "sR"):
            setattr(self, name, getattr(agg, name))
        T = lambda x: np.swapaxes(x, -1, -2)  # noqa: E731
        self.AT, self.CT, self.AtilT, self.CtilT = T(spec.A), T(spec.C), T(spec.Atil), T(spec.Ctil)
        self.sAT, self.sBT, self.sDT = T(agg.sA), T(agg.sB), T(agg.sD)

    def q(self, k, cP1):
        s = self.spec
        return q_coeffs_at(s.C[k], s.Ctil[k], s.Atil[k], s.Btil[k], s.Dtil[k],
                           s.Q[k], s.Qtil[k], cP1)


def _y0_rhs(c: _Cells, k, Y0):
    return -(c.sAT[k] @ Y0)


def _hat_p1_rhs(c: _Cells, k, P):
    return -(P @ c.A[k] + c.AT[k] @ P + c.CT[k] @ P @ c.C[k] - c.Q[k])


def _hat_p2_rhs(c: _Cells, k, P1, P2):
    return -(P2 @ c.sA[k] + c.sAT[k] @ P2 + P1 @ c.Atil[k] + c.AtilT[k] @ P1
             + c.CtilT[k] @ P1 @ c.sC[k] + c.CT[k] @ P1 @ c.Ctil[k] - c.Qtil[k])


def _sym_first(y):
    return (_sym(y[0]),) + tuple(y[1:])


def _check_grid(spec: ProblemSpec, sol) -> None:
    grid = getattr(sol, "grid", None)
    if grid is not None and grid != spec.grid:
        raise ValueError(f"grid mismatch: spec on {spec.grid}, solution on {grid}")


# ---------------------------------------------------------------------------
# Individual sweeps


def solve_y0(spec: ProblemSpec) -> BackwardOdeSolution:
    """``dY0 = -sA^T Y0 ds`` with ``Y0(T) = -I``."""
    c = _Cells(spec)
    (vals,) = rk4_backward(spec.grid, (-np.eye(spec.n),),
                           lambda k, y: (_y0_rhs(c, k, y[0]),), "Y0")
    return BackwardOdeSolution(spec.grid, vals, "Y0")


def solve_hat_p1(spec: ProblemSpec) -> BackwardOdeSolution:
    """Second-order adjoint Riccati equation with terminal ``-G``, symmetrised each step."""
    c = _Cells(spec)
    (vals,) = rk4_backward(spec.grid, (-spec.G,), lambda k, y: (_hat_p1_rhs(c, k, y[0]),),
                           "hatP1", post=_sym_first)
    return BackwardOdeSolution(spec.grid, vals, "hatP1")


def solve_hat_p2(spec: ProblemSpec, hatP1: BackwardOdeSolution) -> BackwardOdeSolution:
    """Mean-field companion of ``hatP1`` with terminal ``-Gtil``.

    ``hatP1`` is needed inside RK4 stages, so it is re-integrated jointly;
    the node values are checked against the supplied solution.
    """
    _check_grid(spec, hatP1)
    c = _Cells(spec)

    def rhs(k, y):
        return _hat_p1_rhs(c, k, y[0]), _hat_p2_rhs(c, k, y[0], y[1])

    P1, P2 = rk4_backward(spec.grid, (-spec.G, -spec.Gtil), rhs, "hatP2", post=_sym_first)
    if not np.allclose(P1, hatP1.values, rtol=1e-12, atol=1e-12):
        raise ValueError("hatP1 does not solve the second-order adjoint equation of this spec")
    return BackwardOdeSolution(spec.grid, P2, "hatP2")


def solve_repr_coeffs(spec: ProblemSpec, u_path) -> tuple[BackwardOdeSolution, ...]:
    """Representation coefficients for a deterministic open-loop control.

    ``u_path`` has shape ``(steps, m)`` (one value per cell) or ``(m,)``.
    Returns ``(cP1, cP2, cP3, cP4)`` with terminals ``(-G, -Gtil, 0, -gamma2)``.
    """
    N = spec.grid.steps
    u = np.asarray(u_path, dtype=float)
    if u.ndim == 1:
        u = np.repeat(u[None], N, axis=0)
    if u.shape != (N, spec.m):
        raise ValueError(f"grid mismatch: control path has shape {u.shape}, expected {(N, spec.m)}")
    c = _Cells(spec)

    def rhs(k, y):
        P1, P2, P3, P4 = y
        uk = u[k]
        sBu_b = c.sB[k] @ uk + c.b[k]
        sDu_s = c.sD[k] @ uk + c.sigma[k]
        d3 = -(c.sAT[k] @ P3 + c.AtilT[k] @ P4 + P1 @ c.Btil[k] @ uk + P2 @ sBu_b
               + c.CtilT[k] @ P1 @ sDu_s + c.CT[k] @ P1 @ c.Dtil[k] @ uk)
        d4 = -(c.AT[k] @ P4 + P1 @ (c.B[k] @ uk + c.b[k])
               + c.CT[k] @ P1 @ (c.D[k] @ uk + c.sigma[k]))
        return _hat_p1_rhs(c, k, P1), _hat_p2_rhs(c, k, P1, P2), d3, d4

    n = spec.n
    vals = rk4_backward(spec.grid, (-spec.G, -spec.Gtil, np.zeros(n), -spec.gamma2), rhs,
                        "repr", post=_sym_first)
    labels = ("cP1", "cP2", "cP3", "cP4")
    return tuple(BackwardOdeSolution(spec.grid, v, lab) for v, lab in zip(vals, labels))


# ---------------------------------------------------------------------------
# Pseudo-inverse and second-order check


def _pinv_from_eigh(M):
    lam, V = np.linalg.eigh(_sym(M))
    scale = np.max(np.abs(lam)) if lam.size else 0.0
    keep = np.abs(lam) > PINV_CUTOFF * scale
    inv = np.zeros_like(lam)
    inv[keep] = 1.0 / lam[keep]
    return (V * inv) @ V.T


def _pinv_from_svd(M):
    U, s, Vt = np.linalg.svd(M)
    scale = s[0] if s.size else 0.0
    keep = s > PINV_CUTOFF * scale
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (Vt.T * inv) @ U.T


def is_symmetric(M, atol: float = SYMMETRY_ATOL) -> bool:
    M = np.asarray(M)
    return bool(np.max(np.abs(M - M.T), initial=0.0) <= atol * max(1.0, np.max(np.abs(M), initial=0.0)))


def pseudo_inverse(M, allow_asymmetric: bool = False) -> np.ndarray:
    """Moore-Penrose inverse with relative cutoff ``PINV_CUTOFF``.

    Symmetric input uses an eigendecomposition; asymmetric input (only when
    allowed) uses an SVD with the same relative cutoff on singular values.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.all(np.isfinite(M)):
        # let a diverging sweep surface as SweepDivergence at the offending step
        return np.full(M.T.shape, np.nan)
    if is_symmetric(M):
        return _pinv_from_eigh(M)
    if not allow_asymmetric:
        raise ValueError("pseudo-inverse requested for a non-symmetric matrix")
    return _pinv_from_svd(M)


def in_range(M, Mp, rhs) -> bool:
    rhs = np.asarray(rhs, dtype=float)
    resid = M @ (Mp @ rhs) - rhs
    return bool(np.linalg.norm(resid) <= RANGE_RTOL * (1.0 + np.linalg.norm(rhs)))


def pinv_apply(M, rhs, allow_asymmetric: bool = False):
    """Return ``(M^+ rhs, in_range)`` where ``in_range`` certifies ``M M^+ rhs = rhs``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    Mp = pseudo_inverse(M, allow_asymmetric)
    rhs = np.asarray(rhs, dtype=float)
    return Mp @ rhs, in_range(M, Mp, rhs)


def second_order_matrix(spec: ProblemSpec, hatP1) -> np.ndarray:
    """Node path of ``sR - sD^T hatP1 sD``."""
    agg = aggregate(spec)
    P = getattr(hatP1, "values", hatP1)
    sD = nodes_view(agg.sD)
    return nodes_view(agg.sR) - np.swapaxes(sD, -1, -2) @ P @ sD


def check_second_order(spec: ProblemSpec, hatP1) -> tuple[np.ndarray, bool]:
    """Smallest eigenvalue of ``sR - sD^T hatP1 sD`` at every node and the pass flag."""
    _check_grid(spec, hatP1)
    W = second_order_matrix(spec, hatP1)
    margin = np.linalg.eigvalsh(0.5 * (W + np.swapaxes(W, -1, -2)))[:, 0]
    return margin, bool(np.min(margin) >= -MARGIN_TOL)


# ---------------------------------------------------------------------------
# Equilibrium system


def _gain_parts(c: _Cells, k, Y0, P1, P2, P3, P4, gamma1):
    """``M`` and the two right-hand sides whose pseudo-solves give the gains."""
    M = c.sR[k] - c.sDT[k] @ P1 @ c.sD[k]
    r_theta = c.sBT[k] @ (P1 + P2 + gamma1 * Y0) + c.sDT[k] @ P1 @ c.sC[k]
    r_phi = c.sBT[k] @ (P3 + P4) + c.sDT[k] @ P1 @ c.sigma[k]
    return M, r_theta, r_phi


def _law_rhs(c: _Cells, k, cP1, P1, P2, P3, P4, Theta, phi):
    """Forward derivatives of (P1, P2, P3, P4) under a given gain pair."""
    Q1, Q2, Q3, Q4 = c.q(k, cP1)
    sAk, sBk, sDk = c.sA[k], c.sB[k], c.sD[k]
    closed_C = c.sC[k] + sDk @ Theta
    d1 = -(P1 @ sAk + P1 @ sBk @ Theta + c.AT[k] @ P1 + c.CT[k] @ P1 @ closed_C
           + Q1 + Q3 @ Theta)
    d2 = -(P2 @ sAk + P2 @ sBk @ Theta + c.sAT[k] @ P2 + Q2 + Q4 @ Theta
           + c.AtilT[k] @ P1 + c.CtilT[k] @ P1 @ closed_C)
    drive = sBk @ phi + c.b[k]
    noise = sDk @ phi + c.sigma[k]
    d3 = -(c.sAT[k] @ P3 + P2 @ drive + Q4 @ phi + c.AtilT[k] @ P4 + c.CtilT[k] @ P1 @ noise)
    d4 = -(c.AT[k] @ P4 + P1 @ drive + c.CT[k] @ P1 @ noise + Q3 @ phi)
    return d1, d2, d3, d4


def _terminals(spec: ProblemSpec):
    n = spec.n
    return (-np.eye(n), -spec.G, -spec.G, -spec.Gtil, np.zeros(n), -spec.gamma2)


def solve_equilibrium_system(spec: ProblemSpec) -> EquilibriumSolution:
    """Coupled equilibrium system with the gains recomputed at every RK4 stage.

    ``Y0``, ``hatP1`` (which enters the Q-coefficients) and ``P1*..P4*`` are
    advanced in one sweep; ``hatP1`` is symmetrised after each step exactly
    as in :func:`solve_hat_p1`, so both give identical node values.
    """
    c = _Cells(spec)
    g1 = spec.gamma1

    def rhs(k, y):
        Y0, cP1, P1, P2, P3, P4 = y
        M, r_theta, r_phi = _gain_parts(c, k, Y0, P1, P2, P3, P4, g1)
        Mp = pseudo_inverse(M, allow_asymmetric=True)
        d = _law_rhs(c, k, cP1, P1, P2, P3, P4, Mp @ r_theta, Mp @ r_phi)
        return (_y0_rhs(c, k, Y0), _hat_p1_rhs(c, k, cP1)) + d

    def post(y):
        return (y[0], _sym(y[1])) + tuple(y[2:])

    Y0, cP1, P1, P2, P3, P4 = rk4_backward(spec.grid, _terminals(spec), rhs,
                                           "equilibrium", post=post)
    N = spec.grid.steps
    Theta = np.empty((N + 1, spec.m, spec.n))
    phi = np.empty((N + 1, spec.m))
    flags = np.empty((N + 1, 2), dtype=bool)
    for k in range(N + 1):
        kc = min(k, N - 1)
        M, r_theta, r_phi = _gain_parts(c, kc, Y0[k], P1[k], P2[k], P3[k], P4[k], g1)
        Mp = pseudo_inverse(M, allow_asymmetric=True)
        Theta[k], phi[k] = Mp @ r_theta, Mp @ r_phi
        flags[k] = in_range(M, Mp, r_theta), in_range(M, Mp, r_phi)
    grid = spec.grid
    hatP1 = BackwardOdeSolution(grid, cP1, "hatP1")
    margin, _ = check_second_order(spec, hatP1)
    sol = lambda v, lab: BackwardOdeSolution(grid, v, lab)  # noqa: E731
    return EquilibriumSolution(
        P1s=sol(P1, "P1*"), P2s=sol(P2, "P2*"), P3s=sol(P3, "P3*"), P4s=sol(P4, "P4*"),
        law=FeedbackLaw(grid, Theta, phi), range_report=flags, second_order_margin=margin,
        Y0=sol(Y0, "Y0"), hatP1=hatP1)


def solve_given_law(spec: ProblemSpec, law: FeedbackLaw) -> tuple[BackwardOdeSolution, ...]:
    """The same four equations with the gain pair frozen to ``law``.

    On cell ``k`` the gains are the node-``k`` values of the law.  This is the
    linear system describing the adjoint of a linear feedback control.
    """
    if law.grid != spec.grid:
        raise ValueError(f"grid mismatch: spec on {spec.grid}, law on {law.grid}")
    c = _Cells(spec)

    def rhs(k, y):
        cP1, P1, P2, P3, P4 = y
        d = _law_rhs(c, k, cP1, P1, P2, P3, P4, law.Theta[k], law.phi[k])
        return (_hat_p1_rhs(c, k, cP1),) + d

    vals = rk4_backward(spec.grid, _terminals(spec)[1:], rhs, "given-law", post=_sym_first)
    labels = ("P1", "P2", "P3", "P4")
    return tuple(BackwardOdeSolution(spec.grid, v, lab) for v, lab in zip(vals[1:], labels))


def gain_matrix(spec: ProblemSpec, eq: EquilibriumSolution) -> np.ndarray:
    """Node path of ``sR - sD^T P1* sD``."""
    return second_order_matrix(spec, eq.P1s)
