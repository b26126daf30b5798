"""Monte Carlo for the mean-field state equation and the cost functional.

States are advanced by Euler-Maruyama.  The conditional mean given the
anchor time is not estimated from the ensemble: it follows its own Euler
recursion alongside every path, which is exact for deterministic
coefficients.  Random numbers come from counter-based Philox streams keyed
by the master seed, one stream per path (or per branching block), so results
do not depend on how paths are split across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ProblemSpec, aggregate, aggregated_spec
from .riccati import FeedbackLaw

# stream families (third counter word)
CLOSED_LOOP = 1
STATE_FROM = 2
SPIKE_INNER = 3
SPIKE_INDEPENDENT = 4


@dataclass(frozen=True)
class RngConfig:
    """Master seed and the per-path stream discipline.

    The stream for ``(family, index)`` is Philox keyed by the seed with the
    counter's two high words set to ``(family, index)``; draws advance the low
    words only, so distinct streams never overlap.
    """

    master_seed: int = 0

    def generator(self, family: int, index: int) -> np.random.Generator:
        bitgen = np.random.Philox(key=int(self.master_seed), counter=[0, 0, family, index])
        return np.random.Generator(bitgen)

    def normals(self, family: int, indices, steps: int) -> np.ndarray:
        """Standard normals, one row of ``steps`` draws per stream index."""
        out = np.empty((len(indices), steps))
        for r, i in enumerate(indices):
            out[r] = self.generator(family, int(i)).standard_normal(steps)
        return out

    def block_normals(self, family: int, index: int, rows: int, steps: int) -> np.ndarray:
        """A block of ``rows`` paths drawn from a single stream, row by row."""
        return self.generator(family, index).standard_normal((rows, steps))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Sample paths from an anchor node ``anchor_index`` to the horizon.

    ``X``, ``cond_mean`` have shape ``(S, L+1, n)``; ``U``, ``cond_control``
    have shape ``(S, L, m)`` (one control value per cell), with
    ``L = steps - anchor_index``.
    """

    spec: ProblemSpec
    anchor_index: int
    X: np.ndarray
    cond_mean: np.ndarray
    U: np.ndarray
    cond_control: np.ndarray
    path_ids: np.ndarray
    Xcal: np.ndarray | None = None

    @property
    def grid(self):
        return self.spec.grid

    @property
    def samples(self) -> int:
        return self.X.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes[self.anchor_index:]


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    std_error: float
    samples: int


def _euler(spec: ProblemSpec, j: int, x, dW, control):
    """Joint Euler recursion for ``(X, E_t X)`` from node ``j``.

    ``control(k, X, m)`` returns ``(u, E_t u)`` for the cell ``k``.
    """
    S = x.shape[0]
    N, h = spec.grid.steps, spec.grid.step_size
    L = N - j
    X = np.empty((S, L + 1, spec.n))
    Mn = np.empty((S, L + 1, spec.n))
    U = np.empty((S, L, spec.m))
    EU = np.empty((S, L, spec.m))
    X[:, 0] = x
    Mn[:, 0] = x
    for i, k in enumerate(range(j, N)):
        Xk, mk = X[:, i], Mn[:, i]
        u, Eu = control(k, Xk, mk)
        U[:, i], EU[:, i] = u, Eu
        drift = (Xk @ spec.A[k].T + mk @ spec.Atil[k].T + u @ spec.B[k].T
                 + Eu @ spec.Btil[k].T + spec.b[k])
        diff = (Xk @ spec.C[k].T + mk @ spec.Ctil[k].T + u @ spec.D[k].T
                + Eu @ spec.Dtil[k].T + spec.sigma[k])
        X[:, i + 1] = Xk + h * drift + diff * dW[:, i, None]
        mean_drift = (mk @ (spec.A[k] + spec.Atil[k]).T + Eu @ (spec.B[k] + spec.Btil[k]).T
                      + spec.b[k])
        Mn[:, i + 1] = mk + h * mean_drift
    return X, Mn, U, EU


def _law_control(law: FeedbackLaw):
    def control(k, X, m):
        return X @ law.Theta[k].T + law.phi[k], m @ law.Theta[k].T + law.phi[k]
    return control


def _check_law(spec: ProblemSpec, law: FeedbackLaw) -> None:
    if law.grid != spec.grid:
        raise ValueError(f"grid mismatch: spec on {spec.grid}, law on {law.grid}")


def simulate_closed_loop(spec: ProblemSpec, law: FeedbackLaw, rng: RngConfig,
                         samples: int, first_path: int = 0) -> PathEnsemble:
    """Closed-loop equilibrium state from time 0 (aggregated coefficients).

    Path ``p`` uses stream ``(CLOSED_LOOP, p)``; ``first_path`` allows a
    worker to produce a slice of a larger ensemble bit-for-bit.
    """
    _check_law(spec, law)
    agg_spec = aggregated_spec(spec)
    N, h = spec.grid.steps, spec.grid.step_size
    ids = np.arange(first_path, first_path + samples)
    dW = math.sqrt(h) * rng.normals(CLOSED_LOOP, ids, N)
    x = np.repeat(spec.x0[None], samples, axis=0)
    X, Mn, U, EU = _euler(agg_spec, 0, x, dW, _law_control(law))
    return PathEnsemble(spec, 0, X, Mn, U, EU, ids, Xcal=X)


def simulate_state_from(spec: ProblemSpec, t_index: int, xi, control, rng: RngConfig,
                        samples: int, first_path: int = 0) -> PathEnsemble:
    """Mean-field state from node ``t_index`` with ``X(t) = xi``.

    ``control`` is a :class:`FeedbackLaw` (feedback on the state, with
    ``E_t u = Theta E_t X + phi``) or a deterministic open-loop path of shape
    ``(steps, m)`` / ``(m,)``.  ``xi`` is one state or one state per path.
    """
    N, h = spec.grid.steps, spec.grid.step_size
    if not (isinstance(t_index, (int, np.integer)) and 0 <= t_index < N):
        raise ValueError(f"anchor {t_index} is not an interior grid node")
    if isinstance(control, FeedbackLaw):
        _check_law(spec, control)
        ctrl = _law_control(control)
    else:
        path = np.asarray(control, dtype=float)
        if path.ndim == 1:
            path = np.repeat(path[None], N, axis=0)
        if path.shape != (N, spec.m):
            raise ValueError(f"open-loop path must have shape {(N, spec.m)}")

        def ctrl(k, X, m):
            u = np.broadcast_to(path[k], (X.shape[0], spec.m))
            return u, u
    x = np.broadcast_to(np.asarray(xi, dtype=float), (samples, spec.n)).copy()
    if not np.all(np.isfinite(x)):
        raise ValueError("anchor states must be finite")
    ids = np.arange(first_path, first_path + samples)
    dW = math.sqrt(h) * rng.normals(STATE_FROM, ids, N - t_index)
    X, Mn, U, EU = _euler(spec, t_index, x, dW, ctrl)
    return PathEnsemble(spec, t_index, X, Mn, U, EU, ids)


def _quad(M, x):
    return np.einsum("...i,...ij,...j->...", x, M, x)


def path_costs(spec: ProblemSpec, j: int, X, Mn, U, EU) -> np.ndarray:
    """Per-path conditional cost with left-endpoint quadrature.

    Arrays carry the path axis first and the time axis second (from node
    ``j``); any extra leading axes are kept.
    """
    N, h = spec.grid.steps, spec.grid.step_size
    k = np.arange(j, N)
    run = (_quad(spec.Q[k], X[..., :-1, :]) + _quad(spec.R[k], U)
           + _quad(spec.Qtil[k], Mn[..., :-1, :]) + _quad(spec.Rtil[k], EU))
    terminal = _quad(spec.G, X[..., -1, :]) + _quad(spec.Gtil, Mn[..., -1, :])
    cross = np.sum((spec.gamma1 * X[..., 0, :] + spec.gamma2) * Mn[..., -1, :], axis=-1)
    return 0.5 * (h * run.sum(axis=-1) + terminal) + cross


def _estimate(values: np.ndarray) -> CostEstimate:
    values = np.asarray(values, dtype=float).ravel()
    S = values.size
    if S < 2:
        raise ValueError("at least two samples are needed")
    mean = math.fsum(values) / S
    var = math.fsum((values - mean) ** 2) / (S - 1)
    return CostEstimate(mean, math.sqrt(var / S), S)


def evaluate_cost(spec: ProblemSpec, ensemble: PathEnsemble) -> CostEstimate:
    """Monte Carlo estimate of the cost at the ensemble's anchor.

    Conditional-mean terms use each path's companion mean; the estimate is
    the average of the per-path costs, accumulated with exact summation so
    the result does not depend on the order of the paths.
    """
    if ensemble.spec.grid != spec.grid:
        raise ValueError("ensemble and spec live on different grids")
    e = ensemble
    return _estimate(path_costs(spec, e.anchor_index, e.X, e.cond_mean, e.U, e.cond_control))


# ---------------------------------------------------------------------------
# Spike variations


@dataclass
class SpikeEstimate:
    v: np.ndarray
    epsilon: float
    cells: int
    estimate: float
    std_error: float
    outer_estimates: np.ndarray = field(repr=False, default=None)
    outer_std_errors: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"v": [float(a) for a in self.v], "epsilon": self.epsilon, "cells": self.cells,
                "estimate": self.estimate, "std_error": self.std_error,
                "min_outer_z": float(np.min(self.outer_estimates / np.maximum(
                    self.outer_std_errors, 1e-300)))}


def _spike_costs(spec: ProblemSpec, law: FeedbackLaw, j: int, x, dW, perts):
    """Costs of every perturbation on shared inner paths.

    ``x``: ``(Bo, n)`` anchor states; ``dW``: ``(Bo, I, L)`` increments;
    ``perts``: list of ``(v, cells)``.  Returns ``(P, Bo, I)``.
    """
    N, h = spec.grid.steps, spec.grid.step_size
    n = spec.n
    agg = aggregate(spec)
    Bo, I, L = dW.shape
    P = len(perts)
    V = np.array([np.asarray(v, dtype=float) for v, _ in perts])  # (P, m)
    C = np.array([c for _, c in perts])
    # auxiliary (unperturbed closed-loop) process and its conditional mean
    Xs = np.broadcast_to(x[:, None, :], (Bo, I, n)).copy()
    ms = x.copy()
    X = np.broadcast_to(x[None, :, None, :], (P, Bo, I, n)).copy()
    m_ = np.broadcast_to(x[None], (P, Bo, n)).copy()
    cost = np.zeros((P, Bo, I))
    for i, k in enumerate(range(j, N)):
        Th, ph = law.Theta[k], law.phi[k]
        us = Xs @ Th.T + ph  # (Bo, I, m)
        Eus = ms @ Th.T + ph  # (Bo, m)
        active = (i < C)[:, None] * V  # (P, m)
        u = us[None] + active[:, None, None, :]
        Eu = Eus[None] + active[:, None, :]
        cost += h * (_quad(spec.Q[k], X) + _quad(spec.R[k], u))
        cost += h * (_quad(spec.Qtil[k], m_) + _quad(spec.Rtil[k], Eu))[..., None]
        dw = dW[None, :, :, i, None]
        drift = (X @ spec.A[k].T + (m_ @ spec.Atil[k].T)[:, :, None] + u @ spec.B[k].T
                 + (Eu @ spec.Btil[k].T)[:, :, None] + spec.b[k])
        diff = (X @ spec.C[k].T + (m_ @ spec.Ctil[k].T)[:, :, None] + u @ spec.D[k].T
                + (Eu @ spec.Dtil[k].T)[:, :, None] + spec.sigma[k])
        X = X + h * drift + diff * dw
        m_ = m_ + h * (m_ @ agg.sA[k].T + Eu @ agg.sB[k].T + spec.b[k])
        Xs = (Xs + h * (Xs @ agg.sA[k].T + us @ agg.sB[k].T + spec.b[k])
              + (Xs @ agg.sC[k].T + us @ agg.sD[k].T + spec.sigma[k]) * dW[:, :, i, None])
        ms = ms + h * (ms @ agg.sA[k].T + Eus @ agg.sB[k].T + spec.b[k])
    terminal = _quad(spec.G, X) + _quad(spec.Gtil, m_)[..., None]
    cross = np.sum((spec.gamma1 * x + spec.gamma2)[None] * m_, axis=-1)[..., None]
    return 0.5 * (cost + terminal) + cross


def spike_cost_derivative(spec: ProblemSpec, law: FeedbackLaw, t_index: int, v, epsilons,
                          rng: RngConfig, outer: int = 64, inner: int = 4096,
                          common_random_numbers: bool = True,
                          chunk: int = 8) -> list[SpikeEstimate]:
    """Paired Monte Carlo estimates of the spike difference quotients.

    For every ``v`` (a vector, or rows of a 2-D array) and every ``eps`` in
    ``epsilons`` (times, whole numbers of cells) this estimates
    ``(J(u* + v 1_[t, t+eps)) - J(u*)) / eps`` conditionally on ``X*(t)``.
    Outer samples of the equilibrium state at ``t`` come from
    :func:`simulate_closed_loop`; each one branches into ``inner`` paths.
    The equilibrium control is realised along the unperturbed closed-loop
    process on the same noise and the perturbed state equation is driven by
    it as an exogenous control.  With common random numbers all
    perturbations and the baseline share the inner noise (one Philox stream
    per outer sample).

    The aggregate standard error is the spread of the per-outer estimates.
    """
    _check_law(spec, law)
    grid = spec.grid
    N = grid.steps
    j = int(t_index)
    if not 0 <= j < N:
        raise ValueError(f"anchor {t_index} is not an interior grid node")
    eps_list = [float(e) for e in epsilons]
    cells = [grid.cells_of(e) for e in eps_list]
    if any(j + c > N for c in cells):
        raise ValueError("t + eps exceeds the horizon")
    vs = np.atleast_2d(np.asarray(v, dtype=float))
    if vs.shape[1] != spec.m:
        raise ValueError(f"perturbation must have {spec.m} components")
    if outer < 2 or inner < 2:
        raise ValueError("outer and inner sample counts must be at least 2")

    if j == 0:
        anchors = np.repeat(spec.x0[None], outer, axis=0)
    else:
        anchors = simulate_closed_loop(spec, law, rng, outer).X[:, j]
    perts = [(np.zeros(spec.m), 1)] + [(vv, c) for vv in vs for c in cells]
    L = N - j
    sqh = math.sqrt(grid.step_size)
    block_base = j << 32
    diffs = np.empty((len(perts) - 1, outer, inner))
    for o0 in range(0, outer, chunk):
        idx = range(o0, min(outer, o0 + chunk))
        dW = sqh * np.stack([rng.block_normals(SPIKE_INNER, block_base + o, inner, L)
                             for o in idx])
        J = _spike_costs(spec, law, j, anchors[list(idx)], dW, perts)
        if common_random_numbers:
            base = J[0]
        else:
            dW_b = sqh * np.stack([rng.block_normals(SPIKE_INDEPENDENT, block_base + o, inner, L)
                                   for o in idx])
            base = _spike_costs(spec, law, j, anchors[list(idx)], dW_b, perts[:1])[0]
        diffs[:, o0:o0 + len(idx)] = J[1:] - base[None]

    out = []
    for p, (vv, c) in enumerate(perts[1:]):
        eps = c * grid.step_size
        q = diffs[p] / eps  # (outer, inner)
        per_outer = q.mean(axis=1)
        per_outer_se = q.std(axis=1, ddof=1) / math.sqrt(inner)
        agg = _estimate(per_outer)
        out.append(SpikeEstimate(np.array(vv), eps, c, agg.mean, agg.std_error,
                                 per_outer, per_outer_se))
    return out


def equilibrium_cost(spec: ProblemSpec, law: FeedbackLaw, rng: RngConfig,
                     samples: int) -> CostEstimate:
    """Monte Carlo estimate of ``J(u*; 0, x0)`` for the open-loop equilibrium control.

    ``u*`` is realised along the closed-loop process and fed to the
    mean-field state as an exogenous control, which is the quantity a spike
    variation at time 0 perturbs.  Path ``p`` uses the same stream as path
    ``p`` of :func:`simulate_closed_loop`.
    """
    _check_law(spec, law)
    N, h = spec.grid.steps, spec.grid.step_size
    dW = math.sqrt(h) * rng.normals(CLOSED_LOOP, np.arange(samples), N)
    J = _spike_costs(spec, law, 0, spec.x0[None], dW[None], [(np.zeros(spec.m), 1)])
    return _estimate(J[0, 0])
