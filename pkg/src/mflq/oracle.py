"""Exact binomial-tree oracle.

The Brownian increment on every cell is replaced by a fair coin flip
``+-sqrt(h)``.  The tree does not recombine: node ``i`` at level ``k`` has
children ``2i`` (up move) and ``2i + 1`` (down move), and its branch history
has probability ``2**-k``.  Conditional expectations given an anchor node are
plain averages over the anchor's subtree, so costs, spike derivatives and
discrete BSDE solutions are computed without sampling error.

Arrays for a subtree rooted at level ``j`` are stored per level ``k >= j`` with
shape ``(B, 2**(k - j), dim)``: ``B`` anchors, each followed by its
descendants in global node order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .model import ProblemSpec, aggregated_spec, require_valid
from .riccati import FeedbackLaw, pinv_apply

MAX_DEPTH = 16
EXTRACTION_TOL = 1e-10


class DepthExceeded(ValueError):
    pass


class NoDiscreteEquilibrium(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class TreeModel:
    """Full binary tree on the spec's grid (``steps <= 16``)."""

    spec: ProblemSpec

    def __post_init__(self):
        if self.spec.grid.steps > MAX_DEPTH:
            raise DepthExceeded(f"tree depth {self.spec.grid.steps} exceeds {MAX_DEPTH}")
        require_valid(self.spec)

    @property
    def grid(self):
        return self.spec.grid

    @property
    def depth(self) -> int:
        return self.spec.grid.steps

    @property
    def h(self) -> float:
        return self.spec.grid.step_size

    @cached_property
    def aux_spec(self) -> ProblemSpec:
        return aggregated_spec(self.spec)

    def increments(self, level: int) -> np.ndarray:
        """Brownian increment leading into each node of ``level`` (``level >= 1``)."""
        signs = np.where(np.arange(2 ** level) % 2 == 0, 1.0, -1.0)
        return np.sqrt(self.h) * signs


@dataclass(frozen=True, eq=False)
class NodeControl:
    """Adapted control given by its value at every node: ``values[k]`` is ``(2**k, m)``."""

    values: list

    def __post_init__(self):
        for k, v in enumerate(self.values):
            if np.shape(v)[0] != 2 ** k:
                raise ValueError(f"level {k} must hold {2 ** k} node values")

    @classmethod
    def deterministic(cls, path) -> "NodeControl":
        """Node control equal to ``path[k]`` at every node of level ``k``."""
        path = np.asarray(path, dtype=float)
        return cls([np.repeat(path[k][None], 2 ** k, axis=0) for k in range(len(path))])


def _step(spec: ProblemSpec, k: int, X, mean, u, Eu, h: float, sqh: float):
    """Euler step on every node of a subtree level; children interleaved up/down."""
    drift = (X @ spec.A[k].T + (mean @ spec.Atil[k].T)[:, None] + u @ spec.B[k].T
             + (Eu @ spec.Btil[k].T)[:, None] + spec.b[k])
    diff = (X @ spec.C[k].T + (mean @ spec.Ctil[k].T)[:, None] + u @ spec.D[k].T
            + (Eu @ spec.Dtil[k].T)[:, None] + spec.sigma[k])
    base = X + h * drift
    shock = sqh * diff
    out = np.empty((X.shape[0], 2 * X.shape[1], X.shape[2]))
    out[:, 0::2] = base + shock
    out[:, 1::2] = base - shock
    return out


@dataclass(frozen=True, eq=False)
class TreePaths:
    """Anchored propagation: per-level states, controls and exact conditional means."""

    level: int
    X: list  # k = j..N: (B, 2^(k-j), n)
    mean: list  # k = j..N: (B, n), E_t X
    u: list  # k = j..N-1: (B, 2^(k-j), m), applied control
    Eu: list  # k = j..N-1: (B, m)
    aux: list  # k = j..N: auxiliary process driven by the unperturbed control
    aux_u: list  # k = j..N-1: unperturbed control

    @property
    def anchors(self) -> np.ndarray:
        return self.X[0][:, 0]


@dataclass(frozen=True, eq=False)
class AuxTree:
    states: list  # k = 0..N: (2^k, n)
    controls: list  # k = 0..N-1: (2^k, m)


def tree_aux_states(tree: TreeModel, control) -> AuxTree:
    """The auxiliary process from ``x0`` at every node, with its control values."""
    p = tree_propagate(tree, control, 0, anchor_states=tree.spec.x0[None])
    return AuxTree([a.reshape(-1, tree.spec.n) for a in p.aux],
                   [u.reshape(-1, tree.spec.m) for u in p.aux_u])


def tree_propagate(tree: TreeModel, control, t_level: int = 0, anchor_states=None,
                   anchor_control=None, spike=None) -> TreePaths:
    """Propagate the mean-field state from anchors at level ``t_level``.

    ``control`` is a :class:`NodeControl` or a :class:`FeedbackLaw`.  A law is
    read as the open-loop process ``Theta X_aux + phi`` along the auxiliary
    process started at the anchor, which is how an equilibrium control is
    realised.  ``anchor_states`` defaults to the auxiliary process from ``x0``
    at the level's nodes.  ``anchor_control`` (``(B, m)``, laws only)
    replaces the control at the anchor level.  ``spike = (v, cells)`` adds
    ``v`` to the applied control on ``cells`` cells after the anchor; the
    auxiliary process does not see the spike.
    """
    spec, N = tree.spec, tree.depth
    j = int(t_level)
    if not 0 <= j <= N:
        raise ValueError(f"anchor level {j} outside [0, {N}]")
    h, sqh = tree.h, np.sqrt(tree.h)
    is_law = isinstance(control, FeedbackLaw)
    if is_law and control.grid != spec.grid:
        raise ValueError("grid mismatch between tree and feedback law")
    if anchor_states is None:
        anchor_states = tree_aux_states(tree, control).states[j] if j > 0 else spec.x0[None]
    x = np.atleast_2d(np.asarray(anchor_states, dtype=float))
    B = x.shape[0]
    if not is_law:
        if anchor_control is not None:
            raise ValueError("anchor_control only applies to feedback laws")
        if j > 0 and B != 2 ** j:
            raise ValueError("node controls need one anchor per node of the level")
    if spike is not None:
        v, cells = spike
        v = np.broadcast_to(np.asarray(v, dtype=float), (B, spec.m))
        if j + cells > N or cells < 1:
            raise ValueError("spike extends beyond the horizon")
    X = x[:, None, :]
    aux = X
    Xs, means, us, Eus, auxs, aux_us = [X], [X[:, 0]], [], [], [aux], []
    for k in range(j, N):
        L = 2 ** (k - j)
        if is_law:
            if k == j and anchor_control is not None:
                ua = np.broadcast_to(np.asarray(anchor_control, dtype=float)[:, None, :],
                                     (B, 1, spec.m)).copy()
            else:
                ua = aux @ control.Theta[k].T + control.phi[k]
        else:
            vals = np.asarray(control.values[k], dtype=float)
            if j > 0:
                ua = vals.reshape(B, L, spec.m)
            else:
                ua = np.broadcast_to(vals.reshape(1, L, spec.m), (B, L, spec.m))
        u = ua
        if spike is not None and k < j + cells:
            u = ua + v[:, None, :]
        mean, Eu = means[-1], u.mean(axis=1)
        us.append(u)
        Eus.append(Eu)
        aux_us.append(ua)
        X = _step(spec, k, X, mean, u, Eu, h, sqh)
        aux = _step(tree.aux_spec, k, aux, aux.mean(axis=1), ua, ua.mean(axis=1), h, sqh)
        Xs.append(X)
        means.append(X.mean(axis=1))
        auxs.append(aux)
    return TreePaths(j, Xs, means, us, Eus, auxs, aux_us)


def _quad(M, x):
    """``<M x, x>`` over the last axis."""
    return np.einsum("...i,ij,...j->...", x, M, x)


def path_cost(tree: TreeModel, paths: TreePaths) -> np.ndarray:
    """Exact cost at each anchor (left-endpoint running sum)."""
    spec, h, N, j = tree.spec, tree.h, tree.depth, paths.level
    running = 0.0
    for i, k in enumerate(range(j, N)):
        X, u, m_, Eu = paths.X[i], paths.u[i], paths.mean[i], paths.Eu[i]
        inner = (_quad(spec.Q[k], X) + _quad(spec.R[k], u)).mean(axis=1)
        running = running + h * (inner + _quad(spec.Qtil[k], m_) + _quad(spec.Rtil[k], Eu))
    XN, mN = paths.X[-1], paths.mean[-1]
    terminal = _quad(spec.G, XN).mean(axis=1) + _quad(spec.Gtil, mN)
    cross = np.einsum("bi,bi->b", spec.gamma1 * paths.anchors + spec.gamma2, mN)
    return 0.5 * (running + terminal) + cross


def tree_cost(tree: TreeModel, control, t_level: int = 0, **kwargs) -> np.ndarray:
    """Exact cost ``J(u; t, X(t))`` at every anchor of level ``t_level``."""
    return path_cost(tree, tree_propagate(tree, control, t_level, **kwargs))


def tree_spike_derivative(tree: TreeModel, control, t_level: int, v, cells: int = 1,
                          anchor_states=None) -> np.ndarray:
    """Exact ``(J(u + v 1_[t, t+eps)) - J(u)) / eps`` at every anchor, ``eps = cells * h``."""
    base = tree_cost(tree, control, t_level, anchor_states=anchor_states)
    bumped = tree_cost(tree, control, t_level, anchor_states=anchor_states, spike=(v, cells))
    return (bumped - base) / (cells * tree.h)


# ---------------------------------------------------------------------------
# Equilibrium by backward induction


@dataclass(frozen=True, eq=False)
class TreeEquilibrium:
    Theta: np.ndarray  # (N, m, n) per-level gains
    phi: np.ndarray  # (N, m)
    hessians: np.ndarray  # (N, m, m): quadratic coefficient of the one-cell spike
    extraction_residual: float  # max |first-order gradient| / h at random anchors
    law: FeedbackLaw  # gains on the tree's grid nodes (terminal node repeats the last cell)
    control: NodeControl  # per-node equilibrium control along the auxiliary process
    states: list  # per-node auxiliary states

    @property
    def second_order_ok(self) -> bool:
        return bool(all(np.linalg.eigvalsh(0.5 * (H + H.T))[0] >= -1e-12 for H in self.hessians))


def tree_equilibrium(tree: TreeModel, check_points: int = 3, seed: int = 0) -> TreeEquilibrium:
    """Discrete equilibrium: the exact one-cell spike gradient vanishes at every node.

    Going backward in the anchor level, the gradient of the cost with respect
    to the anchor-level control is affine in the anchor state ``x`` and the
    anchor control ``u`` (later levels follow the already computed gains
    along the auxiliary process).  Its coefficients are read off exact cost
    differences at basis points; this is exact because the cost is quadratic.
    The resulting ``u = Theta x + phi`` is then checked at random anchors.
    """
    spec, N, h = tree.spec, tree.depth, tree.h
    n, m = spec.n, spec.m
    rng = np.random.default_rng(seed)
    Theta = np.zeros((N + 1, m, n))
    phi = np.zeros((N + 1, m))
    hess = np.zeros((N, m, m))
    eye_m = np.eye(m)
    worst = 0.0

    for j in range(N - 1, -1, -1):
        law = FeedbackLaw(spec.grid, Theta, phi)

        def cost(xs, us, vs):
            p = tree_propagate(tree, law, j, anchor_states=xs, anchor_control=us, spike=(vs, 1))
            return path_cost(tree, p)

        def gradient(xs, us):
            """Central difference in each control direction (exact for quadratics)."""
            P = xs.shape[0]
            xx = np.repeat(xs, 2 * m, axis=0)
            uu = np.repeat(us, 2 * m, axis=0)
            vv = np.tile(np.concatenate([eye_m, -eye_m]), (P, 1))
            J = cost(xx, uu, vv).reshape(P, 2, m)
            return 0.5 * (J[:, 0] - J[:, 1])

        xs = np.vstack([np.zeros((1, n)), np.eye(n), np.zeros((m, n))])
        us = np.vstack([np.zeros((1 + n, m)), eye_m])
        g = gradient(xs, us)
        k0 = g[0]
        Kx = (g[1:1 + n] - k0).T
        Ku = (g[1 + n:] - k0).T
        th, ok1 = pinv_apply(Ku, -Kx, allow_asymmetric=True)
        ph, ok2 = pinv_apply(Ku, -k0, allow_asymmetric=True)
        if not (ok1 and ok2):
            raise NoDiscreteEquilibrium(f"singular one-cell problem at level {j}")
        Theta[j], phi[j] = th, ph

        # quadratic coefficient: J(v) = J(0) + g.v + v^T H v / 2
        pairs = [(a, b) for a in range(m) for b in range(a, m)]
        vs = np.array([np.zeros(m)] + [eye_m[a] for a in range(m)]
                      + [eye_m[a] + eye_m[b] for a, b in pairs])
        J = cost(np.zeros((len(vs), n)), np.zeros((len(vs), m)), vs)
        for a, b in pairs:
            val = J[1 + m + pairs.index((a, b))] - J[1 + a] - J[1 + b] + J[0]
            hess[j, a, b] = hess[j, b, a] = val / h

        xr = rng.uniform(-1.0, 1.0, size=(check_points, n))
        ur = xr @ Theta[j].T + phi[j]
        worst = max(worst, float(np.max(np.abs(gradient(xr, ur)))) / h)

    Theta[N], phi[N] = Theta[N - 1], phi[N - 1]
    law = FeedbackLaw(spec.grid, Theta, phi)
    aux = tree_aux_states(tree, law)
    return TreeEquilibrium(Theta[:N].copy(), phi[:N].copy(), hess, worst, law,
                           NodeControl(aux.controls), aux.states)


# ---------------------------------------------------------------------------
# Discrete backward equations


@dataclass(frozen=True, eq=False)
class TreeBsde:
    level: int
    Y: list  # k = j..N: (B, 2^(k-j), n)
    Z: list  # k = j..N-1
    paths: TreePaths


def _backward(tree: TreeModel, j: int, terminal, forcing) -> tuple[list, list]:
    """Explicit discrete scheme for a linear conditional mean-field BSDE.

    ``Z_k = E_k[Y_{k+1} dW] / h`` and
    ``Y_k = E_k Y_{k+1} + h (A^T E_k Y_{k+1} + Atil^T E_t Y_{k+1} + C^T Z_k + Ctil^T E_t Z_k + F_k)``
    with ``forcing(k) = F_k``.
    """
    spec, N, h = tree.spec, tree.depth, tree.h
    sqh = np.sqrt(h)
    Y = terminal
    Ys, Zs = [Y], []
    for k in range(N - 1, j - 1, -1):
        B, L2, n = Y.shape
        pair = Y.reshape(B, L2 // 2, 2, n)
        EY = 0.5 * (pair[:, :, 0] + pair[:, :, 1])
        Z = (pair[:, :, 0] - pair[:, :, 1]) / (2.0 * sqh)
        gen = (EY @ spec.A[k] + (EY.mean(axis=1) @ spec.Atil[k])[:, None]
               + Z @ spec.C[k] + (Z.mean(axis=1) @ spec.Ctil[k])[:, None] + forcing(k))
        Y = EY + h * gen
        Ys.append(Y)
        Zs.append(Z)
    return Ys[::-1], Zs[::-1]


def tree_bsde_solve(tree: TreeModel, control, t_level: int = 0, **kwargs) -> TreeBsde:
    """Exact discrete adjoint of the anchored state equation.

    Terminal ``-G X_N - Gtil E_t X_N - gamma2`` and generator
    ``-Q X - Qtil E_t X`` besides the linear terms.  ``kwargs`` go to
    :func:`tree_propagate`.
    """
    spec, j = tree.spec, int(t_level)
    p = tree_propagate(tree, control, j, **kwargs)
    XN, mN = p.X[-1], p.mean[-1]
    terminal = -(XN @ spec.G.T) - (mN @ spec.Gtil.T)[:, None] - spec.gamma2

    def forcing(k):
        i = k - j
        return -(p.X[i] @ spec.Q[k].T) - (p.mean[i] @ spec.Qtil[k].T)[:, None]

    Y, Z = _backward(tree, j, terminal, forcing)
    return TreeBsde(j, Y, Z, p)


def tree_aux_bsde_solve(tree: TreeModel, control, cP1, t_level: int = 0, **kwargs) -> TreeBsde:
    """Discrete adjoint along the auxiliary process, with the Q-coefficient generator.

    ``cP1`` holds node values of the first representation coefficient on the
    tree's grid (it enters the Q-coefficients).  Terminal
    ``-G Xaux - Gtil E_t Xaux - gamma2``; generator
    ``Q1 Xaux + Q2 E_t Xaux + Q3 u + Q4 E_t u`` besides the linear terms.
    """
    from .model import q_coeffs_at

    spec, j = tree.spec, int(t_level)
    P = getattr(cP1, "values", cP1)
    p = tree_propagate(tree, control, j, **kwargs)
    XN = p.aux[-1]
    mN = XN.mean(axis=1)
    terminal = -(XN @ spec.G.T) - (mN @ spec.Gtil.T)[:, None] - spec.gamma2

    def forcing(k):
        i = k - j
        Q1, Q2, Q3, Q4 = q_coeffs_at(spec.C[k], spec.Ctil[k], spec.Atil[k], spec.Btil[k],
                                     spec.Dtil[k], spec.Q[k], spec.Qtil[k], P[k])
        X, u = p.aux[i], p.aux_u[i]
        return (X @ Q1.T + (X.mean(axis=1) @ Q2.T)[:, None] + u @ Q3.T
                + (u.mean(axis=1) @ Q4.T)[:, None])

    Y, Z = _backward(tree, j, terminal, forcing)
    return TreeBsde(j, Y, Z, p)


def discrete_y0(tree: TreeModel) -> np.ndarray:
    """Explicit-Euler counterpart of ``Y0`` on the tree's grid (node values)."""
    spec, N, h = tree.spec, tree.depth, tree.h
    out = np.empty((N + 1, spec.n, spec.n))
    out[N] = -np.eye(spec.n)
    sA = spec.A + spec.Atil
    for k in range(N - 1, -1, -1):
        out[k] = out[k + 1] + h * sA[k].T @ out[k + 1]
    return out


def spike_gradient(tree: TreeModel, control, t_level: int) -> np.ndarray:
    """Exact one-cell spike gradient at each anchor via the discrete adjoint.

    Returns ``(2**t_level, m)`` values of
    ``sR u - sB^T (Y0_{j+1} gamma1 x + E_j Y_{j+1}) - sD^T Z_j``; multiplying
    by ``h`` gives the first-order cost change per unit spike.
    """
    spec, j = tree.spec, int(t_level)
    bs = tree_bsde_solve(tree, control, j)
    y0 = discrete_y0(tree)
    x = bs.paths.anchors
    u = bs.paths.u[0][:, 0]
    EY = bs.Y[1].mean(axis=1)
    Z = bs.Z[0][:, 0]
    sB, sD, sR = spec.B[j] + spec.Btil[j], spec.D[j] + spec.Dtil[j], spec.R[j] + spec.Rtil[j]
    return (u @ sR.T - (spec.gamma1 * x @ y0[j + 1].T + EY) @ sB - Z @ sD)
