"""Command line front end: ``mflq solve|simulate|verify|oracle-compare|export``.

Exit statuses: 0 when every requested check passed, 1 when a check failed
or a sweep diverged, 2 for usage and problem-file errors, 3 when a requested
check is not checkable for the given problem.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, oracle
from .io import (
    ProblemFileError,
    flat_names,
    load_problem,
    problem_to_dict,
    write_csv,
    write_json,
    write_text_table,
)
from .model import ProblemSpec, validate
from .riccati import EquilibriumSolution, FeedbackLaw, SweepDivergence, solve_equilibrium_system
from .simulate import RngConfig, equilibrium_cost, simulate_closed_loop, spike_cost_derivative
from .verify import (
    certify,
    check_uniqueness,
    representation_gap,
)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_NOT_CHECKABLE = 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    problem: str | None = None
    steps: int | None = None
    seed: int = 0
    outer: int = 64
    inner: int = 4096
    samples: int = 1000
    eps: list = field(default_factory=list)
    out: str = "mflq-out"
    tol_first_order: float = 1e-9
    tol_margin: float = 1e-10
    uniqueness: bool = False
    spike: bool = False
    depths: list = field(default_factory=lambda: [8, 12, 16])
    reference_steps: int = 2048
    result: str | None = None

    def check(self) -> None:
        if self.outer < 2 or self.inner < 2 or self.samples < 2:
            raise UsageError("sample counts (--outer, --inner, --samples) must be at least 2")
        if self.eps and any(a <= b for a, b in zip(self.eps, self.eps[1:])):
            raise UsageError("--eps must be strictly decreasing")
        if any(e <= 0 for e in self.eps):
            raise UsageError("--eps entries must be positive")
        if any(d > oracle.MAX_DEPTH or d < 2 for d in self.depths):
            raise UsageError(f"--depths entries must lie in [2, {oracle.MAX_DEPTH}]")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mflq", description="Open-loop equilibria of conditional mean-field LQ problems.")
    parser.add_argument("--version", action="version", version=f"mflq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, problem=True):
        if problem:
            p.add_argument("--problem", required=True, help="problem file (JSON)")
            p.add_argument("--steps", type=int, help="resample the problem onto this many cells")
        p.add_argument("--out", default="mflq-out", help="output directory")

    def sampling(p):
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--outer", type=int, default=64, help="outer samples for spike tests")
        p.add_argument("--inner", type=int, default=4096, help="inner samples per outer sample")
        p.add_argument("--samples", type=int, default=1000, help="paths for cost estimates")

    p = sub.add_parser("solve", help="solve the equilibrium system and write the solution")
    common(p)

    p = sub.add_parser("simulate", help="simulate the closed-loop equilibrium state")
    common(p)
    sampling(p)

    p = sub.add_parser("verify", help="certify the equilibrium and exit 0 iff it passes")
    common(p)
    sampling(p)
    p.add_argument("--eps", type=_float_list, default=[],
                   help="spike lengths e1,e2,... (strictly decreasing, grid aligned)")
    p.add_argument("--tol-first-order", type=float, default=1e-9)
    p.add_argument("--tol-margin", type=float, default=1e-10)
    p.add_argument("--uniqueness", action="store_true", help="also run the uniqueness checks")
    p.add_argument("--spike", action="store_true", help="also run the Monte Carlo spike test")

    p = sub.add_parser("oracle-compare", help="gaps between tree oracle and solver vs depth")
    common(p)
    sampling(p)
    p.add_argument("--depths", type=_int_list, default=[8, 12, 16])
    p.add_argument("--reference-steps", type=int, default=2048,
                   help="grid for the reference gain at time 0")

    p = sub.add_parser("export", help="rewrite the solution CSV from a result document")
    common(p, problem=False)
    p.add_argument("--result", required=True, help="result.json written by solve")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    known = RunConfig.__dataclass_fields__
    cfg = RunConfig(**{k: v for k, v in vars(args).items() if k in known})
    cfg.check()
    return cfg


# ---------------------------------------------------------------------------
# Solution tables


def solution_table(spec: ProblemSpec, eq: EquilibriumSolution) -> tuple[list[str], np.ndarray]:
    n, m = spec.n, spec.m
    N = spec.grid.steps
    blocks = [("Y0", eq.Y0.values, (n, n)), ("hatP1", eq.hatP1.values, (n, n)),
              ("P1", eq.P1s.values, (n, n)), ("P2", eq.P2s.values, (n, n)),
              ("P3", eq.P3s.values, (n,)), ("P4", eq.P4s.values, (n,)),
              ("Theta", eq.law.Theta, (m, n)), ("phi", eq.law.phi, (m,))]
    cols = ["node", "time"]
    data = [np.arange(N + 1), spec.grid.nodes]
    for name, vals, shape in blocks:
        cols += flat_names(name, shape)
        data.append(np.asarray(vals).reshape(N + 1, -1))
    cols += ["margin", "range_theta", "range_phi"]
    data += [eq.second_order_margin, eq.range_report.astype(float)]
    return cols, np.column_stack(data)


def _write_solution(out: Path, spec: ProblemSpec, eq: EquilibriumSolution) -> list[str]:
    cols, data = solution_table(spec, eq)
    write_csv(out / "solution.csv", cols, data, int_columns=(0, len(cols) - 2, len(cols) - 1))
    doc = {
        "problem": problem_to_dict(spec),
        "solution": {
            "Y0": eq.Y0.values, "hatP1": eq.hatP1.values,
            "P1": eq.P1s.values, "P2": eq.P2s.values, "P3": eq.P3s.values, "P4": eq.P4s.values,
            "Theta": eq.law.Theta, "phi": eq.law.phi,
            "second_order_margin": eq.second_order_margin,
            "range_report": eq.range_report,
        },
    }
    write_json(out / "result.json", doc)
    return ["solution.csv", "result.json"]


# ---------------------------------------------------------------------------
# Commands


def _load(cfg: RunConfig) -> ProblemSpec:
    spec = load_problem(cfg.problem, cfg.steps)
    report = validate(spec)
    if not report.ok:
        raise ProblemFileError(f"invalid problem {cfg.problem}:\n{report}")
    return spec


def _solve(spec: ProblemSpec) -> EquilibriumSolution:
    return solve_equilibrium_system(spec)


def cmd_solve(cfg: RunConfig, out: Path) -> tuple[int, dict]:
    spec = _load(cfg)
    eq = _solve(spec)
    files = _write_solution(out, spec, eq)
    summary = {"Theta0": eq.law.Theta[0], "phi0": eq.law.phi[0],
               "min_margin": float(np.min(eq.second_order_margin)), "range_ok": eq.range_ok,
               "symmetry_defect_P1": eq.symmetry_defect()}
    print(f"solved {spec.name} on {spec.grid.steps} steps: Theta*(0) = "
          f"{np.array2string(eq.law.Theta[0], precision=8)}, min margin "
          f"{summary['min_margin']:.6e}, range {'ok' if eq.range_ok else 'violated'}")
    return EXIT_OK, {"outputs": files, "summary": summary}


def cmd_simulate(cfg: RunConfig, out: Path) -> tuple[int, dict]:
    spec = _load(cfg)
    eq = _solve(spec)
    rng = RngConfig(cfg.seed)
    ens = simulate_closed_loop(spec, eq.law, rng, cfg.samples)
    S, N = ens.samples, spec.grid.steps
    U = np.concatenate([ens.U, ens.U[:, -1:]], axis=1)  # terminal node repeats the last cell
    data = np.column_stack([
        np.repeat(ens.path_ids, N + 1), np.tile(spec.grid.nodes, S),
        ens.X.reshape(S * (N + 1), spec.n), U.reshape(S * (N + 1), spec.m)])
    cols = ["path_id", "time"] + flat_names("x", (spec.n,)) + flat_names("u", (spec.m,))
    write_csv(out / "ensemble.csv", cols, data, int_columns=(0,))
    cost = equilibrium_cost(spec, eq.law, rng, cfg.samples)
    write_json(out / "cost.json", {"cost": asdict(cost), "seed": cfg.seed})
    print(f"simulated {S} paths; J(u*) = {cost.mean:.8e} +- {cost.std_error:.2e}")
    return EXIT_OK, {"outputs": ["ensemble.csv", "cost.json"], "summary": asdict(cost)}


def _spike_ladder(cfg: RunConfig, spec: ProblemSpec) -> list[float]:
    grid = spec.grid
    if cfg.eps:
        for e in cfg.eps:
            try:
                grid.cells_of(e)
            except ValueError:
                raise UsageError(f"--eps entry {e} is not a whole number of cells") from None
        return cfg.eps
    T = grid.horizon
    try:
        return [grid.cells_of(T / q) * grid.step_size for q in (10, 20, 40)]
    except ValueError:
        return [c * grid.step_size for c in (4, 2, 1) if c < grid.steps]


def _spike_check(cfg: RunConfig, spec: ProblemSpec, eq: EquilibriumSolution):
    """Spike positivity at t in {0, T/4, T/2, 3T/4} (snapped down to the grid)."""
    N = spec.grid.steps
    eps = _spike_ladder(cfg, spec)
    rng = RngConfig(cfg.seed)
    vs = np.concatenate([np.eye(spec.m), -np.eye(spec.m)])
    rows, worst = [], np.inf
    for q in range(4):
        j = (q * N) // 4
        usable = [e for e in eps if j + spec.grid.cells_of(e) <= N]
        for est in spike_cost_derivative(spec, eq.law, j, vs, usable, rng,
                                         outer=cfg.outer, inner=cfg.inner):
            z = est.estimate / max(est.std_error, 1e-300) if est.estimate < 0 else np.inf
            worst = min(worst, z)
            rows.append({"t_index": j, **est.to_dict()})
    ok = bool(worst >= -3.0)
    detail = "all spike derivatives >= -3 standard errors" if ok else \
        f"a spike derivative is {worst:.2f} standard errors below zero"
    return ok, detail, rows


def cmd_verify(cfg: RunConfig, out: Path) -> tuple[int, dict]:
    spec = _load(cfg)
    eq = _solve(spec)
    cert = certify(spec, eq, cfg.tol_first_order, cfg.tol_margin, reductions=True)
    status = EXIT_OK
    extra = {}
    if cfg.spike:
        ok, detail, rows = _spike_check(cfg, spec, eq)
        cert.extra_checks["spike_positivity"] = (ok, detail)
        cert.spike_report = rows
    if spec.grid.steps <= oracle.MAX_DEPTH:
        try:
            te = oracle.tree_equilibrium(oracle.TreeModel(spec))
            gap = float(np.max(np.abs(te.Theta[0] - eq.law.Theta[0])))
            cert.extra_checks["oracle:second_order"] = (
                te.second_order_ok, f"tree one-cell Hessians; gain gap at 0 is {gap:.3e}")
        except oracle.NoDiscreteEquilibrium as exc:
            cert.extra_checks["oracle:second_order"] = (False, str(exc))
    not_checkable = None
    if cfg.uniqueness:
        rep = check_uniqueness(spec, eq)
        extra["uniqueness"] = rep.to_dict()
        if rep.status == "not checkable":
            not_checkable = f"uniqueness not checkable: {rep.message}"
        else:
            cert.extra_checks["uniqueness"] = (rep.status == "pass", rep.message or "converging")
    doc = cert.to_dict()
    doc.update(extra)
    doc["not_checkable"] = not_checkable
    write_json(out / "certificate.json", doc)
    write_text_table(out / "checks.csv", ["check", "passed", "detail"],
                     [[n, int(ok), d] for n, ok, d in cert.checks()])
    for name, ok, detail in cert.checks():
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    if not cert.passed:
        print(f"certificate FAILED at {cert.first_failure}", file=sys.stderr)
        status = EXIT_FAIL
    elif not_checkable:
        print(not_checkable, file=sys.stderr)
        status = EXIT_NOT_CHECKABLE
    else:
        print("certificate passed")
    return status, {"outputs": ["certificate.json", "checks.csv"],
                    "summary": {"passed": cert.passed, "first_failure": cert.first_failure,
                                "not_checkable": not_checkable}}


def _rel(gap: float, ref: float) -> float:
    return gap / ref if ref > 0 else gap


def cmd_oracle_compare(cfg: RunConfig, out: Path) -> tuple[int, dict]:
    spec = _load(cfg)
    ref = solve_equilibrium_system(spec.regrid(cfg.reference_steps)).law.Theta[0]
    ref_norm = float(np.max(np.abs(ref)))
    rng = RngConfig(cfg.seed)
    v = np.eye(spec.m)[0]
    rows = []
    for d in cfg.depths:
        s = spec.regrid(d)
        tree = oracle.TreeModel(s)
        te = oracle.tree_equilibrium(tree)
        eq = solve_equilibrium_system(s)
        gain_gap = float(np.max(np.abs(te.Theta[0] - ref)))
        cost_tree = float(oracle.tree_cost(tree, te.law)[0])
        cost_mc = equilibrium_cost(s, te.law, rng, cfg.samples)
        spike_tree = float(oracle.tree_spike_derivative(tree, te.law, 0, v)[0])
        (spike_mc,) = spike_cost_derivative(s, te.law, 0, v, [s.grid.step_size], rng,
                                            outer=cfg.outer, inner=cfg.inner)
        bsde = representation_gap(s, eq.law)
        rows.append([d, gain_gap, _rel(gain_gap, ref_norm), cost_tree, cost_mc.mean,
                     cost_mc.std_error, abs(cost_mc.mean - cost_tree), spike_tree,
                     spike_mc.estimate, spike_mc.std_error, abs(spike_mc.estimate - spike_tree),
                     bsde])
    cols = ["depth", "gain_gap", "gain_gap_rel", "cost_tree", "cost_mc", "cost_mc_se",
            "cost_gap", "spike_tree", "spike_mc", "spike_mc_se", "spike_gap", "bsde_gap"]
    write_csv(out / "oracle_compare.csv", cols, np.array(rows), int_columns=(0,))
    for r in rows:
        print(f"depth {r[0]:2d}: gain gap {r[1]:.3e} (rel {r[2]:.3e}), cost gap {r[6]:.2e} "
              f"(se {r[5]:.1e}), spike gap {r[10]:.2e} (se {r[9]:.1e}), bsde gap {r[11]:.2e}")
    return EXIT_OK, {"outputs": ["oracle_compare.csv"],
                     "summary": {"gain_gap_rel": [r[2] for r in rows]}}


def cmd_export(cfg: RunConfig, out: Path) -> tuple[int, dict]:
    try:
        doc = json.loads(Path(cfg.result).read_text())
        spec = ProblemSpec.build(**{k: doc["problem"][k] for k in ("horizon", "steps", "n", "m")},
                                 gamma1=doc["problem"]["gamma1"], name=doc["problem"]["name"],
                                 **doc["problem"]["coefficients"])
        sol = {k: np.asarray(v) for k, v in doc["solution"].items()}
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read result document {cfg.result}: {exc}") from None
    from .riccati import BackwardOdeSolution as B

    g = spec.grid
    eq = EquilibriumSolution(
        P1s=B(g, sol["P1"], "P1*"), P2s=B(g, sol["P2"], "P2*"), P3s=B(g, sol["P3"], "P3*"),
        P4s=B(g, sol["P4"], "P4*"), law=FeedbackLaw(g, sol["Theta"], sol["phi"]),
        range_report=sol["range_report"].astype(bool),
        second_order_margin=sol["second_order_margin"], Y0=B(g, sol["Y0"], "Y0"),
        hatP1=B(g, sol["hatP1"], "hatP1"))
    cols, data = solution_table(spec, eq)
    write_csv(out / "solution.csv", cols, data, int_columns=(0, len(cols) - 2, len(cols) - 1))
    print(f"exported {len(data)} rows to {out / 'solution.csv'}")
    return EXIT_OK, {"outputs": ["solution.csv"]}


COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "oracle-compare": cmd_oracle_compare,
    "export": cmd_export,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
    except UsageError as exc:
        parser.error(str(exc))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    info: dict = {}
    try:
        status, info = COMMANDS[cfg.command](cfg, out)
    except (ProblemFileError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status, info = EXIT_USAGE, {"error": str(exc)}
    except SweepDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        status, info = EXIT_FAIL, {"error": str(exc), "node": exc.node, "time": exc.time}
    except oracle.DepthExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        status, info = EXIT_USAGE, {"error": str(exc)}
    write_json(out / "manifest.json", {
        "tool": f"mflq {__version__}", "started": started, "config": asdict(cfg),
        "exit_status": status, **info})
    return status


if __name__ == "__main__":
    sys.exit(main())
