"""Collects one verdict per acceptance criterion for the terminal summary."""

CRITERIA = {
    1: "integrator order",
    2: "first-order equilibrium identities",
    3: "second-order condition",
    4: "oracle gain concordance",
    5: "spike-variation positivity",
    6: "exact mean-field identity",
    7: "representation refinement",
    8: "reductions",
    9: "uniqueness machinery",
    10: "determinism",
}
_results = {}


def record(number, passed, detail):
    _results[number] = (bool(passed), detail)
    print(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {detail}")


def summary_lines():
    if not _results:
        return []
    out = []
    for number, name in CRITERIA.items():
        if number in _results:
            ok, detail = _results[number]
            out.append(f"[{'PASS' if ok else 'FAIL'}] {number:2d} {name}: {detail}")
        else:
            out.append(f"[FAIL] {number:2d} {name}: not run or raised before reporting")
    return out
