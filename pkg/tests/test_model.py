import numpy as np
import pytest

from mflq.model import (
    ProblemSpec,
    TimeGrid,
    aggregate,
    aggregated_spec,
    build_q_coeffs,
    nodes_view,
    q_coeffs_at,
    require_valid,
    validate,
)
from mflq.riccati import solve_hat_p1

from _fixtures import generic_scalar, zero_problem


def test_grid_nodes_and_lookup():
    g = TimeGrid(2.0, 8)
    assert g.step_size == 0.25
    assert g.nodes[-1] == 2.0
    assert g.index_of(0.5) == 2
    assert g.cells_of(0.75) == 3
    with pytest.raises(ValueError):
        g.index_of(0.3)
    with pytest.raises(ValueError):
        g.cells_of(0.1)


@pytest.mark.parametrize("steps", [0, 1, 2.5])
def test_grid_rejects_bad_steps(steps):
    with pytest.raises(ValueError):
        TimeGrid(1.0, steps)


def test_build_broadcasts_and_samples_callables():
    s = ProblemSpec.build(horizon=1.0, steps=4, n=2, m=1, A=lambda t: t * np.eye(2), R=1.0)
    assert s.A.shape == (4, 2, 2)
    np.testing.assert_allclose(s.A[:, 0, 0], [0.0, 0.25, 0.5, 0.75])
    assert s.R.shape == (4, 1, 1)
    assert s.G.shape == (2, 2) and not s.G.any()
    assert validate(s).ok


def test_build_rejects_unknown_coefficient():
    with pytest.raises(TypeError):
        ProblemSpec.build(steps=4, Z=1.0)


def test_validate_names_shape_and_symmetry_problems():
    s = ProblemSpec.build(steps=4, n=1, m=2)
    bad = s.replace(R=np.tile(np.array([[1.0, 0.3], [0.0, 1.0]]), (4, 1, 1)),
                    B=np.zeros((4, 2, 2)))
    report = validate(bad)
    assert report.fields() == {"R", "B"}
    kinds = {i.field: i.kind for i in report.issues}
    assert kinds == {"R": "asymmetric", "B": "shape"}
    assert "dimension mismatch" in str(report)
    with pytest.raises(ValueError, match="R"):
        require_valid(bad)


def test_validate_flags_nonfinite_cell():
    s = ProblemSpec.build(steps=4)
    Q = s.Q.copy()
    Q[2] = np.nan
    issue = validate(s.replace(Q=Q)).issues[0]
    assert (issue.field, issue.kind, issue.cell) == ("Q", "nonfinite", 2)


def test_regrid_refinement_preserves_paths():
    s = ProblemSpec.build(steps=4, A=lambda t: t)
    fine = s.regrid(8)
    np.testing.assert_array_equal(fine.A[::2], s.A)
    np.testing.assert_array_equal(fine.A[1::2], s.A)


def test_aggregate_and_aggregated_spec():
    s = generic_scalar(steps=8)
    agg = aggregate(s)
    np.testing.assert_allclose(agg.sA, s.A + s.Atil)
    np.testing.assert_allclose(agg.sR, s.R + s.Rtil)
    a = aggregated_spec(s)
    assert not a.Atil.any() and not a.Dtil.any()
    np.testing.assert_allclose(a.B, agg.sB)


def test_nodes_view_repeats_last_cell():
    path = np.arange(3.0)
    np.testing.assert_array_equal(nodes_view(path), [0.0, 1.0, 2.0, 2.0])


def test_q_coeffs_signs_on_scalar_values():
    # C=2, Ctil=3, Atil=5, Btil=7, Dtil=11, Q=13, Qtil=17, cP1=-1
    Q1, Q2, Q3, Q4 = q_coeffs_at(*(np.array([[v]]) for v in (2, 3, 5, 7, 11, 13, 17, -1)))
    assert Q1[0, 0] == -(13 + 2 * -1 * 3 + -1 * 5)
    assert Q2[0, 0] == -(17 - 2 * -1 * 3 - -1 * 5)
    assert Q3[0, 0] == -(2 * -1 * 11 + -1 * 7)
    assert Q4[0, 0] == -Q3[0, 0]


def test_build_q_coeffs_grid_mismatch():
    s = zero_problem(steps=4)
    with pytest.raises(ValueError):
        build_q_coeffs(s, solve_hat_p1(s.regrid(8)))


def test_scaled_and_sum():
    s = generic_scalar(steps=4)
    t = s + s.scaled(2.0)
    np.testing.assert_allclose(t.A, 3 * s.A)
    assert t.gamma1 == 3 * s.gamma1
