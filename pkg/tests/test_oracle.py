import numpy as np
import pytest

from mflq import oracle
from mflq.model import ProblemSpec
from mflq.oracle import NodeControl, TreeModel
from mflq.riccati import FeedbackLaw, solve_equilibrium_system
from mflq.simulate import RngConfig, evaluate_cost, simulate_state_from
from mflq.verify import decay_order

from _fixtures import generic_scalar, riccati_scalar, terminal_only, zero_problem


def random_node_control(spec, seed=0):
    rng = np.random.default_rng(seed)
    return NodeControl([rng.normal(size=(2 ** k, spec.m)) for k in range(spec.grid.steps)])


def test_depth_bound():
    with pytest.raises(oracle.DepthExceeded):
        TreeModel(zero_problem(steps=32))


def test_zero_coefficients_keep_anchor():
    s = zero_problem(steps=6).replace(x0=np.array([0.4]))
    p = oracle.tree_propagate(TreeModel(s), FeedbackLaw.zero(s.grid, 1, 1))
    for X in p.X:
        assert np.all(X == 0.4)


def test_one_step_children():
    s = ProblemSpec.build(steps=2, A=0.3, sigma=0.5, C=0.2, x0=1.0)
    h = 0.5
    p = oracle.tree_propagate(TreeModel(s), FeedbackLaw.zero(s.grid, 1, 1))
    x = 1.0
    up, down = sorted(p.X[1][0, :, 0])[::-1]
    assert up == pytest.approx(x + 0.3 * x * h + (0.2 * x + 0.5) * np.sqrt(h), abs=1e-15)
    assert down == pytest.approx(x + 0.3 * x * h - (0.2 * x + 0.5) * np.sqrt(h), abs=1e-15)
    assert p.mean[1][0, 0] == pytest.approx(x + 0.3 * x * h, abs=1e-15)


def test_conditional_mean_matches_mean_recursion():
    s = ProblemSpec.build(steps=10, A=0.4, Atil=-0.7, C=0.5, Ctil=0.3, b=0.2, sigma=0.1, x0=1.5)
    p = oracle.tree_propagate(TreeModel(s), FeedbackLaw.zero(s.grid, 1, 1))
    m, h = 1.5, s.grid.step_size
    for k in range(11):
        assert p.mean[k][0, 0] == pytest.approx(m, rel=1e-13)
        m = m + h * ((0.4 - 0.7) * m + 0.2)


def test_tree_cost_hand_values():
    s = zero_problem(steps=4)
    assert oracle.tree_cost(TreeModel(s), FeedbackLaw.zero(s.grid, 1, 1))[0] == 0.0
    s = ProblemSpec.build(steps=4, G=2.0, Gtil=0.5, gamma2=0.3, x0=0.7, gamma1=1.0)
    x = 0.7
    cost = oracle.tree_cost(TreeModel(s), FeedbackLaw.zero(s.grid, 1, 1))[0]
    assert cost == pytest.approx(0.5 * 2.5 * x * x + (x + 0.3) * x, abs=1e-15)


def test_monte_carlo_cost_converges_to_tree_cost():
    s = generic_scalar(steps=6)
    u = np.sin(np.arange(6.0))[:, None]
    exact = oracle.tree_cost(TreeModel(s), NodeControl.deterministic(u))[0]
    est = evaluate_cost(s, simulate_state_from(s, 0, s.x0, u, RngConfig(3), 100_000))
    assert abs(est.mean - exact) <= 3 * est.std_error


def test_spike_derivative_trivial_cases():
    s = zero_problem(steps=4)
    tree = TreeModel(s)
    law = FeedbackLaw.zero(s.grid, 1, 1)
    assert not oracle.tree_spike_derivative(tree, law, 1, 1.0).any()
    s = generic_scalar(steps=4)
    eq = solve_equilibrium_system(s)
    assert not oracle.tree_spike_derivative(TreeModel(s), eq.law, 2, 0.0).any()


def test_adjoint_gradient_matches_difference_quotient():
    s = generic_scalar(steps=8, gamma1=0.4)
    tree = TreeModel(s)
    ctrl = random_node_control(s)
    for j in (0, 3, 7):
        g = oracle.spike_gradient(tree, ctrl, j)
        plus = oracle.tree_spike_derivative(tree, ctrl, j, 1.0)
        minus = oracle.tree_spike_derivative(tree, ctrl, j, -1.0)
        np.testing.assert_allclose(0.5 * (plus - minus), g[:, 0], atol=1e-12)


def test_tree_equilibrium_trivial_cases():
    te = oracle.tree_equilibrium(TreeModel(zero_problem(steps=4).replace(R=np.ones((4, 1, 1)))))
    assert not te.Theta.any() and not te.phi.any()
    s = generic_scalar(steps=4, B=0.0, Btil=0.0, D=0.0, Dtil=0.0)
    te = oracle.tree_equilibrium(TreeModel(s))
    assert not te.Theta.any() and not te.phi.any()


def test_tree_equilibrium_is_exact_and_second_order():
    s = generic_scalar(steps=8, gamma1=0.3)
    tree = TreeModel(s)
    te = oracle.tree_equilibrium(tree)
    assert te.extraction_residual <= 1e-10
    assert te.second_order_ok
    for j in range(8):
        for v in (1.0, -1.0, 2.0, -2.0):
            assert np.min(oracle.tree_spike_derivative(tree, te.law, j, v)) >= -1e-9


def test_tree_gain_refines_towards_continuous_gain():
    ref = solve_equilibrium_system(riccati_scalar(steps=1024)).law
    depths = (4, 8, 16)
    gaps = []
    for d in depths:
        s = riccati_scalar(steps=d)
        te = oracle.tree_equilibrium(TreeModel(s))
        nodes = ref.regrid(s.grid).Theta[:d]
        gaps.append(float(np.max(np.abs(te.Theta - nodes))))
    assert gaps[0] > gaps[1] > gaps[2]
    assert 0.7 <= decay_order(depths, gaps) <= 1.3


def test_bsde_trivial_and_terminal_only():
    s = zero_problem(steps=4)
    bs = oracle.tree_bsde_solve(TreeModel(s), FeedbackLaw.zero(s.grid, 1, 1))
    assert all(not Y.any() for Y in bs.Y) and all(not Z.any() for Z in bs.Z)
    s = terminal_only(steps=6)
    bs = oracle.tree_bsde_solve(TreeModel(s), NodeControl.deterministic(np.ones((6, 1))))
    for Y in bs.Y:
        np.testing.assert_allclose(Y, -(1.0 + 0.5) * 0.7 - 0.3, atol=1e-15)


def test_tree_is_bitwise_repeatable():
    s = generic_scalar(steps=8)
    a = oracle.tree_equilibrium(TreeModel(s))
    b = oracle.tree_equilibrium(TreeModel(s))
    assert np.array_equal(a.Theta, b.Theta) and np.array_equal(a.phi, b.phi)
