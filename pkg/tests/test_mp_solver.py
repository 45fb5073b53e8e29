import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from chordqp.coupled_qp import CoupledQP, QuadraticTerm, VariableSpace, assemble_dense, load
from chordqp.errors import InconsistentConstraints
from chordqp.generators import random_classical, random_coupled_qp
from chordqp.graph import build_clique_tree, tree_for_problem
from chordqp.mp_solver import message_schedule, solve_tree, upward_pass
from chordqp.mpc_models import ClassicalMpc, lower_classical

from conftest import dense_kkt, rel_err
from test_graph import EXAMPLE_CLIQUES

SCALAR = dict(A=[[1.0]], B=[[1.0]], Q=np.eye(2), S_terminal=[[1.0]], x_bar=[1.0])


def test_chain_message_is_riccati_step():
    qp, tree = lower_classical(ClassicalMpc(N=2, **SCALAR))
    up = upward_pass(qp, tree)
    msg = up.messages[1]
    assert msg.scope == tuple(qp.space.blocks["x1"])
    np.testing.assert_allclose(msg.H, [[1.5]])
    np.testing.assert_allclose(msg.h, [0.0], atol=1e-15)


def test_single_clique_has_no_messages():
    qp = CoupledQP(VariableSpace(2), (QuadraticTerm((0, 1), np.eye(2), [1.0, 0.0]),))
    tree = tree_for_problem(qp)
    assert upward_pass(qp, tree).messages == {}
    sol = solve_tree(qp, tree)
    np.testing.assert_allclose(sol.x_star, [-1.0, 0.0])


def test_worked_message_matches_subtree_minimisation():
    qp = load("problems/worked_example.json")
    tree = tree_for_problem(qp, root_hint=0)
    cl = [tuple(v - 1 for v in c) for c in EXAMPLE_CLIQUES]
    assert [tuple(c) for c in tree.cliques] == cl
    up = upward_pass(qp, tree)
    msg = up.messages[1]  # clique {1,3,4} to the root {1,2,4}
    assert msg.scope == (0, 3)
    # brute force: minimise the terms held by the subtree {C2, C4, C5} over x3, x6, x7, x8
    subtree = {1, 3, 4}
    terms = tuple(t for k, t in enumerate(qp.terms) if tree.assignment[k] in subtree)
    sub = CoupledQP(VariableSpace(8), terms + (QuadraticTerm((1, 2, 4, 5, 6, 7), np.zeros((6, 6)), np.zeros(6)),))
    Q, q, A, b, _, _ = assemble_dense(sub)
    priv = [2, 5, 6, 7]
    rng = np.random.default_rng(0)
    for _ in range(10):
        y = rng.standard_normal(2)
        z = np.zeros(8)
        z[[0, 3]] = y
        Qp = Q[np.ix_(priv, priv)]
        Ap = A[:, priv]
        rhs = np.concatenate([-(q[priv] + Q[np.ix_(priv, [0, 3])] @ y), b - A[:, [0, 3]] @ y])
        K = np.block([[Qp, Ap.T], [Ap, np.zeros((A.shape[0],) * 2)]])
        z[priv] = sla.solve(K, rhs)[: len(priv)] if A.shape[0] else np.linalg.solve(Qp, rhs)
        val = 0.5 * z @ Q @ z + q @ z + sum(t.c for t in terms)
        assert msg.value(y) == pytest.approx(val, abs=1e-12)


def test_scalar_lq_solution():
    qp, tree = lower_classical(ClassicalMpc(N=2, **SCALAR))
    sol = solve_tree(qp, tree)
    b = qp.space.blocks
    u = [sol.x_star[b["u0"][0]], sol.x_star[b["u1"][0]]]
    x = [sol.x_star[b[f"x{k}"][0]] for k in range(3)]
    np.testing.assert_allclose(u, [-0.6, -0.2], atol=1e-12)
    np.testing.assert_allclose(x, [1.0, 0.4, 0.2], atol=1e-12)
    assert sol.objective == pytest.approx(0.8, abs=1e-12)


def test_root_only_problem_is_dense_solve(rng):
    qp = random_coupled_qp(rng, n_max=6, max_cliques=1)
    tree = tree_for_problem(qp)
    assert tree.size == 1
    x, _ = dense_kkt(qp)
    assert rel_err(solve_tree(qp, tree).x_star, x) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matches_dense_kkt(seed):
    qp = random_coupled_qp(np.random.default_rng(seed), n_max=30, max_cliques=8)
    x, lam = dense_kkt(qp)
    sol = solve_tree(qp, tree_for_problem(qp))
    assert rel_err(sol.x_star, x) <= 1e-8
    assert rel_err(sol.lam, lam) <= 1e-7
    assert sol.objective == pytest.approx(qp.objective(sol.x_star), rel=1e-9, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_root_choice_invariance(seed):
    qp = random_coupled_qp(np.random.default_rng(seed), n_max=25, max_cliques=8)
    tree = tree_for_problem(qp)
    ref = solve_tree(qp, tree).x_star
    for r in range(tree.size):
        assert rel_err(solve_tree(qp, tree.with_root(r)).x_star, ref) <= 1e-8


def test_messages_depend_only_on_subtree(rng):
    """Changing data outside a subtree leaves the messages sent inside it untouched."""
    qp = load("problems/worked_example.json")
    tree = tree_for_problem(qp, root_hint=0)
    up1 = upward_pass(qp, tree)
    k_root = [k for k, c in enumerate(tree.assignment) if c == tree.root][0]
    t = qp.terms[k_root]
    changed = list(qp.terms)
    changed[k_root] = QuadraticTerm(t.scope, 3.0 * t.P, t.p + 1.0, t.c + 2.0, t.eq_A, t.eq_b)
    up2 = upward_pass(CoupledQP(qp.space, tuple(changed)), tree)
    for i, m in up1.messages.items():
        np.testing.assert_array_equal(m.H, up2.messages[i].H)
        np.testing.assert_array_equal(m.h, up2.messages[i].h)


def test_schedule_levels():
    tree = build_clique_tree([tuple(v - 1 for v in c) for c in EXAMPLE_CLIQUES], root_hint=0)
    sched = message_schedule(tree)
    assert sched.levels == ((2, 3, 4), (1,))
    assert [e[0] for e in sched.upward_order] == [2, 3, 4, 1]
    assert sched.down_levels[0] == (0,)


def test_parallel_bit_identical(rng):
    qp, tree = lower_classical(random_classical(rng, 3, 2, 20))
    a = solve_tree(qp, tree)
    for workers in (True, 2, 7):
        b = solve_tree(qp, tree, parallel=workers)
        assert np.array_equal(a.x_star, b.x_star) and np.array_equal(a.lam, b.lam)


def test_inconsistent_constraints_reported():
    qp = load("problems/infeasible.json")
    with pytest.raises(InconsistentConstraints):
        solve_tree(qp, tree_for_problem(qp))


def test_inequalities_rejected():
    qp = CoupledQP(VariableSpace(1), (QuadraticTerm((0,), [[1.0]], [0.0], ineq_D=[[1.0]], ineq_e=[1.0]),))
    with pytest.raises(ValueError):
        solve_tree(qp, tree_for_problem(qp))


def test_timings_reported(rng):
    qp, tree = lower_classical(random_classical(rng, 2, 1, 5))
    t = solve_tree(qp, tree).timings
    assert {"upward", "downward"} <= set(t)
