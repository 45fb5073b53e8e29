"""Brute-force reference solvers used to check the structured ones.

They ignore structure entirely and are only meant for small problems.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .coupled_qp import CoupledQP, assemble_dense, objective_constant
from .mpc_models import LassoMpc, block_values, lower_classical


@dataclass
class OracleSolution:
    z: np.ndarray
    lam: np.ndarray
    objective: float
    active: tuple = ()


def _kkt(Q, q, A, b):
    n, m = Q.shape[0], A.shape[0]
    K = np.block([[Q, A.T], [A, np.zeros((m, m))]])
    sol = sla.solve(K, np.concatenate([-q, b]), assume_a="sym")
    return sol[:n], sol[n:]


def dense_kkt_solve(qp: CoupledQP) -> OracleSolution:
    """Solve the assembled equality-constrained QP with one dense KKT solve."""
    if qp.n_ineq:
        raise ValueError("dense KKT oracle handles equality constraints only")
    Q, q, A, b, _, _ = assemble_dense(qp)
    z, lam = _kkt(Q, q, A, b)
    return OracleSolution(z, lam, float(0.5 * z @ Q @ z + q @ z + objective_constant(qp)))


def active_set_enumeration(qp: CoupledQP, groups=None, tol: float = 1e-9) -> OracleSolution:
    """Try every active-set pattern and keep the best KKT point.

    ``groups`` lists mutually exclusive inequality rows (e.g. the lower and
    upper bound of one input); each group contributes "none active" or one
    of its rows. By default every row is its own group.
    """
    Q, q, A, b, D, e = assemble_dense(qp)
    nrows = D.shape[0]
    groups = [(i,) for i in range(nrows)] if groups is None else [tuple(g) for g in groups]
    const = objective_constant(qp)
    scale = 1.0 + np.abs(e).max(initial=0.0)
    best: OracleSolution | None = None
    for choice in itertools.product(*[(None,) + g for g in groups]):
        act = [i for i in choice if i is not None]
        Aa = np.vstack([A, D[act]])
        ba = np.concatenate([b, e[act]])
        try:
            K = np.block([[Q, Aa.T], [Aa, np.zeros((Aa.shape[0], Aa.shape[0]))]])
            if np.linalg.matrix_rank(K) < K.shape[0]:
                continue
            z, mult = _kkt(Q, q, Aa, ba)
        except (np.linalg.LinAlgError, sla.LinAlgWarning):
            continue
        mu = mult[A.shape[0]:]
        if np.any(D @ z > e + tol * scale) or np.any(mu < -tol * (1.0 + np.abs(mu).max(initial=0.0))):
            continue
        obj = float(0.5 * z @ Q @ z + q @ z + const)
        if best is None or obj < best.objective - 1e-12:
            best = OracleSolution(z, mult[: A.shape[0]], obj, tuple(act))
    if best is None:
        raise ValueError("no active-set pattern satisfies the optimality conditions")
    return best


def lasso_sign_enumeration(m: LassoMpc, tol: float = 1e-9):
    """Solve a Lasso MPC by enumerating the sign of every entry of ``E x_k + F u_k``.

    A pattern fixes each entry to be positive, negative or zero; the
    resulting problem is an equality QP. Patterns whose solution contradicts
    the fixed signs are discarded. Returns ``(x, u, objective)``.
    """
    base = m.base
    if base.has_inequalities:
        raise ValueError("sign enumeration ignores inequality rows; none are allowed")
    qp, _ = lower_classical(base)
    Q, q, A, b, _, _ = assemble_dense(qp)
    const = objective_constant(qp)
    blocks = qp.space.blocks
    Y = []
    for k in range(base.N):
        rows = np.zeros((m.E_seq[k].shape[0], qp.n))
        rows[:, list(blocks[f"x{k}"])] = m.E_seq[k]
        rows[:, list(blocks[f"u{k}"])] = m.F_seq[k]
        Y.append(rows)
    Y = np.vstack(Y)
    best = None
    for signs in itertools.product((-1.0, 0.0, 1.0), repeat=Y.shape[0]):
        sg = np.array(signs)
        zero = sg == 0
        Aa = np.vstack([A, Y[zero]])
        ba = np.concatenate([b, np.zeros(int(zero.sum()))])
        try:
            z, _ = _kkt(Q, q + Y.T @ sg, Aa, ba)
        except np.linalg.LinAlgError:
            continue
        y = Y @ z
        if np.any(sg * y < -tol * (1.0 + np.abs(y).max(initial=0.0))):
            continue
        obj = float(0.5 * z @ Q @ z + q @ z + const + np.abs(y).sum())
        if best is None or obj < best[1] - 1e-12:
            best = (z, obj)
    z, obj = best
    vals = block_values(qp.space, z)
    x = np.array([vals[f"x{k}"] for k in range(base.N + 1)])
    u = np.array([vals[f"u{k}"] for k in range(base.N)])
    return x, u, obj
