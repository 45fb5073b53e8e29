"""Seeded random instances for tests and benchmarks."""

from __future__ import annotations

import numpy as np

from .coupled_qp import CoupledQP, QuadraticTerm, VariableSpace
from .mpc_models import ClassicalMpc


def random_stable_system(rng: np.random.Generator, n: int, m: int, radius: float = 0.9):
    A = rng.standard_normal((n, n))
    rho = max(np.abs(np.linalg.eigvals(A)).max(), 1e-12)
    return A * (radius / rho), rng.standard_normal((n, m))


def random_psd(rng: np.random.Generator, k: int, shift: float = 0.1) -> np.ndarray:
    M = rng.standard_normal((k, k))
    return M @ M.T / k + shift * np.eye(k)


def random_classical(
    rng: np.random.Generator,
    n: int,
    m: int,
    N: int,
    affine: bool = True,
    box: float | None = None,
    linear: bool = False,
) -> ClassicalMpc:
    """Stable LQ instance; ``box`` adds ``|u_k| <= box`` inequality rows."""
    A, B = random_stable_system(rng, n, m)
    Q = random_psd(rng, n + m)
    S = random_psd(rng, n)
    xbar = rng.standard_normal(n)
    v = [0.1 * rng.standard_normal(n) for _ in range(N)] if affine else None
    q = [0.1 * rng.standard_normal(n + m) for _ in range(N)] if linear else None
    C = D = e = None
    if box is not None:
        C = np.zeros((2 * m, n))
        D = np.vstack([np.eye(m), -np.eye(m)])
        e = box * np.ones(2 * m)
    return ClassicalMpc(A, B, Q, S, xbar, N, v, C, D, e, q)


def random_coupled_qp(
    rng: np.random.Generator,
    n_max: int = 40,
    max_cliques: int = 10,
    eq_prob: float = 0.5,
) -> CoupledQP:
    """Loosely coupled equality-constrained QP with a random tree-like scope structure.

    Scopes are grown as a random tree of overlapping index groups, so the
    sparsity graph has at most ``max_cliques`` cliques. Every term has a
    positive definite ``P`` and at most one equality row per private index,
    which keeps the global KKT matrix nonsingular with high probability.
    """
    n_groups = int(rng.integers(1, max_cliques + 1))
    groups: list[list[int]] = []
    nxt = 0
    for g in range(n_groups):
        if nxt >= n_max:
            break
        if g == 0:
            size = int(rng.integers(1, 5))
            grp = list(range(nxt, min(nxt + size, n_max)))
        else:
            parent = groups[int(rng.integers(0, len(groups)))]
            k_sep = int(rng.integers(1, min(3, len(parent)) + 1))
            sep = sorted(rng.choice(parent, size=k_sep, replace=False).tolist())
            size = int(rng.integers(1, 4))
            grp = sep + list(range(nxt, min(nxt + size, n_max)))
        nxt = max(nxt, max(grp) + 1)
        groups.append(sorted(set(grp)))
    n = nxt
    terms = []
    for g in groups:
        k = len(g)
        P = random_psd(rng, k, 0.5)
        p = rng.standard_normal(k)
        eqA = eqb = None
        if k > 1 and rng.random() < eq_prob:
            rows = int(rng.integers(1, max(2, k // 2 + 1)))
            eqA = rng.standard_normal((rows, k))
            eqb = rng.standard_normal(rows)
        terms.append(QuadraticTerm(tuple(g), P, p, float(rng.standard_normal()), eqA, eqb))
    return CoupledQP(VariableSpace(n), tuple(terms))
