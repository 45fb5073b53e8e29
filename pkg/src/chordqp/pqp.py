"""Parametric equality-constrained QPs: the per-clique elimination kernel.

A clique holds private variables ``x`` and separator (parameter) variables
``y``. Minimising its local objective over ``x`` for fixed ``y`` gives an
affine optimiser ``x*(y)`` and a quadratic value function, the message that
is sent towards the root.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import InconsistentConstraints, SingularKKT

TOL_RANK = 1e-10
SOLVE_TOL = 1e-9


@dataclass(frozen=True)
class ParametricQP:
    """``min_x 1/2 [x;y]' [Q S; S' R] [x;y] + q'x + r'y + c  s.t.  Ax + By = e``.

    ``R``, ``r`` and ``c`` collect the parts of the clique objective that only
    involve the parameters; they pass straight into the message.
    """

    Q: np.ndarray
    S_cross: np.ndarray
    q: np.ndarray
    A: np.ndarray
    B: np.ndarray
    e: np.ndarray
    R: np.ndarray | None = None
    r: np.ndarray | None = None
    c: float = 0.0

    def __post_init__(self):
        nx = self.Q.shape[0]
        ny = self.S_cross.shape[1] if self.S_cross.ndim == 2 else 0
        if self.A.shape[0] != self.B.shape[0] or self.A.shape[0] != self.e.shape[0]:
            raise ValueError("row counts of A, B and e differ")
        if self.A.shape[1] != nx or self.B.shape[1] != ny:
            raise ValueError("constraint matrices do not match the variable split")
        if self.R is None:
            object.__setattr__(self, "R", np.zeros((ny, ny)))
        if self.r is None:
            object.__setattr__(self, "r", np.zeros(ny))

    @property
    def nx(self) -> int:
        return self.Q.shape[0]

    @property
    def ny(self) -> int:
        return self.S_cross.shape[1]

    def value(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(
            0.5 * x @ self.Q @ x + x @ self.S_cross @ y + 0.5 * y @ self.R @ y
            + self.q @ x + self.r @ y + self.c
        )


@dataclass(frozen=True)
class QuadraticMessage:
    """``m(y) = 1/2 y'Hy + h'y + h0`` over the separator variables ``scope``.

    ``carried_B`` / ``carried_e`` are equality rows on ``y`` that the sender
    could not absorb; the receiver appends them to its own constraints.
    ``recovery`` is the sender's affine optimiser, used on the way down.
    """

    scope: tuple[int, ...]
    H: np.ndarray
    h: np.ndarray
    h0: float
    carried_B: np.ndarray
    carried_e: np.ndarray
    recovery: "AffineMap | None" = field(default=None, compare=False, repr=False)

    def value(self, y: np.ndarray) -> float:
        return float(0.5 * y @ self.H @ y + self.h @ y + self.h0)


@dataclass(frozen=True)
class AffineMap:
    """``x*(y) = x0 + X y`` and multipliers ``mu*(y) = mu0 + M y``."""

    x0: np.ndarray
    X: np.ndarray
    mu0: np.ndarray
    M: np.ndarray
    regularized: bool = False

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return self.x0 + self.X @ y

    def multipliers(self, y: np.ndarray) -> np.ndarray:
        return self.mu0 + self.M @ y


@dataclass(frozen=True)
class RankSplit:
    """Output of :func:`preprocess_rank`.

    Rows ``rotation.T @ [A B e]`` split into a full-row-rank block
    ``(A1, B1, e1)`` and parameter-only rows ``(B2, e2)``. ``kept`` indexes
    the parameter-only rows that survive (all-zero rows with zero rhs are
    dropped); ``rotation[:, rank + kept]`` maps them back to original rows.
    """

    A1: np.ndarray
    B1: np.ndarray
    e1: np.ndarray
    B2: np.ndarray
    e2: np.ndarray
    rotation: np.ndarray
    rank: int
    kept: np.ndarray

    def __iter__(self):
        yield from (self.A1, self.B1, self.e1, (self.B2, self.e2))


def preprocess_rank(A, B, e, tol_rank: float = TOL_RANK) -> RankSplit:
    """Rotate the rows of ``Ax + By = e`` so that the x-part has full row rank.

    Uses a column-pivoted QR factorisation of ``A`` (row compression). Rows
    left with a numerically zero x-part become constraints on ``y`` alone.
    Raises :class:`InconsistentConstraints` for a row that is zero in both
    ``A`` and ``B`` but has a nonzero right-hand side.
    """
    e = np.asarray(e, dtype=float).reshape(-1)
    rows = e.size
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim == 1:
        A = A.reshape(rows, -1)
    if B.ndim == 1:
        B = B.reshape(rows, -1)
    nx, ny = A.shape[1], B.shape[1]

    if rows == 0:
        return RankSplit(A, B, e, np.zeros((0, ny)), np.zeros(0), np.eye(0), 0, np.zeros(0, int))

    if nx == 0:
        rank = 0
        rotation = np.eye(rows)
    else:
        Qf, Rf, _ = sla.qr(A, pivoting=True)
        diag = np.abs(np.diag(Rf))
        big = diag[0] if diag.size else 0.0
        rank = int(np.sum(diag > tol_rank * max(big, 1e-300))) if big > 0 else 0
        if rank == rows:
            rotation = np.eye(rows)
        else:
            rotation = Qf
            # positive pivots on the range part, deterministic output
            signs = np.ones(rows)
            signs[:rank] = np.where(np.diag(Rf)[:rank] < 0, -1.0, 1.0)
            rotation = rotation * signs

    if rank == rows:
        return RankSplit(A, B, e, np.zeros((0, ny)), np.zeros(0), rotation, rank, np.zeros(0, int))

    At, Bt, et = rotation.T @ A, rotation.T @ B, rotation.T @ e
    B2, e2 = Bt[rank:], et[rank:]
    scale = 1.0 + (np.abs(B).max() if B.size else 0.0) + (np.abs(A).max() if A.size else 0.0)
    norms = np.abs(B2).max(axis=1) if ny else np.zeros(rows - rank)
    zero_rows = norms <= tol_rank * scale
    rhs_tol = 1e-9 * (1.0 + np.abs(e).max())
    if np.any(np.abs(e2[zero_rows]) > rhs_tol):
        raise InconsistentConstraints("equality constraints are inconsistent")
    kept = np.flatnonzero(~zero_rows)
    B2, e2 = B2[kept], e2[kept]
    # make the largest entry of every carried row positive
    if kept.size:
        piv = np.argmax(np.abs(B2), axis=1)
        flip = np.where(B2[np.arange(kept.size), piv] < 0, -1.0, 1.0)
        B2 = B2 * flip[:, None]
        e2 = e2 * flip
        rotation = rotation.copy()
        rotation[:, rank + kept] *= flip
    return RankSplit(At[:rank], Bt[:rank], et[:rank], B2, e2, rotation, rank, kept)


def _solve_symmetric(K: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Bunch-Kaufman solve; raises ``LinAlgError`` on numerical singularity.

    A poor condition estimate alone is not treated as singular (barrier
    weights make clique systems badly scaled but still solvable); the solve
    is rejected when the result is non-finite or its residual is large.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        sol = sla.solve(K, rhs, assume_a="sym", check_finite=False)
    if not np.all(np.isfinite(sol)):
        raise np.linalg.LinAlgError("non-finite solution")
    resid = np.abs(K @ sol - rhs).max(initial=0.0)
    scale = np.abs(K).max(initial=0.0) * np.abs(sol).max(initial=0.0) + np.abs(rhs).max(initial=0.0)
    if resid > SOLVE_TOL * max(scale, 1e-300):
        raise np.linalg.LinAlgError(f"residual {resid:.2e} too large")
    return sol


def kkt_solve(Q, A, rhs_x, rhs_mu, eps_reg: float | None = None):
    """Solve ``[Q A'; A 0] [x; mu] = [rhs_x; rhs_mu]`` (right-hand sides may be 2-D).

    On numerical singularity ``eps_reg * I`` is added to ``Q`` once; the
    returned flag tells whether that happened.
    """
    nx, m = Q.shape[0], A.shape[0]
    K = np.zeros((nx + m, nx + m))
    K[:nx, :nx] = Q
    K[nx:, :nx] = A
    K[:nx, nx:] = A.T
    rhs = np.concatenate([rhs_x, rhs_mu], axis=0)
    if nx + m == 0:
        return rhs[:0], rhs[:0], False
    try:
        sol = _solve_symmetric(K, rhs)
        return sol[:nx], sol[nx:], False
    except np.linalg.LinAlgError:
        pass
    if eps_reg is None:
        eps_reg = default_regularization(Q)
    K[:nx, :nx] += eps_reg * np.eye(nx)
    try:
        sol = _solve_symmetric(K, rhs)
    except np.linalg.LinAlgError:
        raise SingularKKT("local KKT system is singular even after regularisation") from None
    return sol[:nx], sol[nx:], True


def default_regularization(Q: np.ndarray) -> float:
    scale = np.abs(np.diag(Q)).mean() if Q.size else 0.0
    return 1e-8 * (1.0 + scale)


def eliminate(
    pqp: ParametricQP,
    tol_rank: float = TOL_RANK,
    eps_reg: float | None = None,
    scope: tuple[int, ...] | None = None,
) -> tuple[QuadraticMessage, AffineMap]:
    """Minimise over the private variables in closed form.

    ``pqp.A`` must have full row rank (run :func:`preprocess_rank` first).
    The message carries no constraints; ``scope`` labels its parameters
    (defaults to ``0..ny-1``).
    """
    Q, S, q = pqp.Q, pqp.S_cross, pqp.q
    A, B, e = pqp.A, pqp.B, pqp.e
    nx, ny, m = pqp.nx, pqp.ny, A.shape[0]
    if m > nx:
        raise SingularKKT(f"{m} constraints on {nx} private variables; preprocess first")
    del tol_rank  # rank is established by preprocess_rank

    # right-hand sides: constant column then one column per parameter
    rhs_x = np.column_stack([-q, -S]) if ny else (-q)[:, None]
    rhs_mu = np.column_stack([e, -B]) if ny else e[:, None]
    sol_x, sol_mu, reg = kkt_solve(Q, A, rhs_x, rhs_mu, eps_reg)
    x0, X = sol_x[:, 0], sol_x[:, 1:]
    mu0, M = sol_mu[:, 0], sol_mu[:, 1:]

    QX = Q @ X
    H = X.T @ QX + X.T @ S + S.T @ X + pqp.R
    H = 0.5 * (H + H.T)
    h = X.T @ (Q @ x0) + S.T @ x0 + X.T @ q + pqp.r
    h0 = float(0.5 * x0 @ Q @ x0 + q @ x0 + pqp.c)
    recovery = AffineMap(x0, X, mu0, M, reg)
    if scope is None:
        scope = tuple(range(ny))
    message = QuadraticMessage(tuple(scope), H, h, h0, np.zeros((0, ny)), np.zeros(0), recovery)
    return message, recovery
