"""Backward Riccati recursion for unconstrained LQ problems.

With cost-to-go ``V_{k+1}(x) = 1/2 x'S x + s'x + c`` the stage-k quantities are::

    G = Q2 + B'SB      H = Q12 + A'SB      F = Q1 + A'SA
    g_u = q_u + B'(Sv + s)                 g_x = q_x + A'(Sv + s)

and minimising over ``u`` gives ``u = -K x - k`` with ``K = G^-1 H'``,
``k = G^-1 g_u`` and::

    S_k = F - H G^-1 H'
    s_k = g_x - H G^-1 g_u
    c_k = 1/2 v'Sv + s'v + c - 1/2 g_u' G^-1 g_u
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SingularG
from .mpc_models import ClassicalMpc

SINGULAR_TOL = 1e-12


@dataclass
class RiccatiTape:
    """Cost-to-go data in time order: ``S_seq[k]`` belongs to stage k (k = 0..N)."""

    S_seq: list[np.ndarray]
    s_seq: list[np.ndarray]
    c_seq: list[float]
    K_seq: list[np.ndarray]
    k_seq: list[np.ndarray]
    G_seq: list[np.ndarray]
    mpc: ClassicalMpc = field(repr=False)
    warnings: list[str] = field(default_factory=list)

    @property
    def linear_seq(self) -> list[np.ndarray]:
        return self.s_seq


def riccati_backward(mpc: ClassicalMpc, pinv: bool = False) -> RiccatiTape:
    """Run the recursion from ``S_N = S`` down to ``S_0``.

    Raises :class:`SingularG` when some ``G_k`` is numerically singular,
    unless ``pinv`` is set, in which case the pseudo-inverse is used.
    """
    if mpc.has_inequalities:
        raise ValueError("the Riccati recursion only handles problems without inequalities")
    n, m, N = mpc.n, mpc.m, mpc.N
    S = 0.5 * (mpc.S + mpc.S.T)
    s = mpc.s_vec.copy()
    c = 0.0
    S_seq, s_seq, c_seq = [S], [s], [c]
    K_seq, k_seq, G_seq = [], [], []
    warns: list[str] = []
    for k in reversed(range(N)):
        A, B, v = mpc.A_seq[k], mpc.B_seq[k], mpc.v_seq[k]
        Qk, qk = mpc.Q_seq[k], mpc.q_seq[k]
        Q1, Q12, Q2 = Qk[:n, :n], Qk[:n, n:], Qk[n:, n:]
        SB = S @ B
        G = Q2 + B.T @ SB
        G = 0.5 * (G + G.T)
        H = Q12 + A.T @ SB
        F = Q1 + A.T @ S @ A
        w = S @ v + s
        g_u = qk[n:] + B.T @ w
        g_x = qk[:n] + A.T @ w
        const = 0.5 * v @ S @ v + s @ v + c
        if m:
            eig = np.linalg.eigvalsh(G)
            if eig.min() <= SINGULAR_TOL * max(1.0, np.abs(eig).max()):
                if not pinv:
                    raise SingularG(f"G_{k} is singular (smallest eigenvalue {eig.min():.3e})")
                Ginv = np.linalg.pinv(G)
                warns.append(f"stage {k}: pseudo-inverse of G used")
                K, kff = Ginv @ H.T, Ginv @ g_u
            else:
                K = np.linalg.solve(G, H.T)
                kff = np.linalg.solve(G, g_u)
        else:
            K, kff = np.zeros((0, n)), np.zeros(0)
        S = F - H @ K
        S = 0.5 * (S + S.T)
        s = g_x - H @ kff
        c = float(const - 0.5 * g_u @ kff)
        scale = 1.0 + np.abs(S).max()
        if np.linalg.eigvalsh(S).min() < -1e-9 * scale:
            warns.append(f"stage {k}: cost-to-go matrix is not positive semidefinite")
        S_seq.append(S)
        s_seq.append(s)
        c_seq.append(c)
        K_seq.append(K)
        k_seq.append(kff)
        G_seq.append(G)
    rev = lambda seq: list(reversed(seq))  # noqa: E731
    return RiccatiTape(rev(S_seq), rev(s_seq), rev(c_seq), rev(K_seq), rev(k_seq), rev(G_seq), mpc, warns)


def riccati_rollout(tape: RiccatiTape, x_bar=None, v=None):
    """Closed-loop trajectories ``u_k = -K_k x_k - k_k`` from ``x_0 = x_bar``.

    ``v`` defaults to the affine terms the tape was computed with; the tape's
    linear cost-to-go terms depend on them, so a different ``v`` is rejected.
    Returns ``(x, u, objective)`` with ``objective = V_0(x_bar)``.
    """
    mpc = tape.mpc
    x0 = mpc.xbar if x_bar is None else np.asarray(x_bar, dtype=float)
    if v is not None:
        v_seq = [np.asarray(vk, dtype=float) for vk in v]
        if len(v_seq) != mpc.N or any(not np.array_equal(a, b) for a, b in zip(v_seq, mpc.v_seq)):
            raise ValueError("v differs from the affine terms used in the backward pass")
    x = np.zeros((mpc.N + 1, mpc.n))
    u = np.zeros((mpc.N, mpc.m))
    x[0] = x0
    for k in range(mpc.N):
        u[k] = -tape.K_seq[k] @ x[k] - tape.k_seq[k]
        x[k + 1] = mpc.A_seq[k] @ x[k] + mpc.B_seq[k] @ u[k] + mpc.v_seq[k]
    obj = 0.5 * x0 @ tape.S_seq[0] @ x0 + tape.s_seq[0] @ x0 + tape.c_seq[0]
    return x, u, float(obj)
