"""Primal-dual interior-point method whose Newton steps are tree solves.

Residual convention (for the optimality system
``Qz + q + A'lam + D'mu = 0``, ``Az = b``, ``Dz + s = e``, ``mu*s = 0``)::

    r_z   = -(Qz + q + A'lam + D'mu)
    r_lam = b - Az
    r_mu  = e - Dz - s
    r_s   = sigma * gap * 1 - mu*s

The Newton system ``Q dz + A'dlam + D'dmu = r_z``, ``A dz = r_lam``,
``D dz + ds = r_mu``, ``M ds + S dmu = r_s`` is reduced to an equality
constrained QP in ``dz`` with the same term scopes as the original problem,
so the clique tree built once is reused at every iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .coupled_qp import CoupledQP, QuadraticTerm, assemble_dense
from .graph import CliqueTree, tree_for_problem
from .mp_solver import solve_tree

log = logging.getLogger(__name__)


@dataclass
class IpmIterate:
    z: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    s: np.ndarray

    @property
    def mu_gap(self) -> float:
        return float(self.s @ self.mu / self.s.size) if self.s.size else 0.0


@dataclass(frozen=True)
class IpmSettings:
    tol_gap: float = 1e-8
    tol_feas: float = 1e-8
    max_iter: int = 100
    frac_to_boundary: float = 0.995
    predictor_corrector: bool = True
    sigma_fixed: float = 0.1
    separate_steps: bool = False
    parallel: bool | int = False

    def __post_init__(self):
        if not 0.0 < self.frac_to_boundary < 1.0:
            raise ValueError("frac_to_boundary must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


@dataclass(frozen=True)
class Residuals:
    r_z: np.ndarray
    r_lam: np.ndarray
    r_mu: np.ndarray
    r_s: np.ndarray

    def __iter__(self):
        yield from (self.r_z, self.r_lam, self.r_mu, self.r_s)

    def norm(self) -> float:
        return max((np.abs(r).max() for r in self if r.size), default=0.0)


@dataclass
class IpmResult:
    iterate: IpmIterate
    status: str  # "Optimal" | "MaxIter" | "Infeasible-suspected"
    iterations: int
    residual_history: list[dict] = field(default_factory=list)
    direction_residuals: list[float] = field(default_factory=list)

    @property
    def z(self) -> np.ndarray:
        return self.iterate.z


def kkt_residuals(dense, it: IpmIterate, sigma: float = 0.0) -> Residuals:
    """Residuals of the centred optimality system at ``it``.

    ``dense`` is the ``(Q, q, A, b, D, e)`` tuple from ``assemble_dense``
    (dense or sparse matrices).
    """
    Q, q, A, b, D, e = dense
    r_z = -(Q @ it.z + q + A.T @ it.lam + D.T @ it.mu)
    r_lam = b - A @ it.z
    r_mu = e - D @ it.z - it.s
    r_s = sigma * it.mu_gap * np.ones(it.s.size) - it.mu * it.s
    return Residuals(np.asarray(r_z), np.asarray(r_lam), np.asarray(r_mu), r_s)


def _owners(qp: CoupledQP) -> list[np.ndarray]:
    """Per term, the local positions of variables it is the first to contain."""
    taken = np.zeros(qp.n, dtype=bool)
    out = []
    for t in qp.terms:
        scope = np.asarray(t.scope)
        mine = ~taken[scope]
        taken[scope] = True
        out.append(np.flatnonzero(mine))
    return out


def direction_qp(qp: CoupledQP, it: IpmIterate, res: Residuals, _owners_cache=None) -> CoupledQP:
    """Equality QP in ``dz`` whose optimality conditions are the reduced Newton system.

    Each term's barrier weight ``D_i' S_i^-1 M_i D_i`` is added to its own
    ``P_i``, so no scope grows. The right-hand side ``r_z`` is credited to the
    first term holding each variable.
    """
    owners = _owners_cache if _owners_cache is not None else _owners(qp)
    eq_off, in_off = qp.eq_offsets(), qp.ineq_offsets()
    terms = []
    for k, t in enumerate(qp.terms):
        scope = list(t.scope)
        p = np.zeros(len(scope))
        p[owners[k]] = -res.r_z[np.asarray(scope)[owners[k]]]
        P = np.array(t.P)
        if t.n_ineq:
            rows = slice(in_off[k], in_off[k + 1])
            w = it.mu[rows] / it.s[rows]
            Dt = t.ineq_D
            P = P + Dt.T @ (w[:, None] * Dt)
            P = 0.5 * (P + P.T)
            p = p + Dt.T @ ((res.r_s[rows] - it.mu[rows] * res.r_mu[rows]) / it.s[rows])
        eq_b = res.r_lam[eq_off[k]:eq_off[k + 1]]
        terms.append(QuadraticTerm(t.scope, P, p, 0.0, t.eq_A if t.n_eq else None, eq_b if t.n_eq else None))
    return CoupledQP(qp.space, tuple(terms))


def recover_full_direction(dz, dlam, it: IpmIterate, res: Residuals, D):
    """Back-substitute ``ds = r_mu - D dz`` and ``dmu = S^-1 (r_s - M ds)``."""
    ds = res.r_mu - D @ dz
    dmu = (res.r_s - it.mu * ds) / it.s
    return np.asarray(dmu), np.asarray(ds)


def unreduced_residual(dense, it: IpmIterate, res: Residuals, step) -> float:
    """Relative residual of ``step`` in the full four-block Newton system."""
    Q, _, A, _, D, _ = dense
    dz, dlam, dmu, ds = step
    rows = [
        Q @ dz + A.T @ dlam + D.T @ dmu - res.r_z,
        A @ dz - res.r_lam,
        D @ dz + ds - res.r_mu,
        it.mu * ds + it.s * dmu - res.r_s,
    ]
    err = max((np.abs(r).max() for r in rows if r.size), default=0.0)
    return float(err / (1.0 + res.norm()))


def _max_step(v, dv) -> float:
    neg = dv < 0
    if not neg.any():
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def initial_iterate(qp: CoupledQP, dense, z0=None) -> IpmIterate:
    _, _, A, _, D, e = dense
    z = np.zeros(qp.n) if z0 is None else np.asarray(z0, dtype=float).copy()
    s = np.maximum(e - D @ z, 1.0) + 1.0
    return IpmIterate(z, np.zeros(A.shape[0]), np.ones(D.shape[0]), np.asarray(s))


def solve_ipm(
    qp: CoupledQP,
    tree: CliqueTree | None = None,
    settings: IpmSettings | None = None,
    z0=None,
) -> IpmResult:
    """Mehrotra predictor-corrector IPM with tree-solved search directions."""
    settings = settings or IpmSettings()
    tree = tree if tree is not None else tree_for_problem(qp)
    dense = assemble_dense(qp, sparse=True)
    Q, q, A, b, D, e = dense
    owners = _owners(qp)
    it = initial_iterate(qp, dense, z0)
    scale_b = 1.0 + np.abs(b).max(initial=0.0)
    scale_q = 1.0 + np.abs(q).max(initial=0.0)
    scale_e = 1.0 + np.abs(e).max(initial=0.0)
    history: list[dict] = []
    dir_res: list[float] = []
    nq = it.s.size

    def direction(res: Residuals):
        sol = solve_tree(direction_qp(qp, it, res, owners), tree, settings.parallel)
        dz, dlam = sol.x_star, sol.lam
        dmu, ds = recover_full_direction(dz, dlam, it, res, D)
        dir_res.append(unreduced_residual(dense, it, res, (dz, dlam, dmu, ds)))
        return dz, dlam, dmu, ds

    def step_lengths(dmu, ds, frac):
        ap = min(1.0, frac * _max_step(it.s, ds))
        ad = min(1.0, frac * _max_step(it.mu, dmu))
        if settings.separate_steps:
            return ap, ad
        a = min(ap, ad)
        return a, a

    status = "MaxIter"
    k = 0
    for k in range(settings.max_iter + 1):
        res = kkt_residuals(dense, it, 0.0)
        gap = it.mu_gap
        p_inf = max(np.abs(res.r_lam).max(initial=0.0) / scale_b, np.abs(res.r_mu).max(initial=0.0) / scale_e)
        d_inf = np.abs(res.r_z).max(initial=0.0) / scale_q
        entry = {"iter": k, "mu_gap": gap, "primal_inf": p_inf, "dual_inf": d_inf}
        if p_inf <= settings.tol_feas and d_inf <= settings.tol_feas and gap <= settings.tol_gap:
            history.append(entry)
            status = "Optimal"
            break
        if k == settings.max_iter:
            history.append(entry)
            break
        if nq and (np.abs(it.mu).max() > 1e12 or np.abs(it.z).max(initial=0.0) > 1e12):
            history.append(entry)
            break

        if nq == 0:
            dz, dlam, dmu, ds = direction(res)
            a_p = a_d = 1.0
        elif settings.predictor_corrector:
            aff = direction(res)
            ap, ad = step_lengths(aff[2], aff[3], 1.0)
            gap_aff = float((it.s + ap * aff[3]) @ (it.mu + ad * aff[2])) / nq
            sigma = (gap_aff / gap) ** 3 if gap > 0 else 0.0
            r_s = sigma * gap - it.mu * it.s - aff[3] * aff[2]
            res_c = Residuals(res.r_z, res.r_lam, res.r_mu, r_s)
            dz, dlam, dmu, ds = direction(res_c)
            a_p, a_d = step_lengths(dmu, ds, settings.frac_to_boundary)
            entry["sigma"] = sigma
        else:
            res_c = kkt_residuals(dense, it, settings.sigma_fixed)
            dz, dlam, dmu, ds = direction(res_c)
            a_p, a_d = step_lengths(dmu, ds, settings.frac_to_boundary)
            entry["sigma"] = settings.sigma_fixed

        entry["alpha"] = a_p
        history.append(entry)
        log.info(
            "iter %3d  gap %.3e  pinf %.3e  dinf %.3e  alpha %.3f", k, gap, p_inf, d_inf, a_p
        )
        it = IpmIterate(it.z + a_p * dz, it.lam + a_d * dlam, it.mu + a_d * dmu, it.s + a_p * ds)

    if status == "MaxIter" and nq and (np.abs(it.mu).max() > 1e8 or history[-1]["primal_inf"] > 1e-3):
        status = "Infeasible-suspected"
    return IpmResult(it, status, k, history, dir_res)
