"""Lowering of MPC formulations to coupled QPs with explicit clique trees.

Every builder returns ``(CoupledQP, CliqueTree)``. Variables are grouped in
named blocks (``"x3"``, ``"u3"``, ``"ubar0"``, ``"x1^2"``...) recorded in
``qp.space.blocks``; :func:`block_values` reads a solution back per block.

Stage k contributes the term::

    1/2 [x;u]' Q_k [x;u] + q_k'[x;u]   s.t.  x_{k+1} - A_k x_k - B_k u_k = v_k
                                            C_k x_k + D_k u_k <= e_k

with ``x_0 = xbar`` attached to the first stage and ``1/2 x_N' S x_N + s'x_N``
to the last.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .coupled_qp import CoupledQP, QuadraticTerm, VariableSpace
from .errors import DimensionMismatch, DisconnectedCoupling, InconsistentSharing, InvalidSplit
from .graph import CliqueTree, assign_terms, block_graph, cliques_and_tree, expand_tree, tree_from_parents

# -- formulations ------------------------------------------------------------


def _arr(a, ndim: int, name: str) -> np.ndarray:
    out = np.array(a, dtype=float)
    if out.ndim == 0 and ndim >= 1:
        out = out.reshape((1,) * ndim)
    elif out.ndim == 1 and ndim == 2:
        out = out.reshape(1, -1) if out.size else np.zeros((0, 0))
    if out.ndim != ndim:
        raise DimensionMismatch(f"{name} must be {ndim}-dimensional, got shape {out.shape}")
    return out


def _seq(val, N: int, ndim: int, name: str) -> list[np.ndarray]:
    """A constant or a length-N list of stage values."""
    if val is None:
        return []
    if isinstance(val, (list, tuple)) and len(val) == N and np.ndim(np.asarray(val[0], dtype=float)) == ndim:
        return [_arr(x, ndim, f"{name}[{k}]") for k, x in enumerate(val)]
    return [_arr(val, ndim, name)] * N


@dataclass
class ClassicalMpc:
    """Linear-quadratic MPC with optional affine dynamics and stage inequalities.

    ``A``, ``B``, ``Q``, ``v``, ``C``, ``D``, ``e`` and ``q`` may be given as a
    single value or as a list of N stage values.
    """

    A: object
    B: object
    Q: object
    S_terminal: object
    x_bar: object
    N: int
    v: object = None
    C: object = None
    D: object = None
    e: object = None
    q: object = None
    s: object = None

    def __post_init__(self):
        N = int(self.N)
        if N < 1:
            raise DimensionMismatch("horizon N must be at least 1")
        self.N = N
        self.A_seq = _seq(self.A, N, 2, "A")
        self.B_seq = _seq(self.B, N, 2, "B")
        self.Q_seq = _seq(self.Q, N, 2, "Q")
        self.S = _arr(self.S_terminal, 2, "S")
        self.xbar = _arr(self.x_bar, 1, "x_bar")
        n, m = self.A_seq[0].shape[0], self.B_seq[0].shape[1]
        self.n, self.m = n, m
        self.v_seq = _seq(self.v, N, 1, "v") or [np.zeros(n)] * N
        self.q_seq = _seq(self.q, N, 1, "q") or [np.zeros(n + m)] * N
        self.s_vec = np.zeros(n) if self.s is None else _arr(self.s, 1, "s")
        if self.C is not None or self.D is not None:
            C = _seq(self.C, N, 2, "C") if self.C is not None else None
            D = _seq(self.D, N, 2, "D") if self.D is not None else None
            rows = (C or D)[0].shape[0]
            self.C_seq = C or [np.zeros((rows, n))] * N
            self.D_seq = D or [np.zeros((rows, m))] * N
            if self.e is None:
                raise DimensionMismatch("inequality rows need a right-hand side e")
            self.e_seq = _seq(self.e, N, 1, "e")
        else:
            self.C_seq = [np.zeros((0, n))] * N
            self.D_seq = [np.zeros((0, m))] * N
            self.e_seq = [np.zeros(0)] * N
        self._check()

    def _check(self):
        n, m = self.n, self.m
        for k in range(self.N):
            checks = [
                (self.A_seq[k].shape, (n, n), "A"),
                (self.B_seq[k].shape, (n, m), "B"),
                (self.Q_seq[k].shape, (n + m, n + m), "Q"),
                (self.v_seq[k].shape, (n,), "v"),
                (self.q_seq[k].shape, (n + m,), "q"),
                (self.C_seq[k].shape[1:], (n,), "C"),
                (self.D_seq[k].shape, (self.C_seq[k].shape[0], m), "D"),
                (self.e_seq[k].shape, (self.C_seq[k].shape[0],), "e"),
            ]
            for got, want, name in checks:
                if tuple(got) != want:
                    raise DimensionMismatch(f"{name}[{k}] has shape {tuple(got)}, expected {want}")
            if np.linalg.eigvalsh(0.5 * (self.Q_seq[k] + self.Q_seq[k].T)).min() < -1e-9 * (1 + np.abs(self.Q_seq[k]).max()):
                raise DimensionMismatch(f"Q[{k}] is not positive semidefinite")
        if self.S.shape != (n, n) or self.xbar.shape != (n,) or self.s_vec.shape != (n,):
            raise DimensionMismatch("S, x_bar or s do not match the state dimension")

    @property
    def has_inequalities(self) -> bool:
        return any(c.shape[0] for c in self.C_seq)

    def objective(self, x: np.ndarray, u: np.ndarray) -> float:
        """Direct stage-loop cost of trajectories ``x`` (N+1, n) and ``u`` (N, m)."""
        total = 0.0
        for k in range(self.N):
            w = np.concatenate([x[k], u[k]])
            total += 0.5 * w @ self.Q_seq[k] @ w + self.q_seq[k] @ w
        return float(total + 0.5 * x[-1] @ self.S @ x[-1] + self.s_vec @ x[-1])


@dataclass
class LassoMpc:
    """Classical MPC plus ``sum_k ||E x_k + F u_k||_1``."""

    base: ClassicalMpc
    E: object
    F: object

    def __post_init__(self):
        N = self.base.N
        self.E_seq = _seq(self.E, N, 2, "E")
        self.F_seq = _seq(self.F, N, 2, "F")
        for k, (E, F) in enumerate(zip(self.E_seq, self.F_seq)):
            if E.shape[0] != F.shape[0]:
                raise DimensionMismatch(f"E[{k}] and F[{k}] have different row counts")
            if E.shape[1] != self.base.n or F.shape[1] != self.base.m:
                raise DimensionMismatch(f"E[{k}]/F[{k}] do not match the state/input sizes")


@dataclass
class ScenarioMpc:
    """Scenario-tree MPC with ``M = d**r`` scenarios.

    ``A``, ``B`` and ``v`` are lists over scenarios; each entry is a single
    value or a length-N stage list. Scenario j (0-based) is read as r base-d
    digits; consecutive scenarios share stage k when their first k+1 digits
    agree, in which case their inputs at stage k must coincide.
    """

    d: int
    r: int
    N: int
    omega: Sequence[float]
    A: Sequence
    B: Sequence
    Q: object
    S_terminal: object
    x_bar: object
    v: Sequence | None = None
    C: object = None
    D: object = None
    e: object = None

    def __post_init__(self):
        self.d, self.r, self.N = int(self.d), int(self.r), int(self.N)
        if self.d < 1 or self.r < 0:
            raise DimensionMismatch("need d >= 1 and r >= 0")
        if self.r > self.N:
            raise DimensionMismatch(f"branching depth r={self.r} exceeds the horizon N={self.N}")
        M = self.M
        self.omega = np.asarray(self.omega, dtype=float)
        if self.omega.shape != (M,):
            raise DimensionMismatch(f"expected {M} scenario weights, got {self.omega.size}")
        if np.any(self.omega <= 0) or abs(self.omega.sum() - 1.0) > 1e-12:
            raise DimensionMismatch("scenario weights must be positive and sum to one")
        if len(self.A) != M or len(self.B) != M or (self.v is not None and len(self.v) != M):
            raise DimensionMismatch(f"dynamics must be given for each of the {M} scenarios")
        self.scenarios = [
            ClassicalMpc(
                self.A[j], self.B[j], self.Q, self.S_terminal, self.x_bar, self.N,
                None if self.v is None else self.v[j], self.C, self.D, self.e,
            )
            for j in range(M)
        ]
        self._check_sharing()

    @property
    def M(self) -> int:
        return self.d ** self.r

    def digits(self, j: int) -> tuple[int, ...]:
        out = []
        for _ in range(self.r):
            out.append(j % self.d)
            j //= self.d
        return tuple(reversed(out))

    def shared_stages(self, j: int) -> int:
        """Number of leading stages scenarios j and j+1 have in common."""
        a, b = self.digits(j), self.digits(j + 1)
        n = 0
        while n < self.r and a[n] == b[n]:
            n += 1
        return n

    def _check_sharing(self):
        for j in range(self.M - 1):
            s1, s2 = self.scenarios[j], self.scenarios[j + 1]
            for k in range(self.shared_stages(j)):
                same = (
                    np.array_equal(s1.A_seq[k], s2.A_seq[k])
                    and np.array_equal(s1.B_seq[k], s2.B_seq[k])
                    and np.array_equal(s1.v_seq[k], s2.v_seq[k])
                )
                if not same:
                    raise InconsistentSharing(
                        f"scenarios {j + 1} and {j + 2} share stage {k} but have different dynamics"
                    )


@dataclass
class Subsystem:
    A: object
    B: object
    Q: object
    S: object
    x_bar: object
    neighbors: dict = field(default_factory=dict)  # j -> (A_ij, B_ij), 0-based
    v: object = None
    C: object = None
    D: object = None
    e: object = None


@dataclass
class DistributedMpc:
    subsystems: Sequence[Subsystem]

    def __post_init__(self):
        M = len(self.subsystems)
        if M == 0:
            raise DimensionMismatch("at least one subsystem is required")
        self.nx = [np.atleast_2d(np.asarray(s.A, float)).shape[0] for s in self.subsystems]
        self.nu = [np.atleast_2d(np.asarray(s.B, float)).shape[1] for s in self.subsystems]
        for i, s in enumerate(self.subsystems):
            for j, (Aij, Bij) in s.neighbors.items():
                if j == i or not 0 <= j < M:
                    raise DimensionMismatch(f"subsystem {i + 1} has invalid neighbour {j + 1}")
                if _arr(Aij, 2, "A_ij").shape != (self.nx[i], self.nx[j]):
                    raise DimensionMismatch(f"A^({i + 1},{j + 1}) has the wrong shape")
                if _arr(Bij, 2, "B_ij").shape != (self.nx[i], self.nu[j]):
                    raise DimensionMismatch(f"B^({i + 1},{j + 1}) has the wrong shape")

    def coupling_connected(self) -> bool:
        M = len(self.subsystems)
        adj = [set() for _ in range(M)]
        for i, s in enumerate(self.subsystems):
            for j in s.neighbors:
                adj[i].add(j)
                adj[j].add(i)
        seen, stack = {0}, [0]
        while stack:
            for j in adj[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == M


# -- builder -------------------------------------------------------------------


class _Builder:
    """Collects named variable blocks, terms, and an explicit clique tree."""

    def __init__(self):
        self.labels: list[str] = []
        self.blocks: dict[str, tuple[int, ...]] = {}
        self.terms: list[QuadraticTerm] = []
        self.assignment: list[int] = []
        self.cliques: list[list[str]] = []
        self.parents: list[int | None] = []
        self.names: list[str] = []

    def block(self, name: str, size: int) -> str:
        start = len(self.labels)
        self.labels += [f"{name}.{c}" for c in range(size)] if size != 1 else [name]
        self.blocks[name] = tuple(range(start, start + size))
        return name

    def size(self, name: str) -> int:
        return len(self.blocks[name])

    def clique(self, blocks: Sequence[str], parent: int | None, name: str) -> int:
        self.cliques.append(list(blocks))
        self.parents.append(parent)
        self.names.append(name)
        return len(self.cliques) - 1

    def term(self, blocks, clique: int, P=None, p=None, eq=None, ineq=None, c=0.0):
        """Add a term over the concatenation of ``blocks`` (any order)."""
        idx = np.concatenate([self.blocks[b] for b in blocks]).astype(int)
        k = idx.size
        perm = np.argsort(idx, kind="stable")
        P = np.zeros((k, k)) if P is None else np.asarray(P, float)
        p = np.zeros(k) if p is None else np.asarray(p, float)
        eqA, eqb = eq if eq is not None else (None, None)
        inD, ine = ineq if ineq is not None else (None, None)
        if eqA is not None and np.size(eqA):
            eqA = np.asarray(eqA, float)[:, perm]
        else:
            eqA, eqb = None, None
        if inD is not None and np.size(inD):
            inD = np.asarray(inD, float)[:, perm]
        else:
            inD, ine = None, None
        self.terms.append(
            QuadraticTerm(tuple(idx[perm]), P[np.ix_(perm, perm)], p[perm], c, eqA, eqb, inD, ine)
        )
        self.assignment.append(clique)

    def finish(self, root: int | None = None) -> tuple[CoupledQP, CliqueTree]:
        space = VariableSpace(len(self.labels), tuple(self.labels), self.blocks)
        qp = CoupledQP(space, tuple(self.terms))
        cliques = [sorted(i for b in c for i in self.blocks[b]) for c in self.cliques]
        tree = tree_from_parents(cliques, self.parents, self.names)
        tree = CliqueTree(tree.cliques, tree.tree_edges, tree.root, tuple(self.assignment), tree.names)
        if root is not None:
            tree = tree.with_root(root)
        tree.validate(qp)
        return qp, tree


def block_values(space: VariableSpace, z: np.ndarray) -> dict[str, np.ndarray]:
    """Solution vector split into named blocks."""
    return {name: np.asarray(z)[list(idx)] for name, idx in (space.blocks or {}).items()}


def trajectories(space: VariableSpace, z: np.ndarray, N: int, suffix: str = ""):
    """``(x, u)`` arrays of shapes (N+1, n) and (N, m) from a lowered classical problem."""
    vals = block_values(space, z)
    x = np.array([vals[f"x{k}{suffix}"] for k in range(N + 1)])
    u = np.array([vals[f"u{k}{suffix}"] for k in range(N)])
    return x, u


def _stage_term(bld, mpc: ClassicalMpc, k: int, names, nxt: str, clique: int,
                first: bool, weight: float = 1.0, extra=None):
    """Stage k over ``names`` (x_k, u_k[, t_k]) and the successor block ``nxt``.

    ``extra`` = (P_extra, p_extra, ineq_extra) over the non-state stage blocks
    beyond u_k (used for the Lasso epigraph variables).
    """
    n, m = mpc.n, mpc.m
    blocks = list(names) + [nxt]
    sizes = [bld.size(b) for b in blocks]
    tot = sum(sizes)
    ne = tot - n - m - n  # extra stage variables
    P = np.zeros((tot, tot))
    P[: n + m, : n + m] = weight * mpc.Q_seq[k]
    p = np.zeros(tot)
    p[: n + m] = weight * mpc.q_seq[k]
    last = k == mpc.N - 1
    if last:
        P[-n:, -n:] += weight * mpc.S
        p[-n:] += weight * mpc.s_vec
    dyn = np.zeros((n, tot))
    dyn[:, :n] = -mpc.A_seq[k]
    dyn[:, n:n + m] = -mpc.B_seq[k]
    dyn[:, -n:] = np.eye(n)
    rows, rhs = [dyn], [mpc.v_seq[k]]
    if first:
        init = np.zeros((n, tot))
        init[:, :n] = np.eye(n)
        rows.insert(0, init)
        rhs.insert(0, mpc.xbar)
    q_rows = mpc.C_seq[k].shape[0]
    D = np.zeros((q_rows, tot))
    D[:, :n] = mpc.C_seq[k]
    D[:, n:n + m] = mpc.D_seq[k]
    e = mpc.e_seq[k]
    if extra is not None:
        P_x, p_x, (D_x, e_x) = extra
        sl = slice(n + m, n + m + ne)
        P[sl, sl] += P_x
        p[sl] += p_x
        D_full = np.zeros((D_x.shape[0], tot))
        D_full[:, : n + m + ne] = D_x
        D, e = np.vstack([D, D_full]), np.concatenate([e, e_x])
    bld.term(blocks, clique, P, p, (np.vstack(rows), np.concatenate(rhs)), (D, e))


def _link_term(bld, x_end: str, ubar: str, clique: int):
    n = bld.size(x_end)
    bld.term([x_end, ubar], clique, eq=(np.hstack([np.eye(n), -np.eye(n)]), np.zeros(n)))


def _segments(k0: int, k1: int, P: int) -> list[tuple[int, int]]:
    L = (k1 - k0) // P
    bounds = [k0 + p * L for p in range(P)] + [k1]
    return [(bounds[p], bounds[p + 1]) for p in range(P)]


def _stage_range(bld, mpc, k0, k1, split, attach, stage_names, state_name, ubar_name,
                 clique_name, first_stage, weight=1.0, extra=None):
    """Stages k0..k1-1 as a chain, or as ``split`` parallel segments with dummies.

    ``attach`` is the parent clique of the range's top clique (None = root).
    Returns the index of the range's top clique.
    """
    if split < 1 or split > k1 - k0:
        raise InvalidSplit(f"cannot split {k1 - k0} stages into {split} branches")
    ext = extra or (lambda k: None)
    if split == 1:
        top, parent = None, attach
        for k in range(k0, k1):
            blocks = list(stage_names(k)) + [state_name(k + 1)]
            ci = bld.clique(blocks, parent, clique_name(k))
            _stage_term(bld, mpc, k, stage_names(k), state_name(k + 1), ci,
                        first_stage and k == 0, weight, ext(k))
            top = ci if top is None else top
            parent = ci
        return top

    segs = _segments(k0, k1, split)
    ubars = [bld.block(ubar_name(p), mpc.n) for p in range(split)]
    if split == 2:
        (s0, e0), (_, e1) = segs
        root = bld.clique([state_name(s0), ubars[0], state_name(e0), ubars[1], state_name(e1)],
                          attach, clique_name(("root", 0)))
        heads = [root, root]
    else:
        heads, parent = [], attach
        for p, (s, e) in enumerate(segs):
            parent = bld.clique([state_name(s), ubars[p], state_name(e)], parent, clique_name(("root", p)))
            heads.append(parent)
    for p, (s, e) in enumerate(segs):
        _link_term(bld, state_name(e), ubars[p], heads[p])
    for p, (s, e) in enumerate(segs):
        parent = heads[p]
        for k in range(s, e):
            last = k == e - 1
            nxt = ubars[p] if last else state_name(k + 1)
            blocks = list(stage_names(k)) + ([nxt] if last else [nxt, ubars[p]])
            ci = bld.clique(blocks, parent, clique_name(k))
            _stage_term(bld, mpc, k, stage_names(k), nxt, ci, first_stage and k == 0, weight, ext(k))
            parent = ci
    return heads[0]


def _classical_blocks(bld, mpc, suffix="", extra_sizes=None):
    for k in range(mpc.N):
        bld.block(f"x{k}{suffix}", mpc.n)
        bld.block(f"u{k}{suffix}", mpc.m)
        if extra_sizes is not None:
            bld.block(f"t{k}{suffix}", extra_sizes[k])
    bld.block(f"x{mpc.N}{suffix}", mpc.n)


def _ordering_root(tree_size: int, ordering: str) -> int | None:
    if ordering == "backward":
        return None
    if ordering == "forward":
        return tree_size - 1
    raise ValueError(f"unknown ordering {ordering!r}; use 'backward' or 'forward'")


def lower_classical(mpc: ClassicalMpc, ordering: str = "backward") -> tuple[CoupledQP, CliqueTree]:
    """Chain clique tree ``{x_k, u_k, x_{k+1}}``, rooted at C1 (backward) or CN (forward)."""
    bld = _Builder()
    _classical_blocks(bld, mpc)
    _stage_range(
        bld, mpc, 0, mpc.N, 1, None,
        lambda k: [f"x{k}", f"u{k}"], lambda k: f"x{k}", None,
        lambda k: f"C{k + 1}", True,
    )
    return bld.finish(_ordering_root(mpc.N, ordering))


def _parallel_names(split: int, N: int):
    """Clique names: C1 for the merged root and C2.. along the branches when P = 2, R1.. for the root chain otherwise."""
    if split == 2:
        counter = iter(range(2, N + 2))
        return lambda key: "C1" if isinstance(key, tuple) else f"C{next(counter)}"
    return lambda key: f"R{key[1] + 1}" if isinstance(key, tuple) else f"C{key + 1}"


def lower_parallel(mpc: ClassicalMpc, branches: int) -> tuple[CoupledQP, CliqueTree]:
    """Split the horizon into ``branches`` segments coupled through dummies ``ubar_p``.

    The last stage of segment p maps into ``ubar_p`` and a link term imposes
    ``ubar_p = x_{end of p}``, so the branches only meet in the root
    structure. One branch is the plain backward chain.
    """
    branches = int(branches)
    if branches == 1:
        return lower_classical(mpc, "backward")
    if not 1 <= branches <= mpc.N:
        raise InvalidSplit(f"cannot split a horizon of {mpc.N} into {branches} branches")
    bld = _Builder()
    _classical_blocks(bld, mpc)
    _stage_range(
        bld, mpc, 0, mpc.N, branches, None,
        lambda k: [f"x{k}", f"u{k}"], lambda k: f"x{k}", lambda p: f"ubar{p}",
        _parallel_names(branches, mpc.N), True,
    )
    return bld.finish()


def lower_lasso(m: LassoMpc, ordering: str = "backward", branches: int = 1) -> tuple[CoupledQP, CliqueTree]:
    """Epigraph form: ``t_k >= |E x_k + F u_k|`` elementwise, cost ``sum t_k``."""
    mpc = m.base
    rows = [E.shape[0] for E in m.E_seq]
    bld = _Builder()
    _classical_blocks(bld, mpc, extra_sizes=rows)

    def extra(k):
        E, F = m.E_seq[k], m.F_seq[k]
        r = rows[k]
        EF = np.hstack([E, F])
        D_x = np.vstack([np.hstack([EF, -np.eye(r)]), np.hstack([-EF, -np.eye(r)])])
        return np.zeros((r, r)), np.ones(r), (D_x, np.zeros(2 * r))

    if branches != 1:
        names = _parallel_names(branches, mpc.N)
        ubar = lambda p: f"ubar{p}"  # noqa: E731
    else:
        names, ubar = (lambda k: f"C{k + 1}"), None
    _stage_range(
        bld, mpc, 0, mpc.N, branches, None,
        lambda k: [f"x{k}", f"u{k}", f"t{k}"], lambda k: f"x{k}", ubar, names, True,
        extra=extra,
    )
    root = _ordering_root(mpc.N, ordering) if branches == 1 else None
    return bld.finish(root)


def lower_scenario(m: ScenarioMpc, split: int = 1) -> tuple[CoupledQP, CliqueTree]:
    """Scenario tree: root ``C0`` over all initial states, shared-stage group
    cliques below it, then one chain per scenario for the unshared stages.

    ``split > 1`` applies the parallel-in-time construction to every chain.
    """
    M, N = m.M, m.N
    if M == 1:
        if split == 1:
            return lower_classical(m.scenarios[0], "backward")
        return lower_parallel(m.scenarios[0], split)

    bld = _Builder()
    sfx = [f"^{j + 1}" for j in range(M)]
    for j in range(M):
        _classical_blocks(bld, m.scenarios[j], sfx[j])
    n, mu = m.scenarios[0].n, m.scenarios[0].m

    # C0: x0^1 = xbar and x0^j = x0^{j+1}
    c0 = bld.clique([f"x0{s}" for s in sfx], None, "C0")
    A0 = np.zeros((n * M, n * M))
    A0[:n, :n] = np.eye(n)
    for j in range(M - 1):
        A0[n * (j + 1):n * (j + 2), n * j:n * (j + 1)] = np.eye(n)
        A0[n * (j + 1):n * (j + 2), n * (j + 1):n * (j + 2)] = -np.eye(n)
    b0 = np.concatenate([m.scenarios[0].xbar, np.zeros(n * (M - 1))])
    bld.term([f"x0{s}" for s in sfx], c0, eq=(A0, b0))

    # shared stages: group cliques for k = 0..r-2
    group_clique: dict[tuple[int, tuple[int, ...]], int] = {}
    for k in range(m.r - 1):
        groups: dict[tuple[int, ...], list[int]] = {}
        for j in range(M):
            groups.setdefault(m.digits(j)[: k + 1], []).append(j)
        for prefix, members in groups.items():
            parent = c0 if k == 0 else group_clique[(k - 1, prefix[:-1])]
            blocks = [b for j in members for b in (f"x{k}{sfx[j]}", f"u{k}{sfx[j]}", f"x{k + 1}{sfx[j]}")]
            ci = bld.clique(blocks, parent, f"C{k + 1}^{members[0] + 1}")
            group_clique[(k, prefix)] = ci
            for j in members:
                _stage_term(bld, m.scenarios[j], k, [f"x{k}{sfx[j]}", f"u{k}{sfx[j]}"],
                            f"x{k + 1}{sfx[j]}", ci, False, m.omega[j])
            for a, b in zip(members, members[1:]):
                bld.term([f"u{k}{sfx[a]}", f"u{k}{sfx[b]}"], ci,
                         eq=(np.hstack([np.eye(mu), -np.eye(mu)]), np.zeros(mu)))

    # stages r-1..N-1 are never shared: one chain per scenario
    k_tail = max(m.r - 1, 0)
    for j in range(M):
        sc = m.scenarios[j]
        attach = c0 if m.r <= 1 else group_clique[(m.r - 2, m.digits(j)[: m.r - 1])]
        _stage_range(
            bld, sc, k_tail, N, split, attach,
            lambda k, s=sfx[j]: [f"x{k}{s}", f"u{k}{s}"], lambda k, s=sfx[j]: f"x{k}{s}",
            lambda p, s=sfx[j]: f"ubar{p}{s}",
            lambda key, s=sfx[j]: (f"R{key[1] + 1}{s}" if isinstance(key, tuple) else f"C{key + 1}{s}"),
            False, m.omega[j],
        )
    return bld.finish()


def non_anticipativity_residual(m: ScenarioMpc, space: VariableSpace, z: np.ndarray) -> float:
    """``max |u_k^j - u_k^{j+1}|`` over all shared stages."""
    vals = block_values(space, z)
    worst = 0.0
    for j in range(m.M - 1):
        for k in range(m.shared_stages(j)):
            diff = vals[f"u{k}^{j + 1}"] - vals[f"u{k}^{j + 2}"]
            worst = max(worst, float(np.abs(diff).max(initial=0.0)))
    return worst


def lower_distributed(m: DistributedMpc, N: int) -> tuple[CoupledQP, CliqueTree]:
    """Per-subsystem stage terms; the clique tree comes from a greedy
    min-fill embedding of the supernode sparsity graph."""
    if not m.coupling_connected():
        raise DisconnectedCoupling("the subsystem coupling graph is disconnected")
    M = len(m.subsystems)
    locals_ = []
    for i, s in enumerate(m.subsystems):
        locals_.append(ClassicalMpc(s.A, s.B, s.Q, s.S, s.x_bar, N, s.v, s.C, s.D, s.e))
    bld = _Builder()
    sfx = [f"^{i + 1}" for i in range(M)]
    for i in range(M):
        _classical_blocks(bld, locals_[i], sfx[i])
    for k in range(N):
        for i, (s, loc) in enumerate(zip(m.subsystems, locals_)):
            own = [f"x{k}{sfx[i]}", f"u{k}{sfx[i]}", f"x{k + 1}{sfx[i]}"]
            nb = sorted(s.neighbors)
            blocks = own + [b for j in nb for b in (f"x{k}{sfx[j]}", f"u{k}{sfx[j]}")]
            sizes = [bld.size(b) for b in blocks]
            tot = sum(sizes)
            n, mu = loc.n, loc.m
            P = np.zeros((tot, tot))
            P[: n + mu, : n + mu] = loc.Q_seq[k]
            p = np.zeros(tot)
            p[: n + mu] = loc.q_seq[k]
            if k == N - 1:
                P[n + mu: 2 * n + mu, n + mu: 2 * n + mu] += loc.S
            dyn = np.zeros((n, tot))
            dyn[:, :n] = -loc.A_seq[k]
            dyn[:, n:n + mu] = -loc.B_seq[k]
            dyn[:, n + mu:2 * n + mu] = np.eye(n)
            col = 2 * n + mu
            for j in nb:
                Aij, Bij = (_arr(a, 2, "coupling") for a in s.neighbors[j])
                dyn[:, col:col + m.nx[j]] = -Aij
                col += m.nx[j]
                dyn[:, col:col + m.nu[j]] = -Bij
                col += m.nu[j]
            rows, rhs = [dyn], [loc.v_seq[k]]
            if k == 0:
                init = np.zeros((n, tot))
                init[:, :n] = np.eye(n)
                rows.insert(0, init)
                rhs.insert(0, loc.xbar)
            D = np.zeros((loc.C_seq[k].shape[0], tot))
            D[:, :n] = loc.C_seq[k]
            D[:, n:n + mu] = loc.D_seq[k]
            bld.term(blocks, 0, P, p, (np.vstack(rows), np.concatenate(rhs)), (D, loc.e_seq[k]))
    space = VariableSpace(len(bld.labels), tuple(bld.labels), bld.blocks)
    qp = CoupledQP(space, tuple(bld.terms))
    names = list(bld.blocks)
    block_idx = [bld.blocks[b] for b in names]
    g = block_graph(qp, block_idx)
    tree = expand_tree(cliques_and_tree(g), block_idx)
    return qp, assign_terms(qp, tree)


# -- JSON formats ----------------------------------------------------------------


def classical_from_dict(data: dict) -> ClassicalMpc:
    try:
        return ClassicalMpc(
            data["A"], data["B"], data["Q"], data["S"], data["xbar"], data["N"],
            data.get("v"), data.get("C"), data.get("D"), data.get("e"), data.get("q"), data.get("s"),
        )
    except KeyError as exc:
        raise DimensionMismatch(f"missing required field {exc.args[0]!r}") from None


def lasso_from_dict(data: dict) -> LassoMpc:
    try:
        return LassoMpc(classical_from_dict(data), data["E"], data["F"])
    except KeyError as exc:
        raise DimensionMismatch(f"missing required field {exc.args[0]!r}") from None


def scenario_from_dict(data: dict) -> ScenarioMpc:
    """``{"d", "r", "N", "omega", "Q", "S", "xbar", "stages": {"A": [...], "B": [...], "v": [...]?}}``.

    Each of ``stages.A`` / ``B`` / ``v`` is a list over scenarios; an entry is
    one matrix or a list of N stage matrices.
    """
    try:
        st = data["stages"]
        return ScenarioMpc(
            data["d"], data["r"], data["N"], data["omega"], st["A"], st["B"],
            data["Q"], data["S"], data["xbar"], st.get("v"),
            data.get("C"), data.get("D"), data.get("e"),
        )
    except KeyError as exc:
        raise DimensionMismatch(f"missing required field {exc.args[0]!r}") from None


def distributed_from_dict(data: dict) -> tuple[DistributedMpc, int]:
    """``{"N", "subsystems": [{"A","B","Q","S","xbar","neighbors": {"2": {"A","B"}}}]}``
    with 1-based neighbour keys."""
    try:
        subs = []
        for s in data["subsystems"]:
            nbrs = {int(j) - 1: (c["A"], c["B"]) for j, c in s.get("neighbors", {}).items()}
            subs.append(Subsystem(s["A"], s["B"], s["Q"], s["S"], s["xbar"], nbrs,
                                  s.get("v"), s.get("C"), s.get("D"), s.get("e")))
        return DistributedMpc(subs), int(data["N"])
    except KeyError as exc:
        raise DimensionMismatch(f"missing required field {exc.args[0]!r}") from None


def load_json(path: str | Path) -> dict:
    with open(path) as fh:
        return json.load(fh)


LOWERINGS: dict[str, Callable] = {
    "classical": classical_from_dict,
    "lasso": lasso_from_dict,
    "scenario": scenario_from_dict,
    "distributed": distributed_from_dict,
}
