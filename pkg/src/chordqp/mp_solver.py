"""Equality-constrained QP solve by message passing over a clique tree.

The upward pass eliminates every non-root clique's private variables and
sends a quadratic message (plus any constraint rows it could not absorb) to
the parent. The root then solves its local problem, and the downward pass
evaluates each clique's affine recovery map at its parent's separator values.
Equality multipliers are recovered on the way down as well, so the result
is a full primal-dual solution.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coupled_qp import CoupledQP
from .errors import NumericalBreakdown, SeparatorMismatch
from .graph import CliqueTree, assign_terms
from .pqp import TOL_RANK, AffineMap, ParametricQP, QuadraticMessage, RankSplit, eliminate, preprocess_rank

MISMATCH_TOL = 1e-8


@dataclass(frozen=True)
class MessageSchedule:
    upward_order: tuple[tuple[int, int], ...]
    downward_order: tuple[tuple[int, int], ...]
    levels: tuple[tuple[int, ...], ...]
    down_levels: tuple[tuple[int, ...], ...]


def message_schedule(tree: CliqueTree) -> MessageSchedule:
    """Leaves-to-root order and level sets that can run concurrently.

    ``levels[h]`` holds the non-root cliques of height ``h`` (leaves have
    height 0); ``down_levels[d]`` holds the cliques at depth ``d``.
    """
    height = [0] * tree.size
    for i in reversed(tree.topological_order()):
        if tree.children[i]:
            height[i] = 1 + max(height[c] for c in tree.children[i])
    by_height: dict[int, list[int]] = {}
    for i in range(tree.size):
        if i != tree.root:
            by_height.setdefault(height[i], []).append(i)
    levels = tuple(tuple(sorted(by_height[h])) for h in sorted(by_height))
    upward = tuple((i, tree.parent[i]) for lv in levels for i in lv)
    by_depth: dict[int, list[int]] = {}
    for i, d in enumerate(tree.depth):
        by_depth.setdefault(d, []).append(i)
    down_levels = tuple(tuple(sorted(by_depth[d])) for d in sorted(by_depth))
    downward = tuple((tree.parent[i], i) for lv in down_levels[1:] for i in lv)
    return MessageSchedule(upward, downward, levels, down_levels)


@dataclass
class CliqueFactor:
    """Everything a clique keeps from its elimination for the way down."""

    clique: int
    variables: tuple[int, ...]
    private: np.ndarray  # positions within ``variables``
    params: np.ndarray
    pqp: ParametricQP
    split: RankSplit
    recovery: AffineMap
    row_sources: list[tuple[str, int, int, int]]  # (kind, id, start, count)
    A_rows: np.ndarray  # local rows over ``variables`` before rotation
    e_rows: np.ndarray


@dataclass
class UpwardResult:
    messages: dict[int, QuadraticMessage]
    factors: dict[int, CliqueFactor]
    level_times: list[float] = field(default_factory=list)


@dataclass
class TreeSolution:
    x_star: np.ndarray
    lam: np.ndarray
    objective: float
    per_clique_values: dict[int, float]
    warnings: list[str]
    timings: dict[str, object]


def _check_problem(qp: CoupledQP, tree: CliqueTree) -> CliqueTree:
    if qp.n_ineq:
        raise ValueError("tree solves handle equality-constrained QPs only; use the IPM")
    if tree.assignment is None:
        tree = assign_terms(qp, tree)
    tree.validate(qp)
    return tree


def _local_system(qp: CoupledQP, tree: CliqueTree, i: int, messages, terms_by_clique):
    variables = tree.cliques[i]
    pos = {v: k for k, v in enumerate(variables)}
    nv = len(variables)
    Qf = np.zeros((nv, nv))
    qf = np.zeros(nv)
    c = 0.0
    A_blocks, e_blocks, sources = [], [], []
    row = 0
    for k in terms_by_clique[i]:
        t = qp.terms[k]
        idx = [pos[v] for v in t.scope]
        Qf[np.ix_(idx, idx)] += t.P
        qf[idx] += t.p
        c += t.c
        if t.n_eq:
            blk = np.zeros((t.n_eq, nv))
            blk[:, idx] = t.eq_A
            A_blocks.append(blk)
            e_blocks.append(t.eq_b)
            sources.append(("term", k, row, t.n_eq))
            row += t.n_eq
    for ch in tree.children[i]:
        msg = messages[ch]
        idx = [pos[v] for v in msg.scope]
        Qf[np.ix_(idx, idx)] += msg.H
        qf[idx] += msg.h
        c += msg.h0
        nc = msg.carried_e.size
        if nc:
            blk = np.zeros((nc, nv))
            blk[:, idx] = msg.carried_B
            A_blocks.append(blk)
            e_blocks.append(msg.carried_e)
            sources.append(("child", ch, row, nc))
            row += nc
    A_rows = np.vstack(A_blocks) if A_blocks else np.zeros((0, nv))
    e_rows = np.concatenate(e_blocks) if e_blocks else np.zeros(0)
    sep = set(tree.separator(i))
    params = np.array([k for k, v in enumerate(variables) if v in sep], dtype=int)
    private = np.array([k for k, v in enumerate(variables) if v not in sep], dtype=int)
    return variables, private, params, Qf, qf, c, A_rows, e_rows, sources


def _factor_clique(qp, tree, i, messages, terms_by_clique, tol_rank, eps_reg):
    variables, xs, ys, Qf, qf, c, A_rows, e_rows, sources = _local_system(
        qp, tree, i, messages, terms_by_clique
    )
    try:
        split = preprocess_rank(A_rows[:, xs], A_rows[:, ys], e_rows, tol_rank)
        pqp = ParametricQP(
            Qf[np.ix_(xs, xs)], Qf[np.ix_(xs, ys)], qf[xs],
            split.A1, split.B1, split.e1,
            Qf[np.ix_(ys, ys)], qf[ys], c,
        )
        sep = tuple(variables[k] for k in ys)
        message, recovery = eliminate(pqp, tol_rank, eps_reg, scope=sep)
    except NumericalBreakdown as exc:
        raise type(exc)(str(exc), clique=i) from None
    message = QuadraticMessage(
        message.scope, message.H, message.h, message.h0, split.B2, split.e2, recovery
    )
    factor = CliqueFactor(i, variables, xs, ys, pqp, split, recovery, sources, A_rows, e_rows)
    return message, factor


def _run_level(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _workers(parallel) -> int:
    if parallel is True:
        return 4
    if not parallel:
        return 1
    return max(1, int(parallel))


def upward_pass(
    qp: CoupledQP,
    tree: CliqueTree,
    parallel: bool | int = False,
    tol_rank: float = TOL_RANK,
    eps_reg: float | None = None,
) -> UpwardResult:
    """Send one message along every tree edge, leaves first."""
    tree = _check_problem(qp, tree)
    terms_by_clique = _terms_by_clique(tree)
    sched = message_schedule(tree)
    messages: dict[int, QuadraticMessage] = {}
    factors: dict[int, CliqueFactor] = {}
    times = []
    workers = _workers(parallel)
    for level in sched.levels:
        t0 = time.perf_counter()
        out = _run_level(
            lambda i: _factor_clique(qp, tree, i, messages, terms_by_clique, tol_rank, eps_reg),
            list(level), workers,
        )
        for i, (msg, fac) in zip(level, out):
            messages[i] = msg
            factors[i] = fac
        times.append(time.perf_counter() - t0)
    return UpwardResult(messages, factors, times)


def _terms_by_clique(tree: CliqueTree) -> list[list[int]]:
    out: list[list[int]] = [[] for _ in range(tree.size)]
    for k, c in enumerate(tree.assignment):
        out[c].append(k)
    return out


def downward_pass(
    qp: CoupledQP,
    tree: CliqueTree,
    upward: UpwardResult,
    parallel: bool | int = False,
    tol_rank: float = TOL_RANK,
    eps_reg: float | None = None,
) -> TreeSolution:
    """Root solve followed by affine recovery in every other clique."""
    tree = _check_problem(qp, tree)
    terms_by_clique = _terms_by_clique(tree)
    sched = message_schedule(tree)
    workers = _workers(parallel)
    messages = upward.messages
    factors = dict(upward.factors)

    # the root is a clique without parameters
    _, root_factor = _factor_clique(qp, tree, tree.root, messages, terms_by_clique, tol_rank, eps_reg)
    factors[tree.root] = root_factor

    x_star = np.full(qp.n, np.nan)
    lam = np.zeros(qp.n_eq)
    eq_off = qp.eq_offsets()
    carried_mult: dict[int, np.ndarray] = {tree.root: np.zeros(0)}
    values: dict[int, float] = {}
    warn: list[str] = []
    times = []

    def recover(i):
        f = factors[i]
        y = x_star[np.asarray(f.variables)[f.params]] if f.params.size else np.zeros(0)
        x = f.recovery(y)
        mu1 = f.recovery.multipliers(y)
        split = f.split
        lam_local = split.rotation[:, : split.rank] @ mu1
        if split.kept.size:
            lam_local = lam_local + split.rotation[:, split.rank + split.kept] @ carried_mult[i]
        local = np.empty(len(f.variables))
        local[f.private] = x
        local[f.params] = y
        resid = f.A_rows @ local - f.e_rows if f.e_rows.size else np.zeros(0)
        scale = 1.0 + np.abs(f.e_rows).max(initial=0.0) + (
            np.abs(f.A_rows).max(initial=0.0) * np.abs(local).max(initial=0.0)
        )
        if resid.size and np.abs(resid).max() > MISMATCH_TOL * scale:
            raise SeparatorMismatch(
                f"local constraints violated by {np.abs(resid).max():.3e} after recovery", clique=i
            )
        return x, lam_local, f.pqp.value(x, y)

    for level in sched.down_levels:
        t0 = time.perf_counter()
        out = _run_level(recover, list(level), workers)
        for i, (x, lam_local, val) in zip(level, out):
            f = factors[i]
            idx = np.asarray(f.variables)[f.private]
            if not np.all(np.isnan(x_star[idx])):
                raise SeparatorMismatch("variable recovered by two cliques", clique=i)
            x_star[idx] = x
            values[i] = val
            if f.recovery.regularized:
                warn.append(f"clique {i}: local KKT regularised")
            for kind, ident, start, count in f.row_sources:
                seg = lam_local[start:start + count]
                if kind == "term":
                    lam[eq_off[ident]:eq_off[ident] + count] = seg
                else:
                    carried_mult[ident] = seg
        times.append(time.perf_counter() - t0)
    if np.isnan(x_star).any():
        raise SeparatorMismatch("some variables were never recovered")
    return TreeSolution(
        x_star, lam, values[tree.root], values, warn,
        {"downward_levels": times},
    )


def solve_tree(
    qp: CoupledQP,
    tree: CliqueTree,
    parallel: bool | int = False,
    tol_rank: float = TOL_RANK,
    eps_reg: float | None = None,
) -> TreeSolution:
    """Upward pass, root solve and downward pass.

    ``parallel`` (``True`` or a worker count) processes each level set on a
    thread pool; results are bitwise identical to the serial run because
    every clique reduces its children in ascending index order.
    """
    tree = _check_problem(qp, tree)
    t0 = time.perf_counter()
    up = upward_pass(qp, tree, parallel, tol_rank, eps_reg)
    t1 = time.perf_counter()
    sol = downward_pass(qp, tree, up, parallel, tol_rank, eps_reg)
    t2 = time.perf_counter()
    sol.timings.update(
        {"upward": t1 - t0, "downward": t2 - t1, "upward_levels": up.level_times}
    )
    return sol
