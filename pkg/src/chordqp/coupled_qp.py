"""Data model for loosely coupled convex quadratic programs.

A :class:`CoupledQP` is a sum of :class:`QuadraticTerm` objects, each of
which only sees a handful of entries of the global decision vector::

    min_x  sum_i  1/2 x_J^T P_i x_J + p_i^T x_J + c_i
    s.t.   eqA_i   x_J  = eqb_i
           ineqD_i x_J <= ineqe_i

where ``J = scope_i``. Indices are 0-based in memory and 1-based in the JSON
file format; conversion happens only in :func:`from_dict` / :func:`to_dict`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, IndexOutOfRange, InvalidProblem


def _matrix(a, ncols: int) -> np.ndarray:
    if a is None:
        arr = np.zeros((0, ncols))
    else:
        arr = np.array(a, dtype=float, copy=True)
        if arr.size == 0:
            arr = np.zeros((0, ncols))
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
    arr.setflags(write=False)
    return arr


def _vector(a, size: int | None = None) -> np.ndarray:
    if a is None:
        arr = np.zeros(0 if size is None else size)
    else:
        arr = np.array(a, dtype=float, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class VariableSpace:
    """The global decision vector: its size, optional labels and blocks.

    ``blocks`` maps a supernode name (e.g. ``"x3"``) to the scalar indices it
    owns; MPC lowerings use it to build graphs on supernodes and to reshape
    solutions into trajectories.
    """

    n: int
    labels: tuple[str, ...] | None = None
    blocks: Mapping[str, tuple[int, ...]] | None = None

    def __post_init__(self):
        if self.n < 1:
            raise InvalidProblem("VariableSpace needs n >= 1")
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != self.n:
                raise InvalidProblem(f"expected {self.n} labels, got {len(labels)}")
            if len(set(labels)) != len(labels):
                raise InvalidProblem("variable labels must be distinct")
            object.__setattr__(self, "labels", labels)
        if self.blocks is not None:
            blocks = {k: tuple(int(i) for i in v) for k, v in self.blocks.items()}
            object.__setattr__(self, "blocks", blocks)

    def label(self, i: int) -> str:
        return self.labels[i] if self.labels is not None else f"z{i + 1}"


@dataclass(frozen=True)
class QuadraticTerm:
    """One term of the objective together with the constraints it carries.

    Indicator functions of affine sets are stored as explicit equality rows
    (``eq_A``, ``eq_b``), never as penalties.
    """

    scope: tuple[int, ...]
    P: np.ndarray
    p: np.ndarray
    c: float = 0.0
    eq_A: np.ndarray = field(default=None)
    eq_b: np.ndarray = field(default=None)
    ineq_D: np.ndarray = field(default=None)
    ineq_e: np.ndarray = field(default=None)

    def __post_init__(self):
        scope = tuple(int(i) for i in self.scope)
        k = len(scope)
        if k == 0:
            raise InvalidProblem("term scope must be non-empty")
        if any(b <= a for a, b in zip(scope, scope[1:])):
            raise InvalidProblem(f"term scope must be strictly increasing: {scope}")
        object.__setattr__(self, "scope", scope)

        P = np.zeros((k, k)) if self.P is None else np.array(self.P, dtype=float)
        if P.ndim == 0:
            P = P.reshape(1, 1)
        if P.shape != (k, k):
            raise DimensionMismatch(f"P has shape {P.shape}, expected {(k, k)}")
        scale = 1.0 + (np.abs(P).max() if P.size else 0.0)
        if not np.allclose(P, P.T, rtol=0.0, atol=1e-12 * scale):
            raise InvalidProblem("P must be symmetric")
        tol_psd = 1e-9 * scale
        if np.linalg.eigvalsh(0.5 * (P + P.T)).min() < -tol_psd:
            raise InvalidProblem(f"P is not positive semidefinite (scope {scope})")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

        p = _vector(self.p, k)
        if p.shape != (k,):
            raise DimensionMismatch(f"p has length {p.size}, expected {k}")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "c", float(self.c))

        for mat, vec, what in (("eq_A", "eq_b", "equality"), ("ineq_D", "ineq_e", "inequality")):
            M = _matrix(getattr(self, mat), k)
            v = _vector(getattr(self, vec), M.shape[0])
            if M.shape[1] != k:
                raise DimensionMismatch(f"{what} matrix has {M.shape[1]} columns, expected {k}")
            if v.shape != (M.shape[0],):
                raise DimensionMismatch(f"{what} rhs has length {v.size}, expected {M.shape[0]}")
            object.__setattr__(self, mat, M)
            object.__setattr__(self, vec, v)

    @property
    def n_eq(self) -> int:
        return self.eq_A.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.ineq_D.shape[0]

    def objective(self, x_local: np.ndarray) -> float:
        return float(0.5 * x_local @ self.P @ x_local + self.p @ x_local + self.c)


@dataclass(frozen=True)
class CoupledQP:
    space: VariableSpace
    terms: tuple[QuadraticTerm, ...]

    def __post_init__(self):
        terms = tuple(self.terms)
        object.__setattr__(self, "terms", terms)
        n = self.space.n
        seen = np.zeros(n, dtype=bool)
        for k, t in enumerate(terms):
            if t.scope[-1] >= n or t.scope[0] < 0:
                raise IndexOutOfRange(f"term {k} has scope index outside 0..{n - 1}")
            seen[list(t.scope)] = True
        if not seen.all():
            orphans = np.flatnonzero(~seen)
            raise InvalidProblem(f"variables {orphans.tolist()} appear in no term")

    @property
    def n(self) -> int:
        return self.space.n

    @property
    def n_eq(self) -> int:
        return sum(t.n_eq for t in self.terms)

    @property
    def n_ineq(self) -> int:
        return sum(t.n_ineq for t in self.terms)

    def eq_offsets(self) -> np.ndarray:
        """Row offset of each term's equality block in the stacked system."""
        return np.concatenate([[0], np.cumsum([t.n_eq for t in self.terms])]).astype(int)

    def ineq_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([t.n_ineq for t in self.terms])]).astype(int)

    def objective(self, z: np.ndarray) -> float:
        return sum(t.objective(z[list(t.scope)]) for t in self.terms)


def scatter_indices(qp: CoupledQP) -> dict[int, list[int]]:
    """For every variable i, the ascending list of terms whose scope holds i."""
    out: dict[int, list[int]] = {i: [] for i in range(qp.n)}
    for k, t in enumerate(qp.terms):
        for i in t.scope:
            out[i].append(k)
    return out


def assemble_dense(qp: CoupledQP, sparse: bool = False):
    """Scatter-add all terms into ``(Q, q, A, b, D, e)``.

    Equality and inequality rows are stacked term by term. The constant terms
    ``c_i`` are not part of the returned data; see :func:`objective_constant`.
    With ``sparse=True`` the matrices are returned in CSR format.
    """
    n = qp.n
    for k, t in enumerate(qp.terms):
        if t.scope[-1] >= n:
            raise IndexOutOfRange(f"term {k} references variable {t.scope[-1]} >= n={n}")
    q = np.zeros(n)
    b = np.concatenate([t.eq_b for t in qp.terms]) if qp.terms else np.zeros(0)
    e = np.concatenate([t.ineq_e for t in qp.terms]) if qp.terms else np.zeros(0)
    for t in qp.terms:
        np.add.at(q, list(t.scope), t.p)

    if sparse:
        Q = _sparse_blocks([(t.scope, t.P) for t in qp.terms], n, n, rows_stacked=False)
        A = _sparse_blocks([(t.scope, t.eq_A) for t in qp.terms], b.size, n)
        D = _sparse_blocks([(t.scope, t.ineq_D) for t in qp.terms], e.size, n)
        return Q, q, A, b, D, e

    Q = np.zeros((n, n))
    A = np.zeros((b.size, n))
    D = np.zeros((e.size, n))
    ra = rd = 0
    for t in qp.terms:
        idx = list(t.scope)
        Q[np.ix_(idx, idx)] += t.P
        A[ra:ra + t.n_eq, idx] = t.eq_A
        D[rd:rd + t.n_ineq, idx] = t.ineq_D
        ra += t.n_eq
        rd += t.n_ineq
    return Q, q, A, b, D, e


def _sparse_blocks(blocks, nrows, ncols, rows_stacked=True):
    rows, cols, vals = [], [], []
    r0 = 0
    for scope, M in blocks:
        if M.size == 0:
            continue
        idx = np.asarray(scope)
        ri, ci = np.nonzero(M)
        rows.append((r0 + ri) if rows_stacked else idx[ri])
        cols.append(idx[ci])
        vals.append(M[ri, ci])
        if rows_stacked:
            r0 += M.shape[0]
    if not rows:
        return sp.csr_matrix((nrows, ncols))
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nrows, ncols)
    ).tocsr()


def objective_constant(qp: CoupledQP) -> float:
    return float(sum(t.c for t in qp.terms))


def wrap_dense(Q, q, A=None, b=None, D=None, e=None, c: float = 0.0) -> CoupledQP:
    """Wrap a dense QP as a single term over all variables."""
    Q = np.asarray(Q, dtype=float)
    n = Q.shape[0]
    term = QuadraticTerm(tuple(range(n)), Q, q, c, A, b, D, e)
    return CoupledQP(VariableSpace(n), (term,))


# -- JSON format -----------------------------------------------------------


def from_dict(data: Mapping) -> CoupledQP:
    """Parse the JSON problem format (1-based scopes, absent keys = empty)."""
    try:
        n = int(data["n"])
        raw_terms = data["terms"]
    except KeyError as exc:
        raise InvalidProblem(f"missing required field {exc.args[0]!r}") from None
    labels = data.get("labels")
    terms = []
    for k, rt in enumerate(raw_terms):
        try:
            scope = [int(i) - 1 for i in rt["scope"]]
        except KeyError:
            raise InvalidProblem(f"terms[{k}]: missing field 'scope'") from None
        size = len(scope)
        try:
            terms.append(
                QuadraticTerm(
                    tuple(scope),
                    rt.get("P", np.zeros((size, size))),
                    rt.get("p", np.zeros(size)),
                    rt.get("c", 0.0),
                    rt.get("eqA"),
                    rt.get("eqb"),
                    rt.get("ineqD"),
                    rt.get("ineqe"),
                )
            )
        except (InvalidProblem, ValueError) as exc:
            raise InvalidProblem(f"terms[{k}]: {exc}") from None
    return CoupledQP(VariableSpace(n, tuple(labels) if labels else None), tuple(terms))


def to_dict(qp: CoupledQP) -> dict:
    out: dict = {"n": qp.n}
    if qp.space.labels is not None:
        out["labels"] = list(qp.space.labels)
    terms = []
    for t in qp.terms:
        rt: dict = {"scope": [i + 1 for i in t.scope], "P": t.P.tolist(), "p": t.p.tolist()}
        if t.c:
            rt["c"] = t.c
        if t.n_eq:
            rt["eqA"], rt["eqb"] = t.eq_A.tolist(), t.eq_b.tolist()
        if t.n_ineq:
            rt["ineqD"], rt["ineqe"] = t.ineq_D.tolist(), t.ineq_e.tolist()
        terms.append(rt)
    out["terms"] = terms
    return out


def load(path: str | Path) -> CoupledQP:
    with open(path) as fh:
        return from_dict(json.load(fh))


def save(qp: CoupledQP, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(qp), fh, indent=1)
