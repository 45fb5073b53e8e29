"""Sparsity graphs, chordal embeddings and clique trees.

Vertices are plain integers ``0..n_vertices-1``. For MPC problems the
vertices are supernodes (one per state or input vector); :func:`block_graph`
builds that graph and :func:`expand_tree` maps a supernode clique tree back to
scalar variable indices.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from itertools import combinations
from typing import Iterable, Sequence

from .coupled_qp import CoupledQP
from .errors import (
    DisconnectedCliqueGraph,
    DisconnectedGroup,
    InvalidTree,
    NotPerfectElimination,
    UnassignableTerm,
)


def _edge(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class SparsityGraph:
    n_vertices: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        edges = set()
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-loop on vertex {i}")
            if not (0 <= i < self.n_vertices and 0 <= j < self.n_vertices):
                raise ValueError(f"edge ({i}, {j}) outside vertex range")
            edges.add(_edge(i, j))
        object.__setattr__(self, "edges", frozenset(edges))

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "SparsityGraph":
        return cls(n, frozenset(edges))

    def adjacency(self) -> list[set[int]]:
        adj: list[set[int]] = [set() for _ in range(self.n_vertices)]
        for i, j in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        return adj

    def union(self, extra: Iterable[tuple[int, int]]) -> "SparsityGraph":
        return SparsityGraph(self.n_vertices, self.edges | {_edge(i, j) for i, j in extra})

    def is_connected(self) -> bool:
        if self.n_vertices == 0:
            return True
        adj = self.adjacency()
        seen = {0}
        stack = [0]
        while stack:
            for w in adj[stack.pop()]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return len(seen) == self.n_vertices


@dataclass(frozen=True)
class EliminationOrdering:
    """Elimination order plus every edge that had to be added for it.

    ``fill_edges`` holds all added edges (forced-clique edges included), so
    ``order`` is a perfect elimination ordering of ``g.union(fill_edges)``;
    ``forced_edges`` lists the subset that came from forced cliques.
    """

    order: tuple[int, ...]
    fill_edges: frozenset[tuple[int, int]] = frozenset()
    forced_edges: frozenset[tuple[int, int]] = frozenset()

    @property
    def heuristic_fill(self) -> frozenset[tuple[int, int]]:
        return self.fill_edges - self.forced_edges

    def filled(self, g: SparsityGraph) -> SparsityGraph:
        return g.union(self.fill_edges)


# -- graph construction ----------------------------------------------------


def build_sparsity_graph(qp: CoupledQP) -> SparsityGraph:
    """Edge (i, j) whenever some term's scope holds both i and j."""
    edges = set()
    for t in qp.terms:
        edges.update(combinations(t.scope, 2))
    return SparsityGraph(qp.n, frozenset(edges))


def block_graph(qp: CoupledQP, blocks: Sequence[Sequence[int]]) -> SparsityGraph:
    """Sparsity graph on supernodes; ``blocks`` partitions the variables."""
    owner = {}
    for b, idx in enumerate(blocks):
        for i in idx:
            owner[i] = b
    edges = set()
    for t in qp.terms:
        touched = sorted({owner[i] for i in t.scope})
        edges.update(combinations(touched, 2))
    return SparsityGraph(len(blocks), frozenset(edges))


# -- chordality ------------------------------------------------------------


def maximum_cardinality_search(g: SparsityGraph) -> list[int]:
    """Visit order of maximum-cardinality search, ties to the lowest index."""
    adj = g.adjacency()
    weight = [0] * g.n_vertices
    heap = [(0, v) for v in range(g.n_vertices)]
    heapq.heapify(heap)
    visited = [False] * g.n_vertices
    order = []
    while heap:
        w, v = heapq.heappop(heap)
        if visited[v] or -w != weight[v]:
            continue
        visited[v] = True
        order.append(v)
        for u in adj[v]:
            if not visited[u]:
                weight[u] += 1
                heapq.heappush(heap, (-weight[u], u))
    return order


def _later_neighbors(adj: list[set[int]], order: Sequence[int]) -> tuple[list[int], list[set[int]]]:
    pos = [0] * len(order)
    for k, v in enumerate(order):
        pos[v] = k
    later = [{u for u in adj[v] if pos[u] > pos[v]} for v in range(len(order))]
    return pos, later


def is_perfect_elimination(g: SparsityGraph, order: Sequence[int]) -> bool:
    adj = g.adjacency()
    pos, later = _later_neighbors(adj, order)
    for v in order:
        lv = later[v]
        if len(lv) < 2:
            continue
        p = min(lv, key=pos.__getitem__)
        if not (lv - {p}) <= adj[p]:
            return False
    return True


def is_chordal(g: SparsityGraph) -> tuple[bool, tuple[int, ...] | None]:
    """Chordality test; on success also returns a perfect elimination ordering."""
    peo = tuple(reversed(maximum_cardinality_search(g)))
    if is_perfect_elimination(g, peo):
        return True, peo
    return False, None


def _fill_cost(adj: list[set[int]], v: int) -> int:
    nb = sorted(adj[v])
    return sum(1 for a, b in combinations(nb, 2) if b not in adj[a])


def chordal_embedding(
    g: SparsityGraph, forced_cliques: Sequence[Iterable[int]] = ()
) -> EliminationOrdering:
    """Greedy minimum-fill chordal embedding.

    All pairs inside each forced clique are connected first; then vertices are
    eliminated one at a time, always picking the one whose elimination adds
    the fewest edges (lowest index on ties).
    """
    forced = set()
    for clique in forced_cliques:
        forced.update(_edge(i, j) for i, j in combinations(sorted(set(clique)), 2))
    forced -= g.edges
    base = g.union(forced)
    adj = base.adjacency()
    remaining = set(range(g.n_vertices))
    cost = {v: _fill_cost(adj, v) for v in remaining}
    order = []
    fill = set()
    while remaining:
        v = min(remaining, key=lambda u: (cost[u], u))
        nb = sorted(adj[v])
        touched = set(nb)
        for a, b in combinations(nb, 2):
            if b not in adj[a]:
                adj[a].add(b)
                adj[b].add(a)
                fill.add(_edge(a, b))
                touched |= adj[a] | adj[b]
        for u in nb:
            adj[u].discard(v)
        remaining.discard(v)
        order.append(v)
        for u in touched & remaining:
            cost[u] = _fill_cost(adj, u)
    return EliminationOrdering(tuple(order), frozenset(fill | forced), frozenset(forced))


def _clique_key(c: tuple[int, ...]) -> tuple:
    return (c[-1], c)


def enumerate_cliques(ordering: EliminationOrdering, g: SparsityGraph) -> list[tuple[int, ...]]:
    """Maximal cliques of the filled graph, sorted by their largest vertex."""
    filled = ordering.filled(g)
    order = list(ordering.order)
    if sorted(order) != list(range(g.n_vertices)):
        raise NotPerfectElimination("ordering is not a permutation of the vertices")
    adj = filled.adjacency()
    pos, later = _later_neighbors(adj, order)
    parent = {}
    for v in order:
        lv = later[v]
        if not lv:
            continue
        p = min(lv, key=pos.__getitem__)
        if not (lv - {p}) <= adj[p]:
            raise NotPerfectElimination(f"later neighbours of vertex {v} are not a clique")
        parent[v] = p
    # K_v is not maximal iff some w with parent(w) = v has |K_w| = |K_v| + 1
    absorbed = set()
    for w, v in parent.items():
        if len(later[w]) == len(later[v]) + 1:
            absorbed.add(v)
    cliques = [tuple(sorted({v} | later[v])) for v in order if v not in absorbed]
    return sorted(cliques, key=_clique_key)


# -- clique trees ----------------------------------------------------------


@dataclass(frozen=True)
class CliqueTree:
    """Rooted tree of cliques with a term-to-clique assignment.

    ``assignment[k]`` is the clique holding term k (``None`` until
    :func:`assign_terms` has run).
    """

    cliques: tuple[tuple[int, ...], ...]
    tree_edges: tuple[tuple[int, int], ...]
    root: int = 0
    assignment: tuple[int, ...] | None = None
    names: tuple[str, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "cliques", tuple(tuple(sorted(c)) for c in self.cliques))
        object.__setattr__(self, "tree_edges", tuple(_edge(i, j) for i, j in self.tree_edges))
        if self.assignment is not None:
            object.__setattr__(self, "assignment", tuple(self.assignment))
        q = len(self.cliques)
        if not 0 <= self.root < q:
            raise InvalidTree(f"root {self.root} outside 0..{q - 1}")
        if len(self.tree_edges) != q - 1:
            raise InvalidTree(f"{q} cliques need {q - 1} tree edges, got {len(self.tree_edges)}")
        # parent / order are computed here so that a non-tree fails fast
        _ = self.parent

    @property
    def size(self) -> int:
        return len(self.cliques)

    @cached_property
    def neighbors(self) -> list[list[int]]:
        nb: list[list[int]] = [[] for _ in self.cliques]
        for i, j in self.tree_edges:
            nb[i].append(j)
            nb[j].append(i)
        return [sorted(x) for x in nb]

    @cached_property
    def parent(self) -> list[int | None]:
        par: list[int | None] = [None] * self.size
        seen = {self.root}
        queue = deque([self.root])
        while queue:
            i = queue.popleft()
            for j in self.neighbors[i]:
                if j not in seen:
                    seen.add(j)
                    par[j] = i
                    queue.append(j)
        if len(seen) != self.size:
            raise InvalidTree("tree edges do not span all cliques")
        return par

    @cached_property
    def children(self) -> list[list[int]]:
        ch: list[list[int]] = [[] for _ in self.cliques]
        for j, p in enumerate(self.parent):
            if p is not None:
                ch[p].append(j)
        return ch

    @cached_property
    def depth(self) -> list[int]:
        d = [0] * self.size
        for i in self.topological_order():
            if self.parent[i] is not None:
                d[i] = d[self.parent[i]] + 1
        return d

    def topological_order(self) -> list[int]:
        """Root first, parents before children (breadth first, by index)."""
        out = [self.root]
        k = 0
        while k < len(out):
            out.extend(self.children[out[k]])
            k += 1
        return out

    @property
    def separators(self) -> dict[tuple[int, int], tuple[int, ...]]:
        return {
            (i, j): tuple(sorted(set(self.cliques[i]) & set(self.cliques[j])))
            for i, j in self.tree_edges
        }

    def separator(self, i: int) -> tuple[int, ...]:
        """Separator between clique i and its parent (empty for the root)."""
        p = self.parent[i]
        if p is None:
            return ()
        return tuple(sorted(set(self.cliques[i]) & set(self.cliques[p])))

    def terms_of(self, clique: int) -> list[int]:
        if self.assignment is None:
            raise InvalidTree("terms have not been assigned")
        return [k for k, c in enumerate(self.assignment) if c == clique]

    def with_root(self, root: int) -> "CliqueTree":
        return replace(self, root=root)

    def with_names(self, names: Sequence[str]) -> "CliqueTree":
        return replace(self, names=tuple(names))

    def path(self, i: int, j: int) -> list[int]:
        up_i, up_j = [i], [j]
        while self.parent[up_i[-1]] is not None:
            up_i.append(self.parent[up_i[-1]])
        while self.parent[up_j[-1]] is not None:
            up_j.append(self.parent[up_j[-1]])
        common = set(up_i) & set(up_j)
        a = next(k for k in up_i if k in common)
        return up_i[: up_i.index(a) + 1] + list(reversed(up_j[: up_j.index(a)]))

    def satisfies_intersection_property(self) -> bool:
        return clique_intersection_violation(self) is None

    def validate(self, qp: CoupledQP | None = None) -> None:
        """Raise :class:`InvalidTree` unless every structural invariant holds."""
        bad = clique_intersection_violation(self)
        if bad is not None:
            i, j, k = bad
            raise InvalidTree(f"intersection of cliques {i} and {j} not contained in clique {k}")
        if qp is not None and self.assignment is not None:
            if len(self.assignment) != len(qp.terms):
                raise InvalidTree("assignment length differs from the number of terms")
            for k, (t, c) in enumerate(zip(qp.terms, self.assignment)):
                if not set(t.scope) <= set(self.cliques[c]):
                    raise InvalidTree(f"term {k} assigned to clique {c} which does not cover it")

    def to_dot(self, label=None) -> str:
        name = label or (lambda v: str(v + 1))
        lines = ["graph cliquetree {"]
        for i, c in enumerate(self.cliques):
            title = self.names[i] if self.names else f"C{i + 1}"
            body = ",".join(name(v) for v in c)
            shape = "doublecircle" if i == self.root else "ellipse"
            lines.append(f'  c{i} [label="{title} = {{{body}}}", shape={shape}];')
        for (i, j), sep in sorted(self.separators.items()):
            lines.append(f'  c{i} -- c{j} [label="{",".join(name(v) for v in sep)}"];')
        lines.append("}")
        return "\n".join(lines)


def clique_intersection_violation(tree: CliqueTree) -> tuple[int, int, int] | None:
    """First (i, j, k) with C_i & C_j not inside C_k for k on the i-j path.

    Checked through the equivalent per-vertex condition: for every vertex the
    cliques containing it must induce a connected subtree.
    """
    holders: dict[int, list[int]] = {}
    for i, c in enumerate(tree.cliques):
        for v in c:
            holders.setdefault(v, []).append(i)
    for v, hs in holders.items():
        hs_set = set(hs)
        # a connected subtree has exactly one member whose parent is outside it
        tops = [i for i in hs if tree.parent[i] not in hs_set]
        if len(tops) > 1:
            i, j = tops[0], tops[1]
            k = next(k for k in tree.path(i, j) if k not in hs_set)
            return (i, j, k)
    return None


def build_clique_tree(
    cliques: Sequence[Sequence[int]], root_hint: int | None = None
) -> CliqueTree:
    """Maximum-weight spanning tree of the clique intersection graph.

    Weights are separator sizes; ties go to the lexicographically smallest
    clique index pair. The root is ``root_hint`` or the first clique
    containing the lowest vertex.
    """
    cliques = [tuple(sorted(c)) for c in cliques]
    q = len(cliques)
    holders: dict[int, list[int]] = {}
    for i, c in enumerate(cliques):
        for v in c:
            holders.setdefault(v, []).append(i)
    weight: dict[tuple[int, int], int] = {}
    for hs in holders.values():
        for i, j in combinations(hs, 2):
            weight[(i, j)] = weight.get((i, j), 0) + 1
    candidates = sorted(weight.items(), key=lambda kv: (-kv[1], kv[0]))

    root_of = list(range(q))

    def find(a):
        while root_of[a] != a:
            root_of[a] = root_of[root_of[a]]
            a = root_of[a]
        return a

    edges = []
    for (i, j), _ in candidates:
        ri, rj = find(i), find(j)
        if ri != rj:
            root_of[max(ri, rj)] = min(ri, rj)
            edges.append((i, j))
            if len(edges) == q - 1:
                break
    if len(edges) != q - 1:
        raise DisconnectedCliqueGraph("sparsity graph is disconnected; a clique tree needs one component")
    if root_hint is None:
        lowest = min(v for c in cliques for v in c)
        root_hint = next(i for i, c in enumerate(cliques) if lowest in c)
    tree = CliqueTree(tuple(cliques), tuple(edges), root_hint)
    tree.validate()
    return tree


def cliques_and_tree(g: SparsityGraph, forced_cliques=(), root_hint=None) -> CliqueTree:
    """Convenience pipeline: embed, enumerate cliques, build the tree."""
    chordal, peo = is_chordal(g) if not forced_cliques else (False, None)
    ordering = EliminationOrdering(peo) if chordal else chordal_embedding(g, forced_cliques)
    return build_clique_tree(enumerate_cliques(ordering, g), root_hint)


def assign_terms(qp: CoupledQP, tree: CliqueTree) -> CliqueTree:
    """Give each term to the smallest-index clique that covers its scope."""
    sets = [set(c) for c in tree.cliques]
    holders: dict[int, set[int]] = {}
    for i, c in enumerate(tree.cliques):
        for v in c:
            holders.setdefault(v, set()).add(i)
    assignment = []
    for k, t in enumerate(qp.terms):
        eligible = set.intersection(*(holders.get(v, set()) for v in t.scope))
        if not eligible:
            raise UnassignableTerm(f"no clique covers the scope of term {k}")
        best = min(eligible)
        assert set(t.scope) <= sets[best]
        assignment.append(best)
    return replace(tree, assignment=tuple(assignment))


def merge_cliques(tree: CliqueTree, groups: Sequence[Sequence[int]]) -> CliqueTree:
    """Union each group of tree-connected cliques into a single clique.

    Groups are renumbered by their smallest member; cliques not mentioned in
    any group stay on their own.
    """
    covered = [i for g in groups for i in g]
    if len(covered) != len(set(covered)):
        raise ValueError("merge groups overlap")
    groups = [sorted(set(g)) for g in groups if g]
    groups += [[i] for i in range(tree.size) if i not in set(covered)]
    groups.sort(key=lambda g: g[0])
    owner = {}
    for gi, g in enumerate(groups):
        for i in g:
            owner[i] = gi
    for gi, g in enumerate(groups):
        members = set(g)
        tops = [i for i in g if tree.parent[i] not in members]
        if len(tops) != 1:
            raise DisconnectedGroup(f"clique group {g} is not connected in the tree")
    cliques = [tuple(sorted(set().union(*(tree.cliques[i] for i in g)))) for g in groups]
    edges = sorted({_edge(owner[i], owner[j]) for i, j in tree.tree_edges if owner[i] != owner[j]})
    assignment = None
    if tree.assignment is not None:
        assignment = tuple(owner[c] for c in tree.assignment)
    names = None
    if tree.names:
        names = tuple("+".join(tree.names[i] for i in g) for g in groups)
    merged = CliqueTree(tuple(cliques), tuple(edges), owner[tree.root], assignment, names)
    merged.validate()
    return merged


def expand_tree(tree: CliqueTree, blocks: Sequence[Sequence[int]]) -> CliqueTree:
    """Replace supernode vertices by the scalar indices of their blocks."""
    cliques = [tuple(sorted(i for b in c for i in blocks[b])) for c in tree.cliques]
    return CliqueTree(tuple(cliques), tree.tree_edges, tree.root, tree.assignment, tree.names)


def tree_from_parents(
    cliques: Sequence[Sequence[int]], parents: Sequence[int | None], names: Sequence[str] | None = None
) -> CliqueTree:
    """Build a tree from an explicit parent list (exactly one ``None``, the root)."""
    root = parents.index(None)
    edges = [(i, p) for i, p in enumerate(parents) if p is not None]
    tree = CliqueTree(tuple(tuple(c) for c in cliques), tuple(edges), root,
                      names=tuple(names) if names else None)
    tree.validate()
    return tree


def tree_for_problem(qp: CoupledQP, root_hint: int | None = None) -> CliqueTree:
    """Default pipeline for a bare problem: sparsity graph, embedding, tree, assignment."""
    return assign_terms(qp, cliques_and_tree(build_sparsity_graph(qp), root_hint=root_hint))
