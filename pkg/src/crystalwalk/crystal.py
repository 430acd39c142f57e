"""Finite quotient graphs, their homology data and planar realizations.

A crystal lattice is described by a finite quotient graph ``G0`` (multi-edges
and self-loops allowed) together with a translation vector on every arc.  Arc
``2i`` is the forward arc of edge ``i`` and arc ``2i + 1`` its inverse, so arc
ids are stable and every derived matrix layout is reproducible.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class GraphError(ValueError):
    """A quotient graph violates one of its structural invariants."""


class EmbeddingError(ValueError):
    """A realization of the period lattice is degenerate or inconsistent."""


class QuotientFileError(ValueError):
    """A custom quotient-graph description could not be parsed."""


class LatticeKind(str, Enum):
    TRIANGULAR = "triangular"
    HEXAGONAL = "hexagonal"
    KAGOME = "kagome"
    SQUARE = "square"

    @classmethod
    def parse(cls, name: "str | LatticeKind") -> "LatticeKind":
        if isinstance(name, LatticeKind):
            return name
        key = str(name).strip().lower()
        aliases = {"z2": "square", "squarez2": "square", "honeycomb": "hexagonal"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown lattice {name!r}; expected one of {valid}") from None


@dataclass(frozen=True)
class Arc:
    id: int
    origin: int
    terminal: int
    inverse: int


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class QuotientGraph:
    n_vertices: int
    arcs: tuple[Arc, ...]
    degrees: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        n, arcs = self.n_vertices, self.arcs
        if n < 1:
            raise GraphError("vertex set must be nonempty")
        if len(arcs) % 2:
            raise GraphError("|arcs| = 2|edges| violated: odd number of arcs")
        for i, a in enumerate(arcs):
            if a.id != i:
                raise GraphError(f"arc ids must be 0..{len(arcs) - 1} in order (arc {i} has id {a.id})")
            if not (0 <= a.origin < n and 0 <= a.terminal < n):
                raise GraphError(f"arc {i} references a vertex outside 0..{n - 1}")
            if not 0 <= a.inverse < len(arcs):
                raise GraphError(f"arc {i} has an inverse outside the arc set")
            if a.inverse == i:
                raise GraphError(f"inverse has a fixed point at arc {i}")
            b = arcs[a.inverse]
            if b.inverse != i:
                raise GraphError(f"inverse is not an involution at arc {i}")
            if b.origin != a.terminal or b.terminal != a.origin:
                raise GraphError(f"origin(inverse(a)) = terminal(a) violated at arc {i}")
        deg = [0] * n
        for a in arcs:
            deg[a.origin] += 1
        if 0 in deg:
            raise GraphError(f"vertex {deg.index(0)} is isolated")
        object.__setattr__(self, "degrees", tuple(deg))

    @classmethod
    def from_edges(cls, n_vertices: int, edges: Iterable[tuple[int, int]]) -> "QuotientGraph":
        arcs = []
        for i, (u, v) in enumerate(edges):
            arcs.append(Arc(2 * i, u, v, 2 * i + 1))
            arcs.append(Arc(2 * i + 1, v, u, 2 * i))
        return cls(n_vertices, tuple(arcs))

    @property
    def n_arcs(self) -> int:
        return len(self.arcs)

    @property
    def n_edges(self) -> int:
        return len(self.arcs) // 2

    @property
    def origins(self) -> np.ndarray:
        return np.array([a.origin for a in self.arcs], dtype=int)

    @property
    def terminals(self) -> np.ndarray:
        return np.array([a.terminal for a in self.arcs], dtype=int)

    @property
    def inverses(self) -> np.ndarray:
        return np.array([a.inverse for a in self.arcs], dtype=int)

    @property
    def is_regular(self) -> bool:
        return len(set(self.degrees)) == 1

    def betti(self) -> int:
        return self.n_edges - self.n_vertices + 1


@dataclass(frozen=True)
class TreeDecomposition:
    tree_arcs: frozenset[int]
    cotree_arcs: tuple[int, ...]
    cycles: dict[int, tuple[int, ...]]
    parent_arc: tuple[int | None, ...]

    @property
    def b1(self) -> int:
        return len(self.cotree_arcs) // 2


def spanning_tree(g: QuotientGraph) -> TreeDecomposition:
    """Breadth-first spanning tree from vertex 0, scanning arcs by id.

    Each cotree arc ``e`` gets the fundamental cycle ``(e, path t(e) -> o(e))``.
    """
    out: list[list[int]] = [[] for _ in range(g.n_vertices)]
    for a in g.arcs:
        out[a.origin].append(a.id)

    parent: list[int | None] = [None] * g.n_vertices
    seen = [False] * g.n_vertices
    seen[0] = True
    queue = deque([0])
    tree: set[int] = set()
    while queue:
        v = queue.popleft()
        for aid in out[v]:
            a = g.arcs[aid]
            if not seen[a.terminal]:
                seen[a.terminal] = True
                parent[a.terminal] = aid
                tree.update((aid, a.inverse))
                queue.append(a.terminal)
    if not all(seen):
        raise GraphError(f"quotient graph is disconnected (vertex {seen.index(False)} unreachable from 0)")

    def up(v: int) -> list[int]:
        # arcs leading from v to the root
        path = []
        while parent[v] is not None:
            path.append(g.arcs[parent[v]].inverse)
            v = g.arcs[parent[v]].origin
        return path

    def tree_path(a: int, b: int) -> list[int]:
        pa, pb = up(a), up(b)
        # strip the shared ancestry
        while pa and pb and pa[-1] == pb[-1]:
            pa.pop()
            pb.pop()
        down = [g.arcs[x].inverse for x in reversed(pb)]
        return pa + down

    cotree = tuple(a.id for a in g.arcs if a.id not in tree)
    cycles = {e: (e, *tree_path(g.arcs[e].terminal, g.arcs[e].origin)) for e in cotree}
    return TreeDecomposition(frozenset(tree), cotree, cycles, tuple(parent))


def bipartite(g: QuotientGraph) -> tuple[bool, int]:
    """Two-colouring test. Returns ``(is_bipartite, indicator)`` with indicator 1 iff non-bipartite."""
    colour = [-1] * g.n_vertices
    colour[0] = 0
    queue = deque([0])
    ok = True
    while queue:
        v = queue.popleft()
        for a in g.arcs:
            if a.origin != v:
                continue
            w = a.terminal
            if colour[w] < 0:
                colour[w] = 1 - colour[v]
                queue.append(w)
            elif colour[w] == colour[v]:
                ok = False
    if -1 in colour:
        raise GraphError("quotient graph is disconnected")
    return ok, 0 if ok else 1


@dataclass(frozen=True)
class Embedding:
    """Realization of the period lattice.

    ``theta_hat[e]`` is the lattice translation picked up along arc ``e``;
    ``Theta`` is the inverse transpose of the basis matrix ``ThetaTilde``
    whose columns are the chosen ``theta_hat`` basis vectors.
    """

    theta_hat: np.ndarray
    phi0: np.ndarray
    basis_arcs: tuple[int, ...]
    Theta: np.ndarray
    ThetaTilde: np.ndarray

    @property
    def dim(self) -> int:
        return self.theta_hat.shape[1]

    @property
    def shifts(self) -> np.ndarray:
        """Translations in lattice coordinates, ``Theta^T theta_hat(e)``; phases are ``k . shifts[e]``."""
        return self.theta_hat @ self.Theta

    def integer_shifts(self, tol: float = 1e-9) -> np.ndarray:
        m = self.shifts
        r = np.rint(m)
        if np.max(np.abs(m - r), initial=0.0) > tol:
            raise EmbeddingError("arc translations are not integral in the chosen basis")
        return r.astype(int)


def build_embedding(
    g: QuotientGraph,
    tree: TreeDecomposition,
    phi: np.ndarray,
    basis_arcs: Sequence[int] | None = None,
    phi0: np.ndarray | None = None,
) -> Embedding:
    """Gauge ``phi`` onto the spanning tree and choose the lattice basis.

    ``phi[e]`` is the displacement carried by arc ``e``.  The twist vector is
    ``phi(C(e))`` on cotree arcs and zero on tree arcs.  Without an explicit
    ``basis_arcs`` the first cotree arcs (in id order) that increase the rank
    are used.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 2 or phi.shape[0] != g.n_arcs:
        raise EmbeddingError(f"phi must have shape (n_arcs, d); got {phi.shape}")
    inv = g.inverses
    if not np.allclose(phi[inv], -phi, atol=1e-12):
        raise EmbeddingError("phi(inverse(e)) = -phi(e) violated")
    d = phi.shape[1]

    theta = np.zeros_like(phi)
    for e, cyc in tree.cycles.items():
        theta[e] = phi[list(cyc)].sum(axis=0)

    if np.linalg.matrix_rank(theta, tol=1e-9) != d:
        raise EmbeddingError(f"rank of the fundamental cycle vectors is below d = {d}")

    if basis_arcs is None:
        chosen: list[int] = []
        for e in tree.cotree_arcs:
            trial = theta[chosen + [e]]
            if np.linalg.matrix_rank(trial, tol=1e-9) == len(chosen) + 1:
                chosen.append(e)
            if len(chosen) == d:
                break
    else:
        chosen = list(basis_arcs)
        if len(chosen) != d:
            raise EmbeddingError(f"need exactly d = {d} basis arcs, got {len(chosen)}")
        bad = [e for e in chosen if e not in tree.cotree_arcs]
        if bad:
            raise EmbeddingError(f"basis arcs {bad} are tree arcs")

    tilde = np.column_stack([theta[e] for e in chosen])
    Theta = theta_matrix(tilde)

    # tree potential: phi0(v) = sum of phi along the tree path root -> v
    potential = np.zeros((g.n_vertices, d))
    order = sorted(range(g.n_vertices), key=lambda v: _depth(tree, g, v))
    for v in order:
        pa = tree.parent_arc[v]
        if pa is not None:
            potential[v] = potential[g.arcs[pa].origin] + phi[pa]
    if phi0 is None:
        phi0 = potential
    else:
        phi0 = np.asarray(phi0, dtype=float)
        for a in tree.tree_arcs:
            arc = g.arcs[a]
            if not np.allclose(phi0[arc.terminal] - phi0[arc.origin], phi[a], atol=1e-12):
                raise EmbeddingError(f"phi0 inconsistent with phi on tree arc {a}")

    return Embedding(_frozen(theta), _frozen(phi0), tuple(chosen), _frozen(Theta), _frozen(tilde))


def theta_matrix(basis: np.ndarray) -> np.ndarray:
    """Inverse transpose of the basis matrix; raises on a singular basis."""
    basis = np.asarray(basis, dtype=float)
    if basis.shape[0] != basis.shape[1] or abs(np.linalg.det(basis)) < 1e-12:
        raise EmbeddingError("theta-hat basis vectors are linearly dependent")
    return np.linalg.inv(basis).T


def _depth(tree: TreeDecomposition, g: QuotientGraph, v: int) -> int:
    d = 0
    while tree.parent_arc[v] is not None:
        v = g.arcs[tree.parent_arc[v]].origin
        d += 1
    return d


# Edge lists (u, v, translation of the u -> v arc) of the quotient graphs.
_BUILTIN_EDGES: dict[LatticeKind, tuple[int, list[tuple[int, int, tuple[float, float]]]]] = {
    LatticeKind.TRIANGULAR: (1, [(0, 0, (1, 0)), (0, 0, (0, 1)), (0, 0, (1, 1))]),
    LatticeKind.HEXAGONAL: (2, [(0, 1, (0, 0)), (0, 1, (1, 0)), (0, 1, (0, 1))]),
    # sites are the three hexagonal edges; triangles around both hexagonal vertices
    LatticeKind.KAGOME: (3, [
        (0, 1, (0, 0)), (0, 2, (0, 0)), (1, 2, (0, 0)),
        (1, 0, (1, 0)), (2, 0, (0, 1)), (1, 2, (1, -1)),
    ]),
    LatticeKind.SQUARE: (1, [(0, 0, (1, 0)), (0, 0, (0, 1))]),
}


def build_quotient(kind: LatticeKind | str) -> QuotientGraph:
    n, edges = _BUILTIN_EDGES[LatticeKind.parse(kind)]
    return QuotientGraph.from_edges(n, [(u, v) for u, v, _ in edges])


@dataclass(frozen=True)
class Crystal:
    """Quotient graph, spanning tree and embedding bundled together.

    ``kind`` is set for the built-in lattices and survives re-realization with
    a different basis, since the band structure in lattice coordinates does
    not depend on the basis.
    """

    graph: QuotientGraph
    tree: TreeDecomposition
    embedding: Embedding
    kind: LatticeKind | None = None

    @property
    def name(self) -> str:
        return self.kind.value if self.kind else "custom"

    @property
    def n_vertices(self) -> int:
        return self.graph.n_vertices

    @property
    def n_arcs(self) -> int:
        return self.graph.n_arcs

    @property
    def n_edges(self) -> int:
        return self.graph.n_edges

    @property
    def b1(self) -> int:
        return self.tree.b1

    @property
    def bipartite_indicator(self) -> int:
        return bipartite(self.graph)[1]

    def realized(self, basis: np.ndarray) -> "Crystal":
        """Same crystal with the lattice basis vectors replaced by the columns of ``basis``."""
        basis = np.asarray(basis, dtype=float)
        Theta = theta_matrix(basis)
        emb = self.embedding
        theta = emb.shifts @ basis.T
        phi0 = emb.phi0 @ emb.Theta @ basis.T
        new = Embedding(_frozen(theta), _frozen(phi0), emb.basis_arcs, _frozen(Theta), _frozen(basis))
        return Crystal(self.graph, self.tree, new, self.kind)


def crystal_from_edges(
    n_vertices: int,
    edges: Sequence[tuple[int, int, Sequence[float]]],
    basis_arcs: Sequence[int] | None = None,
    kind: LatticeKind | None = None,
) -> Crystal:
    g = QuotientGraph.from_edges(n_vertices, [(u, v) for u, v, _ in edges])
    tree = spanning_tree(g)
    vecs = [np.asarray(t, dtype=float) for _, _, t in edges]
    if len({v.shape for v in vecs}) > 1:
        raise EmbeddingError("translation vectors must share one dimension")
    phi = np.empty((g.n_arcs, vecs[0].size if vecs else 2))
    for i, t in enumerate(vecs):
        phi[2 * i] = t
        phi[2 * i + 1] = -t
    return Crystal(g, tree, build_embedding(g, tree, phi, basis_arcs), kind)


def build_crystal(kind: LatticeKind | str, basis_arcs: Sequence[int] | None = None) -> Crystal:
    kind = LatticeKind.parse(kind)
    n, edges = _BUILTIN_EDGES[kind]
    return crystal_from_edges(n, edges, basis_arcs, kind)


def parse_quotient(text: str) -> Crystal:
    """Parse a custom quotient graph.

    Grammar (``#`` starts a comment, blank lines ignored)::

        <n_vertices>
        <u> <v> <tx> <ty>      one line per edge

    ``u`` and ``v`` are vertex indices in ``0..n_vertices-1`` (``u == v`` is a
    self-loop) and ``(tx, ty)`` is the translation carried by the ``u -> v`` arc.
    """
    n_vertices = None
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if n_vertices is None:
            if len(tok) != 1 or not tok[0].isdigit() or int(tok[0]) < 1:
                raise QuotientFileError(f"line {lineno}: expected a positive vertex count, got {line!r}")
            n_vertices = int(tok[0])
            continue
        if len(tok) != 4:
            raise QuotientFileError(f"line {lineno}: expected 'u v tx ty', got {len(tok)} fields")
        try:
            u, v = int(tok[0]), int(tok[1])
            t = (float(tok[2]), float(tok[3]))
        except ValueError:
            raise QuotientFileError(f"line {lineno}: could not parse {line!r}") from None
        if not (0 <= u < n_vertices and 0 <= v < n_vertices):
            raise QuotientFileError(f"line {lineno}: vertex out of range 0..{n_vertices - 1}")
        edges.append((u, v, t))
    if n_vertices is None:
        raise QuotientFileError("line 1: missing vertex-count header")
    if not edges:
        raise QuotientFileError("no edges given")
    try:
        return crystal_from_edges(n_vertices, edges)
    except (GraphError, EmbeddingError) as exc:
        raise QuotientFileError(str(exc)) from exc


def load_quotient(path: str | Path) -> Crystal:
    return parse_quotient(Path(path).read_text())
