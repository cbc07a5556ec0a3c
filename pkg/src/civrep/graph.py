"""Causal DAGs, d-separation, and conditional-instrument validity checks.

Text format accepted by :func:`parse_dag`::

    # comment
    latent U          # flag one or more nodes as unobserved
    S -> W
    C -> W -> Y       # chains are allowed
"""
from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

from .errors import CycleError, DagSyntaxError, GraphError, UnknownNodeError

_NAME = r"[A-Za-z_][A-Za-z0-9_]*"
_NAME_RE = re.compile(rf"^{_NAME}$")

UP, DOWN = "up", "down"  # arrived from a child / arrived from a parent


class Dag:
    """Immutable directed acyclic graph over named nodes."""

    def __init__(self, edges: Iterable[tuple[str, str]] = (), nodes: Iterable[str] = (),
                 latent: Iterable[str] = ()):
        edge_list = list(edges)
        edge_set = set()
        for a, b in edge_list:
            if a == b:
                raise GraphError(f"self-loop on {a}")
            if (a, b) in edge_set:
                raise GraphError(f"duplicate edge {a} -> {b}")
            edge_set.add((a, b))
        names = set(nodes) | set(latent) | {v for e in edge_set for v in e}
        self._nodes = frozenset(names)
        self._latent = frozenset(latent)
        self._edges = frozenset(edge_set)
        self._parents = {v: set() for v in names}
        self._children = {v: set() for v in names}
        for a, b in edge_set:
            self._parents[b].add(a)
            self._children[a].add(b)
        self._order = self._toposort()

    def _toposort(self) -> list[str]:
        indeg = {v: len(self._parents[v]) for v in self._nodes}
        queue = deque(sorted(v for v, d in indeg.items() if d == 0))
        order = []
        while queue:
            v = queue.popleft()
            order.append(v)
            for c in sorted(self._children[v]):
                indeg[c] -= 1
                if indeg[c] == 0:
                    queue.append(c)
        if len(order) != len(self._nodes):
            raise CycleError(self._find_cycle(set(self._nodes) - set(order)))
        return order

    def _find_cycle(self, candidates: set[str]) -> list[str]:
        # every node left over by Kahn's algorithm has a parent in the leftover set
        v = min(candidates)
        path, seen = [], {}
        while v not in seen:
            seen[v] = len(path)
            path.append(v)
            v = min(p for p in self._parents[v] if p in candidates)
        cycle = path[seen[v]:][::-1]
        return cycle + [cycle[0]]

    # --- accessors

    @property
    def nodes(self) -> frozenset[str]:
        return self._nodes

    @property
    def edges(self) -> frozenset[tuple[str, str]]:
        return self._edges

    @property
    def latent(self) -> frozenset[str]:
        return self._latent

    @property
    def observed(self) -> frozenset[str]:
        return self._nodes - self._latent

    def topological_order(self) -> list[str]:
        return list(self._order)

    def parents(self, v: str) -> frozenset[str]:
        self._require(v)
        return frozenset(self._parents[v])

    def children(self, v: str) -> frozenset[str]:
        self._require(v)
        return frozenset(self._children[v])

    def has_edge(self, a: str, b: str) -> bool:
        return (a, b) in self._edges

    def _require(self, *vs: str) -> None:
        for v in vs:
            if v not in self._nodes:
                raise UnknownNodeError(f"unknown node {v!r}")

    def __eq__(self, other):
        return (isinstance(other, Dag) and self._nodes == other._nodes
                and self._edges == other._edges and self._latent == other._latent)

    def __hash__(self):
        return hash((self._nodes, self._edges, self._latent))

    def __repr__(self):
        return f"Dag(nodes={len(self._nodes)}, edges={len(self._edges)})"

    def to_text(self) -> str:
        lines = [f"latent {' '.join(sorted(self._latent))}"] if self._latent else []
        lines += [f"{a} -> {b}" for a, b in sorted(self._edges)]
        return "\n".join(lines) + "\n"


def parse_dag(text: str) -> Dag:
    edges, latent, seen = [], [], set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.split()[0] == "latent":
            names = line.split()[1:]
            if not names:
                raise DagSyntaxError(lineno, raw, "latent needs at least one node name")
            for name in names:
                if not _NAME_RE.match(name):
                    raise DagSyntaxError(lineno, raw, f"bad node name {name!r}")
            latent.extend(names)
            continue
        parts = [p.strip() for p in line.split("->")]
        if len(parts) < 2:
            raise DagSyntaxError(lineno, raw, "expected 'A -> B' or 'latent A'")
        for name in parts:
            if not _NAME_RE.match(name):
                raise DagSyntaxError(lineno, raw, f"bad node name {name!r}")
        for a, b in zip(parts, parts[1:]):
            if (a, b) in seen:
                raise DagSyntaxError(lineno, raw, f"duplicate edge {a} -> {b}")
            if a == b:
                raise DagSyntaxError(lineno, raw, f"self-loop on {a}")
            seen.add((a, b))
            edges.append((a, b))
    return Dag(edges, latent=latent)


def descendants(g: Dag, v: str) -> set[str]:
    """All nodes reachable from ``v`` along directed edges, excluding ``v``."""
    g._require(v)
    out, stack = set(), [v]
    while stack:
        for c in g._children[stack.pop()]:
            if c not in out:
                out.add(c)
                stack.append(c)
    return out


def ancestors(g: Dag, nodes: Iterable[str]) -> set[str]:
    """Nodes with a directed path into ``nodes``, plus ``nodes`` themselves."""
    out, stack = set(), list(nodes)
    g._require(*stack)
    while stack:
        v = stack.pop()
        if v not in out:
            out.add(v)
            stack.extend(g._parents[v])
    return out


def d_connecting_path(g: Dag, a: str, b: str, z: Iterable[str] = ()) -> list[str] | None:
    """Return a trail from ``a`` to ``b`` that is active given ``z``, or None.

    Breadth-first search over (node, arrival-direction) states: a node entered
    from a child may continue anywhere unless it is conditioned on; a node
    entered from a parent passes on to children when unconditioned and bounces
    back to parents when it is an ancestor of ``z`` (an opened collider).
    """
    z = set(z)
    g._require(a, b, *z)
    if a == b:
        raise GraphError("d-separation needs two distinct nodes")
    if a in z or b in z:
        raise GraphError("query nodes must not be in the conditioning set")
    anc_z = ancestors(g, z) if z else set()
    start = (a, UP)
    prev = {start: None}
    queue = deque([start])
    while queue:
        state = queue.popleft()
        v, direction = state
        if v == b:
            trail = []
            while state is not None:
                trail.append(state[0])
                state = prev[state]
            return trail[::-1]
        nxt = []
        if direction == UP and v not in z:
            nxt += [(p, UP) for p in g._parents[v]]
            nxt += [(c, DOWN) for c in g._children[v]]
        elif direction == DOWN:
            if v not in z:
                nxt += [(c, DOWN) for c in g._children[v]]
            if v in anc_z:
                nxt += [(p, UP) for p in g._parents[v]]
        for s in sorted(nxt):
            if s not in prev:
                prev[s] = state
                queue.append(s)
    return None


def d_separated(g: Dag, a: str, b: str, z: Iterable[str] = ()) -> bool:
    return d_connecting_path(g, a, b, z) is None


def remove_treatment_edge(g: Dag, w: str, y: str) -> Dag:
    """The manipulated graph with the single edge ``w -> y`` deleted."""
    if not g.has_edge(w, y):
        raise GraphError(f"edge {w} -> {y} not in graph")
    return Dag(g.edges - {(w, y)}, nodes=g.nodes, latent=g.latent)


def collapse(g: Dag, members: Iterable[str], name: str) -> Dag:
    """Merge ``members`` into one virtual node carrying the union of their edges.

    Edges between members are dropped. Raises CycleError when the merge closes
    a directed cycle (a member reaches another through an outside node).
    """
    members = set(members)
    g._require(*members)
    if name in g.nodes and name not in members:
        raise GraphError(f"virtual node name {name!r} already used")
    ren = lambda v: name if v in members else v  # noqa: E731
    edges = {(ren(a), ren(b)) for a, b in g.edges if not (a in members and b in members)}
    latent = {ren(v) for v in g.latent if v not in members}
    return Dag(edges, nodes={ren(v) for v in g.nodes}, latent=latent)


@dataclass(frozen=True)
class CivVerdict:
    """Outcome of the three conditional-instrument conditions.

    ``witness`` maps each failed condition to evidence: ``"relevant"`` to the
    conditioning set that blocks every instrument-treatment path,
    ``"exogenous"`` to an open instrument-outcome trail in the manipulated
    graph, ``"z_clean"`` to the conditioning nodes that descend from the outcome.
    """

    relevant: bool
    exogenous: bool
    z_clean: bool
    witness: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return self.relevant and self.exogenous and self.z_clean

    def to_dict(self) -> dict:
        return {"valid": self.valid, "relevant": self.relevant, "exogenous": self.exogenous,
                "z_clean": self.z_clean, "witness": {k: list(v) for k, v in self.witness.items()}}


def is_valid_civ(g: Dag, q, z: Iterable[str], w: str, y: str) -> CivVerdict:
    """Check whether ``q`` is a conditional instrument for ``w -> y`` given ``z``.

    ``q`` may be a single node or a collection of nodes; a collection is merged
    into one virtual node first (see :func:`collapse`).
    """
    z = set(z)
    if not isinstance(q, str):
        q_set = set(q)
        g._require(*q_set)
        if q_set & (z | {w, y}):
            raise GraphError("instrument set overlaps conditioning set or treatment/outcome")
        q = "__Q__"
        g = collapse(g, q_set, q)
    g._require(q, w, y, *z)
    if q in z:
        raise GraphError(f"instrument {q} is in the conditioning set")
    if w in z | {q} or y in z | {q}:
        raise GraphError("treatment/outcome must not be the instrument or in the conditioning set")
    manipulated = remove_treatment_edge(g, w, y)

    witness = {}
    relevant = d_connecting_path(g, q, w, z) is not None
    if not relevant:
        witness["relevant"] = tuple(sorted(z))
    open_path = d_connecting_path(manipulated, q, y, z)
    exogenous = open_path is None
    if not exogenous:
        witness["exogenous"] = tuple(open_path)
    bad = z & descendants(g, y)
    if bad:
        witness["z_clean"] = tuple(sorted(bad))
    return CivVerdict(relevant, exogenous, not bad, witness)


# Canonical graphs used throughout the tests and CLI examples.

REPRESENTATION_DAG = """\
# S: instrument representation, C: confounding, F: risk factors
latent U
S -> W
S -> C
C -> W
C -> Y
F -> C
F -> Y
U -> W
U -> Y
W -> Y
"""

SYNTHETIC_DAG = """\
# data-generating graph of datagen.generate_synthetic
latent U U1 U2 U3 U4
U2 -> X1
U3 -> X2
U4 -> X3
U1 -> S
X1 -> S
X2 -> S
U -> W
U1 -> W
X3 -> W
X4 -> W
W -> Y
U -> Y
U3 -> Y
U4 -> Y
X4 -> Y
X5 -> Y
"""
