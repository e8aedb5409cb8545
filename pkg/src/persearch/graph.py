"""Attraction/repulsion graph analysis of the contrastive objectives.

Each objective induces a graph whose nodes are the embeddings it optimizes:
attraction pairs are the positive pairs, repulsion edges the anchor-candidate
negatives. An objective is structurally well-posed iff no repulsion edge joins
two nodes of the same transitively-closed attraction group (equivalently,
every connected component is multipartite with the attraction groups as its
independent sets). The combined objective additionally yields a star forest:
one hub per fused anchor, leaves its candidate fusions.

Nodes are typed tuples: ("person", i), ("scene", j), ("fused", i, k); the
fusion of a person with its own scene is identified with that person's anchor
node, since the fusion map is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ContractViolation
from .objectives import OBJECTIVES, PairWorld, query_scene_pairs, scene_scene_pairs
from .unionfind import UnionFind


@dataclass
class ObjectiveGraph:
    nodes: set = field(default_factory=set)
    attractions: set = field(default_factory=set)  # frozenset pairs (positive relations)
    repulsions: set = field(default_factory=set)  # frozenset pairs (negative-pair edges)

    def check(self):
        for e in self.attractions | self.repulsions:
            if not e <= self.nodes:
                raise ContractViolation(f"edge {sorted(e)} references undeclared nodes")
        overlap = self.attractions & self.repulsions
        if overlap:
            raise ContractViolation(f"pairs both attract and repulse: {sorted(map(sorted, overlap))}")


def _edge(a, b):
    return frozenset((a, b))


def build_objective_graph(objective: str, world: PairWorld) -> ObjectiveGraph:
    """Graph of one objective over a world (one person node per crop)."""
    if objective not in OBJECTIVES:
        raise ContractViolation(f"objective must be one of {OBJECTIVES}")
    g = ObjectiveGraph()
    if objective == "scene_only":
        pairs = scene_scene_pairs(world)
        g.nodes = {("scene", j) for j in range(world.num_scenes)}
        for i, j in pairs.positives:
            g.attractions.add(_edge(("scene", i), ("scene", j)))
            for k in pairs.candidates[(i, j)]:
                if k != j:
                    g.repulsions.add(_edge(("scene", i), ("scene", k)))
    elif objective == "baseline":
        pairs = query_scene_pairs(world)
        g.nodes = {("person", i) for i in range(world.num_persons)}
        g.nodes |= {("scene", j) for j in range(world.num_scenes)}
        for i, j in pairs.positives:
            g.attractions.add(_edge(("person", i), ("scene", j)))
            for k in pairs.candidates[(i, j)]:
                if k != j:
                    g.repulsions.add(_edge(("person", i), ("scene", k)))
    else:  # combined: nodes are fused query-scene embeddings
        pairs = query_scene_pairs(world)

        def node(i, k):
            # the anchor fusion is the person's own-scene fusion
            if k == world.person_scene[i]:
                return ("fused", i, world.person_scene[i])
            return ("fused", i, k)

        for i, j in pairs.positives:
            anchor = node(i, world.person_scene[i])
            g.nodes.add(anchor)
            pos = node(i, j)
            g.nodes.add(pos)
            if pos != anchor:
                g.attractions.add(_edge(anchor, pos))
            for k in pairs.candidates[(i, j)]:
                cand = node(i, k)
                g.nodes.add(cand)
                if k != j and cand != anchor:
                    g.repulsions.add(_edge(anchor, cand))
    g.check()
    return g


def attraction_groups(g: ObjectiveGraph) -> list[set]:
    """Union-find closure over attraction pairs; isolated nodes are singletons."""
    uf = UnionFind(g.nodes)
    for e in g.attractions:
        a, b = tuple(e)
        uf.union(a, b)
    return sorted(uf.groups(), key=lambda grp: (-len(grp), sorted(grp)[0]))


@dataclass
class WellPosedness:
    well_posed: bool
    conflicts: list  # repulsion edges internal to an attraction group


def is_well_posed(g: ObjectiveGraph) -> WellPosedness:
    """Well-posed iff no repulsion edge lies inside one attraction group."""
    uf = UnionFind(g.nodes)
    for e in g.attractions:
        a, b = tuple(e)
        uf.union(a, b)
    conflicts = []
    for e in sorted(g.repulsions, key=lambda e: sorted(e)):
        a, b = tuple(e)
        if uf.find(a) == uf.find(b):
            conflicts.append(e)
    return WellPosedness(well_posed=not conflicts, conflicts=conflicts)


def is_star_forest(g: ObjectiveGraph) -> bool:
    """True iff every connected component (attractions and repulsions alike)
    has a center adjacent to all other nodes and no other adjacencies."""
    adj: dict = {n: set() for n in g.nodes}
    for e in g.attractions | g.repulsions:
        a, b = tuple(e)
        adj[a].add(b)
        adj[b].add(a)
    uf = UnionFind(g.nodes)
    for e in g.attractions | g.repulsions:
        a, b = tuple(e)
        uf.union(a, b)
    for comp in uf.groups():
        if len(comp) <= 2:
            continue
        centers = [n for n in comp if adj[n] == comp - {n}]
        if not centers:
            return False
        if not any(all(adj[n] == {c} for n in comp - {c}) for c in centers):
            return False
    return True


def _node_name(n) -> str:
    return ":".join(str(p) for p in n)


def graph_to_edge_list(g: ObjectiveGraph) -> str:
    """Plain text export: one `name\ttype` line per node, then
    `src\tdst\tkind` lines for attraction/repulsion pairs."""
    lines = [f"{_node_name(n)}\t{n[0]}" for n in sorted(g.nodes)]
    for kind, edges in (("attraction", g.attractions), ("repulsion", g.repulsions)):
        for e in sorted(edges, key=lambda e: sorted(e)):
            a, b = sorted(e)
            lines.append(f"{_node_name(a)}\t{_node_name(b)}\t{kind}")
    return "\n".join(lines) + "\n"
