"""Communication graphs over which the epidemic protocols run.

Graphs are undirected and immutable. Removing a node tombstones it: the
remaining node ids never change, so a fault injected mid-run does not
renumber anybody.
"""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field, replace

import networkx as nx

from p2p_microgrid.errors import (
    EpsilonOutOfRangeError,
    InvalidNodeError,
    LastNodeError,
    SelfLoopError,
)
from p2p_microgrid.rng import SeededRNG

NodeId = int
Edge = tuple[NodeId, NodeId]


def normalize_edge(i: NodeId, j: NodeId) -> Edge:
    """Return the unordered pair {i, j} in canonical (low, high) order."""
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class CommGraph:
    """Undirected communication topology with consensus weight epsilon."""

    node_count: int
    edges: frozenset[Edge]
    epsilon: float
    removed: frozenset[NodeId] = field(default_factory=frozenset)

    def live_nodes(self) -> list[NodeId]:
        """Live node ids in ascending order."""
        return [i for i in range(self.node_count) if i not in self.removed]

    def is_live(self, i: NodeId) -> bool:
        return 0 <= i < self.node_count and i not in self.removed

    def has_edge(self, i: NodeId, j: NodeId) -> bool:
        return normalize_edge(i, j) in self.edges

    def a(self, i: NodeId, j: NodeId) -> int:
        """Adjacency entry a_ij (1 when linked, 0 otherwise)."""
        return 1 if i != j and self.has_edge(i, j) else 0


def _check_node(graph: CommGraph, i: NodeId) -> None:
    if not 0 <= i < graph.node_count:
        raise InvalidNodeError(i, f"graph has {graph.node_count} nodes")
    if i in graph.removed:
        raise InvalidNodeError(i, "node has been removed")


def _degrees(node_count: int, edges: Iterable[Edge]) -> list[int]:
    degrees = [0] * node_count
    for i, j in edges:
        degrees[i] += 1
        degrees[j] += 1
    return degrees


def build_graph(
    node_count: int, edge_list: Iterable[Edge], epsilon: float | None = None
) -> CommGraph:
    """Build a symmetric graph, picking the default epsilon when none is given."""
    if node_count < 1:
        raise ValueError(f"node_count must be >= 1, got {node_count}")

    edges: set[Edge] = set()
    for i, j in edge_list:
        for node in (i, j):
            if not 0 <= node < node_count:
                raise InvalidNodeError(node, f"graph has {node_count} nodes")
        if i == j:
            raise SelfLoopError(i)
        edges.add(normalize_edge(i, j))

    graph = CommGraph(node_count=node_count, edges=frozenset(edges), epsilon=1.0)
    if epsilon is None:
        return replace(graph, epsilon=default_epsilon(graph))
    max_deg = max_degree(graph)
    if epsilon <= 0 or (max_deg >= 1 and epsilon >= 1.0 / max_deg):
        raise EpsilonOutOfRangeError(epsilon, max_deg)
    return replace(graph, epsilon=epsilon)


def neighbors(graph: CommGraph, i: NodeId) -> set[NodeId]:
    """N_i = {j : a_ij = 1}."""
    _check_node(graph, i)
    result: set[NodeId] = set()
    for a, b in graph.edges:
        if a == i:
            result.add(b)
        elif b == i:
            result.add(a)
    return result


def adjacency_lists(graph: CommGraph) -> dict[NodeId, list[NodeId]]:
    """Sorted neighbour list of every live node."""
    lists: dict[NodeId, list[NodeId]] = {i: [] for i in graph.live_nodes()}
    for i, j in graph.edges:
        lists[i].append(j)
        lists[j].append(i)
    for peers in lists.values():
        peers.sort()
    return lists


def max_degree(graph: CommGraph) -> int:
    """Largest neighbour count over live nodes; 0 for a singleton."""
    return max(_degrees(graph.node_count, graph.edges), default=0)


def default_epsilon(graph: CommGraph) -> float:
    """1/(max_degree + 1), or 1.0 when no node has a neighbour."""
    deg = max_degree(graph)
    return 1.0 if deg == 0 else 1.0 / (deg + 1)


def to_networkx(graph: CommGraph) -> nx.Graph:
    """Live part of the graph as a networkx Graph."""
    g = nx.Graph()
    g.add_nodes_from(graph.live_nodes())
    g.add_edges_from(graph.edges)
    return g


def is_connected(graph: CommGraph) -> bool:
    """True iff every live node is reachable from the lowest live node."""
    live = graph.live_nodes()
    if len(live) <= 1:
        return True
    return bool(nx.is_connected(to_networkx(graph)))


def remove_node(graph: CommGraph, i: NodeId) -> CommGraph:
    """Tombstone node i and drop its incident edges."""
    _check_node(graph, i)
    if len(graph.live_nodes()) < 2:
        raise LastNodeError(i)
    edges = frozenset(e for e in graph.edges if i not in e)
    return CommGraph(
        node_count=graph.node_count,
        edges=edges,
        epsilon=graph.epsilon,
        removed=graph.removed | {i},
    )


def remove_edge(graph: CommGraph, i: NodeId, j: NodeId) -> CommGraph:
    """Drop the link {i, j} in both directions."""
    _check_node(graph, i)
    _check_node(graph, j)
    edge = normalize_edge(i, j)
    if edge not in graph.edges:
        raise InvalidNodeError(j, f"no link between {i} and {j}")
    return CommGraph(
        node_count=graph.node_count,
        edges=graph.edges - {edge},
        epsilon=graph.epsilon,
        removed=graph.removed,
    )


def subgraph(
    base: CommGraph,
    removed_nodes: Iterable[NodeId] = (),
    removed_edges: Iterable[Edge] = (),
) -> CommGraph:
    """Derive the active graph from a base graph and sets of failures.

    Only base edges can reappear, so the base epsilon stays within bound.
    """
    dead = frozenset(removed_nodes) | base.removed
    cut = {normalize_edge(i, j) for i, j in removed_edges}
    edges = frozenset(
        e for e in base.edges if e not in cut and e[0] not in dead and e[1] not in dead
    )
    return CommGraph(node_count=base.node_count, edges=edges, epsilon=base.epsilon, removed=dead)


def restrict_edges(graph: CommGraph, delivered: Iterable[Edge]) -> CommGraph:
    """Keep only the links whose messages were delivered this round."""
    keep = {normalize_edge(i, j) for i, j in delivered}
    return CommGraph(
        node_count=graph.node_count,
        edges=frozenset(e for e in graph.edges if e in keep),
        epsilon=graph.epsilon,
        removed=graph.removed,
    )


def path_graph(n: int, epsilon: float | None = None) -> CommGraph:
    return build_graph(n, [(i, i + 1) for i in range(n - 1)], epsilon)


def ring_graph(n: int, epsilon: float | None = None) -> CommGraph:
    if n < 3:
        return path_graph(n, epsilon)
    return build_graph(n, [(i, (i + 1) % n) for i in range(n)], epsilon)


def complete_graph(n: int, epsilon: float | None = None) -> CommGraph:
    return build_graph(n, [(i, j) for i in range(n) for j in range(i + 1, n)], epsilon)


def random_connected_graph(
    n: int, p: float, rng: SeededRNG, epsilon: float | None = None
) -> CommGraph:
    """Erdos-Renyi graph, with components chained together until connected."""
    g = nx.gnp_random_graph(n, p, seed=rng.randint(0, 2**31 - 1))
    components = [sorted(c) for c in nx.connected_components(g)]
    components.sort(key=lambda c: c[0])
    for prev, comp in zip(components, components[1:], strict=False):
        g.add_edge(rng.choice(prev), rng.choice(comp))
    return build_graph(n, [(int(i), int(j)) for i, j in g.edges()], epsilon)
