"""Reference computation of the expected forwarding tree.

Given the full topology (node capabilities, identity keys, symmetric link
costs) this derives, by global shortest-path search, the tree a healthy
mesh must converge to.  It is intentionally written against plain graph
primitives and shares no code with the distributed engine, so the two can
check each other.

Rules mirrored here:
- root = node with the highest capability, ties to the lowest identity;
- every other node attaches to the neighbour minimizing
  (distance-to-root via that neighbour, then highest neighbour
  capability, then lowest neighbour identity), where distance is the sum
  of link costs along shortest paths.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Hashable

NodeId = Hashable


@dataclass(frozen=True)
class OracleTree:
    root: NodeId
    parent: dict  # node -> parent node (root absent)
    dist: dict    # node -> distance from root

    def edges(self) -> set[frozenset]:
        return {frozenset((child, parent)) for child, parent in self.parent.items()}


def elect_root(capabilities: dict, keys: dict) -> NodeId:
    """Highest capability wins; ties go to the lowest identity key."""
    return min(capabilities, key=lambda n: (-capabilities[n], keys[n]))


def expected_tree(capabilities: dict, keys: dict,
                  links: dict[frozenset, int]) -> OracleTree:
    """Compute the expected tree for a connected topology.

    ``links`` maps frozenset({a, b}) to a symmetric cost.  Raises
    ValueError when the graph does not connect every node.
    """
    nodes = list(capabilities)
    adjacency: dict[NodeId, list[tuple[NodeId, int]]] = {n: [] for n in nodes}
    for pair, cost in links.items():
        a, b = tuple(pair)
        adjacency[a].append((b, cost))
        adjacency[b].append((a, cost))

    root = elect_root(capabilities, keys)

    dist: dict[NodeId, int] = {root: 0}
    heap: list[tuple[int, tuple, NodeId]] = [(0, keys[root], root)]
    seen: set[NodeId] = set()
    while heap:
        d, _, node = heapq.heappop(heap)
        if node in seen:
            continue
        seen.add(node)
        for neighbour, cost in adjacency[node]:
            candidate = d + cost
            if neighbour not in dist or candidate < dist[neighbour]:
                dist[neighbour] = candidate
                heapq.heappush(heap, (candidate, keys[neighbour], neighbour))

    if len(dist) != len(nodes):
        missing = [n for n in nodes if n not in dist]
        raise ValueError(f"graph is not connected; unreachable: {missing}")

    parent: dict[NodeId, NodeId] = {}
    for node in nodes:
        if node == root:
            continue
        choices = [
            (dist[neighbour] + cost, -capabilities[neighbour], keys[neighbour], neighbour)
            for neighbour, cost in adjacency[node]
        ]
        parent[node] = min(choices)[3]
    return OracleTree(root=root, parent=parent, dist=dist)
