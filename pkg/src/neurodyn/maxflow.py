"""Max-flow / min-cut on small graphs via shortest augmenting paths.

Edmonds-Karp with adjacency lists scanned in insertion order, so every
run of the same construction sequence yields the same flow and the same
canonical min cut (the residual-reachable source side). Exact for the
alpha-expansion constructions used by the parcellation module.
"""

from collections import deque

import numpy as np

RESIDUAL_EPS = 1e-12


class FlowNetwork:
    """Directed flow network with paired residual edges."""

    def __init__(self, n_nodes: int):
        self.n_nodes = n_nodes
        self.adj = [[] for _ in range(n_nodes)]
        self.to = []
        self.cap = []

    def add_edge(self, u: int, v: int, cap_uv: float, cap_vu: float = 0.0):
        """Insert the edge pair (u->v, v->u); either capacity may be zero."""
        self.adj[u].append(len(self.to))
        self.to.append(v)
        self.cap.append(float(cap_uv))
        self.adj[v].append(len(self.to))
        self.to.append(u)
        self.cap.append(float(cap_vu))

    def _bfs(self, source: int, sink: int, parent_edge):
        parent_edge[:] = -1
        parent_edge[source] = -2
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for eid in self.adj[u]:
                v = self.to[eid]
                if parent_edge[v] == -1 and self.cap[eid] > RESIDUAL_EPS:
                    parent_edge[v] = eid
                    if v == sink:
                        return True
                    queue.append(v)
        return False

    def max_flow(self, source: int, sink: int) -> float:
        total = 0.0
        parent_edge = np.full(self.n_nodes, -1, dtype=np.int64)
        while self._bfs(source, sink, parent_edge):
            # bottleneck along the path, then push
            bottleneck = np.inf
            v = sink
            while v != source:
                eid = parent_edge[v]
                bottleneck = min(bottleneck, self.cap[eid])
                v = self.to[eid ^ 1]
            v = sink
            while v != source:
                eid = parent_edge[v]
                self.cap[eid] -= bottleneck
                self.cap[eid ^ 1] += bottleneck
                v = self.to[eid ^ 1]
            total += bottleneck
        return total

    def source_side(self, source: int) -> np.ndarray:
        """Nodes residual-reachable from the source after max_flow."""
        seen = np.zeros(self.n_nodes, dtype=bool)
        seen[source] = True
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for eid in self.adj[u]:
                v = self.to[eid]
                if not seen[v] and self.cap[eid] > RESIDUAL_EPS:
                    seen[v] = True
                    queue.append(v)
        return seen
