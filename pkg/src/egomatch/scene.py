"""Scene graphs: object nodes, Delaunay edges and the distance adjacency.

A robot's observation is a set of objects with camera-frame 3D positions and
feature vectors. Edges come from a Delaunay triangulation of the positions
projected onto the ground plane (x, z; the height coordinate is dropped —
street objects are roughly coplanar and the projection keeps the
triangulation deterministic). The adjacency holds full 3D Euclidean
distances on edges and zeros elsewhere.

``build_graph`` reorders nodes into a canonical order (lexicographic by
position, ties by id) and re-numbers ids 0..n-1, so graphs built from
shuffled node lists are identical.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError

_JITTER = 1e-9


@dataclass
class ObjectNode:
    id: int
    position: np.ndarray          # (3,), meters, camera frame
    feature: np.ndarray           # (d_f,)
    class_tag: int | None = None  # synthetic ground truth only

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.feature = np.asarray(self.feature, dtype=np.float64)
        if self.position.shape != (3,):
            raise ShapeError(f"node position must be a 3-vector, got {self.position.shape}")
        if not np.isfinite(self.position).all():
            raise DataError(f"node {self.id} has non-finite position")


@dataclass
class SceneGraph:
    nodes: list
    edges: set                    # unordered index pairs (i, j), i < j
    adjacency: np.ndarray         # (n, n), meters; symmetric, zero diagonal
    positions: np.ndarray = field(default=None)  # (n, 3) cache
    features: np.ndarray = field(default=None)   # (n, d_f) cache

    def __post_init__(self):
        if self.positions is None:
            self.positions = (np.stack([nd.position for nd in self.nodes])
                              if self.nodes else np.zeros((0, 3)))
        if self.features is None:
            self.features = (np.stack([nd.feature for nd in self.nodes])
                             if self.nodes else np.zeros((0, 0)))

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def neighbor_mask(self) -> np.ndarray:
        """(n, n) uint8 mask of attended pairs: Delaunay neighbors plus self."""
        n = self.n
        m = np.eye(n, dtype=np.uint8)
        for i, j in self.edges:
            m[i, j] = 1
            m[j, i] = 1
        return m

    def to_json(self) -> dict:
        return {
            "nodes": [{"id": nd.id, "pos": [float(v) for v in nd.position],
                       "feat": [float(v) for v in nd.feature]}
                      for nd in self.nodes],
            "edges": sorted([list(e) for e in self.edges]),
        }


def canonical_order(nodes) -> list:
    """Permutation sorting nodes lexicographically by (x, y, z), ties by id."""
    def key(i):
        p = nodes[i].position
        return (p[0], p[1], p[2], nodes[i].id)
    return sorted(range(len(nodes)), key=key)


def _collinear_chain(pts: np.ndarray) -> set:
    """Edges between consecutive points along the dominant direction."""
    c = pts - pts.mean(axis=0)
    # principal axis of the (possibly degenerate) point set
    cov = c.T @ c
    w, v = np.linalg.eigh(cov)
    axis = v[:, -1]
    t = c @ axis
    order = np.argsort(t, kind="stable")
    return {tuple(sorted((int(order[k]), int(order[k + 1]))))
            for k in range(len(order) - 1)}


def _jitter_duplicates(pts: np.ndarray) -> np.ndarray:
    """Displace exact duplicate projections by a deterministic ~1e-9 m nudge."""
    seen: dict[tuple, int] = {}
    out = pts.copy()
    for i in range(len(pts)):
        key = (pts[i, 0], pts[i, 1])
        hits = seen.get(key, 0)
        if hits:
            out[i, 0] += _JITTER * (i + 1)
            out[i, 1] += _JITTER * ((i * 31 + hits * 17) % 97 + 1)
        seen[key] = hits + 1
    return out


def _bowyer_watson(pts: np.ndarray) -> set:
    """Delaunay edges of 2-D points in general position (incremental)."""
    n = len(pts)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = max(hi[0] - lo[0], hi[1] - lo[1], 1.0)
    mid = (lo + hi) / 2.0
    # super-triangle well outside the point set
    sv = np.array([
        [mid[0] - 20.0 * span, mid[1] - span],
        [mid[0] + 20.0 * span, mid[1] - span],
        [mid[0], mid[1] + 20.0 * span],
    ])
    P = np.vstack([pts, sv])
    tris = [(n, n + 1, n + 2)]
    for i in range(n):
        p = P[i]
        T = np.asarray(tris)
        a, b, c = P[T[:, 0]], P[T[:, 1]], P[T[:, 2]]
        # signed in-circumcircle determinant, orientation-corrected
        ax, ay = a[:, 0] - p[0], a[:, 1] - p[1]
        bx, by = b[:, 0] - p[0], b[:, 1] - p[1]
        cx, cy = c[:, 0] - p[0], c[:, 1] - p[1]
        det = ((ax * ax + ay * ay) * (bx * cy - by * cx)
               - (bx * bx + by * by) * (ax * cy - ay * cx)
               + (cx * cx + cy * cy) * (ax * by - ay * bx))
        orient = ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                  - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
        bad_idx = np.nonzero(det * orient > 0.0)[0]
        bad = [tris[k] for k in bad_idx]
        if not bad:
            # p is on/outside every circumcircle (should not happen inside
            # the super-triangle); attach to the containing triangle anyway
            bad = [tris[int(np.argmin(np.abs(det)))]]
        edge_count: dict[tuple, int] = {}
        for (u, v, w) in bad:
            for e in ((u, v), (v, w), (w, u)):
                key = (min(e), max(e))
                edge_count[key] = edge_count.get(key, 0) + 1
        boundary = [e for e, cnt in edge_count.items() if cnt == 1]
        keep = set(bad)
        tris = [t for t in tris if t not in keep]
        tris.extend((e[0], e[1], i) for e in boundary)
    edges = set()
    for (u, v, w) in tris:
        for x, y in ((u, v), (v, w), (w, u)):
            if x < n and y < n:
                edges.add((min(x, y), max(x, y)))
    return edges


def delaunay_edges(positions) -> set:
    """Delaunay edge set over the ground-plane projection of 3D positions.

    Degenerate inputs never fail: a single point has no edges, two points
    one edge, collinear sets a nearest-neighbor chain, and duplicate
    projections get a deterministic 1e-9 m jitter before triangulating.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or (pos.shape[1] not in (2, 3)):
        raise ShapeError(f"positions must be (n, 3) or (n, 2), got {pos.shape}")
    if not np.isfinite(pos).all():
        raise DataError("positions must be finite")
    n = len(pos)
    if n <= 1:
        return set()
    if n == 2:
        return {(0, 1)}
    pts = pos[:, [0, 2]] if pos.shape[1] == 3 else pos.copy()
    pts = _jitter_duplicates(pts)
    # collinear when the perpendicular spread (smallest principal axis)
    # vanishes relative to the dominant spread
    c = pts - pts.mean(axis=0)
    w = np.linalg.eigvalsh(c.T @ c / n)
    perp = np.sqrt(max(w[0], 0.0))
    spread = np.sqrt(max(w[1], 0.0))
    if perp <= max(1e-9, 1e-12 * spread):
        return _collinear_chain(pts)
    return _bowyer_watson(pts)


def build_graph(nodes) -> SceneGraph:
    """Canonically ordered scene graph with Delaunay edges and distances.

    Node ids are re-numbered 0..n-1 in canonical order; use
    :func:`canonical_order` on the input list to recover the permutation.
    """
    ids = [nd.id for nd in nodes]
    if len(set(ids)) != len(ids):
        raise DataError("node ids must be unique within a graph")
    if not nodes:
        return SceneGraph(nodes=[], edges=set(), adjacency=np.zeros((0, 0)))
    d_f = len(nodes[0].feature)
    for nd in nodes:
        if len(nd.feature) != d_f:
            raise ShapeError(
                f"inconsistent feature lengths: {len(nd.feature)} vs {d_f}")
    perm = canonical_order(nodes)
    ordered = [ObjectNode(id=k, position=nodes[p].position.copy(),
                          feature=nodes[p].feature.copy(),
                          class_tag=nodes[p].class_tag)
               for k, p in enumerate(perm)]
    pos = np.stack([nd.position for nd in ordered])
    edges = delaunay_edges(pos)
    n = len(ordered)
    adj = np.zeros((n, n))
    for i, j in edges:
        d = float(np.linalg.norm(pos[i] - pos[j]))
        adj[i, j] = d
        adj[j, i] = d
    return SceneGraph(nodes=ordered, edges=edges, adjacency=adj)


def graph_to_json(graph: SceneGraph) -> dict:
    return graph.to_json()


def graph_from_json(obj: dict) -> SceneGraph:
    """Rebuild a graph from the fixture JSON format.

    Edges in the file are trusted when present (fixtures may carry
    hand-crafted edge sets); otherwise they are recomputed from positions.
    """
    try:
        raw = obj["nodes"]
    except (KeyError, TypeError):
        raise DataError("graph JSON must contain a 'nodes' list")
    nodes = []
    for nd in raw:
        try:
            nodes.append(ObjectNode(id=int(nd["id"]),
                                    position=np.asarray(nd["pos"], dtype=np.float64),
                                    feature=np.asarray(nd["feat"], dtype=np.float64)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed graph node: {exc}") from exc
    nodes.sort(key=lambda nd: nd.id)
    if [nd.id for nd in nodes] != list(range(len(nodes))):
        raise DataError("graph JSON node ids must be 0..n-1")
    pos = (np.stack([nd.position for nd in nodes])
           if nodes else np.zeros((0, 3)))
    if "edges" in obj and obj["edges"] is not None:
        edges = {(min(int(i), int(j)), max(int(i), int(j)))
                 for i, j in obj["edges"]}
        for i, j in edges:
            if not (0 <= i < len(nodes) and 0 <= j < len(nodes)):
                raise DataError(f"edge ({i}, {j}) references a missing node")
    else:
        edges = delaunay_edges(pos)
    n = len(nodes)
    adj = np.zeros((n, n))
    for i, j in edges:
        d = float(np.linalg.norm(pos[i] - pos[j]))
        adj[i, j] = d
        adj[j, i] = d
    return SceneGraph(nodes=nodes, edges=edges, adjacency=adj)


def dumps_graph(graph: SceneGraph) -> str:
    return json.dumps(graph_to_json(graph), separators=(",", ":"))


def loads_graph(text: str) -> SceneGraph:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid graph JSON: {exc}") from exc
    return graph_from_json(obj)
