"""Isosurface extraction and indicator-driven mesh trimming.

Marching cubes polygonizes the zero level set of a scalar field on a regular
grid, welding vertices on shared cell edges so the result has a watertight
edge structure on benign shapes. Trimming builds a source/sink graph over
triangles (unary links by indicator score, smoothness links between
neighbors) and removes everything on the sink side of a min cut.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE


@dataclass
class TriangleMesh:
    vertices: np.ndarray                       # (V, 3) float64
    triangles: np.ndarray                      # (T, 3) int64
    vertex_attrs: dict = field(default_factory=dict)  # name -> (V,) arrays

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def triangle_areas(self):
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def edge_counts(self):
        """Map undirected edge -> number of incident triangles."""
        tri = self.triangles
        edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        return uniq, counts


def marching_cubes(field_fn, bbox, resolution=128, slab_points=200_000):
    """Extract the zero level set of field_fn over bbox.

    field_fn maps (m, 3) points to (m,) values; resolution counts grid points
    per axis (so cells are resolution-1 per axis). Vertices interpolate
    linearly along sign-changing cell edges and are shared between cells. A
    field with no sign change anywhere yields an empty mesh.
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    res = int(resolution)
    axes = [np.linspace(bbox.lo[a], bbox.hi[a], res) for a in range(3)]
    grid_xyz = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    pts = grid_xyz.reshape(-1, 3)
    values = np.empty(len(pts))
    for start in range(0, len(pts), slab_points):
        stop = min(start + slab_points, len(pts))
        values[start:stop] = field_fn(pts[start:stop])
    values = values.reshape(res, res, res)

    inside = values < 0.0
    cube_index = np.zeros((res - 1, res - 1, res - 1), dtype=np.int32)
    for bit, (di, dj, dk) in enumerate(CORNER_OFFSETS):
        cube_index |= (inside[di:res - 1 + di, dj:res - 1 + dj, dk:res - 1 + dk]
                       .astype(np.int32) << bit)
    edge_lut = np.asarray(EDGE_TABLE, dtype=np.int32)
    active = np.flatnonzero(edge_lut[cube_index.reshape(-1)])
    if active.size == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    ci, cj, ck = np.unravel_index(active, cube_index.shape)
    case = cube_index.reshape(-1)[active]

    # global edge id: start grid point index * 3 + axis of the edge
    def grid_id(i, j, k):
        return (i * res + j) * res + k

    edge_axis = np.empty(12, dtype=np.int64)
    edge_origin = np.empty((12, 3), dtype=np.int64)
    for e, (c0, c1) in enumerate(EDGE_CORNERS):
        o0 = np.array(CORNER_OFFSETS[c0])
        o1 = np.array(CORNER_OFFSETS[c1])
        lo = np.minimum(o0, o1)
        axis = int(np.flatnonzero(o0 != o1)[0])
        edge_axis[e] = axis
        edge_origin[e] = lo

    # (n_active, 12) global edge ids for every cell
    cell_edge_gid = np.empty((active.size, 12), dtype=np.int64)
    for e in range(12):
        oi, oj, ok = edge_origin[e]
        cell_edge_gid[:, e] = grid_id(ci + oi, cj + oj, ck + ok) * 3 + edge_axis[e]

    crossed = (edge_lut[case][:, None] >> np.arange(12)[None, :]) & 1
    used_gids = cell_edge_gid[crossed.astype(bool)]
    uniq_gids = np.unique(used_gids)

    # interpolate one vertex per unique crossed edge
    gid_axis = uniq_gids % 3
    gpt = uniq_gids // 3
    gi = gpt // (res * res)
    gj = (gpt // res) % res
    gk = gpt % res
    p0 = np.stack([axes[0][gi], axes[1][gj], axes[2][gk]], axis=-1)
    v0 = values[gi, gj, gk]
    gi2, gj2, gk2 = gi.copy(), gj.copy(), gk.copy()
    gi2[gid_axis == 0] += 1
    gj2[gid_axis == 1] += 1
    gk2[gid_axis == 2] += 1
    p1 = np.stack([axes[0][gi2], axes[1][gj2], axes[2][gk2]], axis=-1)
    v1 = values[gi2, gj2, gk2]
    denom = v1 - v0
    t = np.where(np.abs(denom) > 1e-300, -v0 / np.where(denom == 0, 1.0, denom), 0.5)
    t = np.clip(t, 0.0, 1.0)
    verts = p0 + t[:, None] * (p1 - p0)

    # map (cell, local edge) -> vertex index, then emit per-case triangles
    vert_of = np.searchsorted(uniq_gids, cell_edge_gid)
    tris = []
    for c in np.unique(case):
        rows = np.flatnonzero(case == c)
        pattern = np.asarray(TRI_TABLE[c], dtype=np.int64).reshape(-1, 3)
        for a, b, d in pattern:
            tris.append(np.stack([vert_of[rows, a], vert_of[rows, d],
                                  vert_of[rows, b]], axis=-1))
    triangles = np.concatenate(tris, axis=0) if tris else np.zeros((0, 3), np.int64)
    mesh = TriangleMesh(vertices=verts, triangles=triangles)
    return remove_degenerate(mesh)


def remove_degenerate(mesh, area_eps=None):
    """Drop triangles with repeated vertices or negligible area."""
    if mesh.n_triangles == 0:
        return mesh
    if area_eps is None:
        scale = np.abs(mesh.vertices).max() if mesh.n_vertices else 1.0
        area_eps = 1e-14 * max(scale, 1.0) ** 2
    tri = mesh.triangles
    distinct = ((tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2])
                & (tri[:, 0] != tri[:, 2]))
    keep = distinct & (mesh.triangle_areas() > area_eps)
    return TriangleMesh(vertices=mesh.vertices, triangles=tri[keep],
                        vertex_attrs=dict(mesh.vertex_attrs))


def score_triangles(mesh, vertex_scores):
    """Per-triangle score = mean of its three vertex scores."""
    s = np.asarray(vertex_scores, dtype=np.float64)
    return s[mesh.triangles].mean(axis=1)


def triangle_adjacency(mesh):
    """Pairs (i, j) of triangles sharing an edge, i < j."""
    tri = mesh.triangles
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    owner = np.tile(np.arange(len(tri)), 3)
    edges = np.sort(edges, axis=1)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges, owner = edges[order], owner[order]
    same = np.all(edges[1:] == edges[:-1], axis=1)
    pairs = np.stack([owner[:-1][same], owner[1:][same]], axis=-1)
    pairs = np.sort(pairs, axis=1)
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(pairs, axis=0)


@dataclass
class TrimGraph:
    """s-t graph over triangles: unary links to source/sink by score,
    smoothness links between adjacent triangles."""

    n_triangles: int
    source_linked: np.ndarray    # (T,) bool: linked to s (score > threshold)
    unary_w: float
    adjacency: np.ndarray        # (E, 2) triangle pairs
    smooth_w: float

    @property
    def source(self):
        return self.n_triangles

    @property
    def sink(self):
        return self.n_triangles + 1


def build_trim_graph(mesh, scores, t_trim=0.94, unary_w=1.0, smooth_w=10.0):
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != mesh.n_triangles:
        raise ValueError("one score per triangle required")
    return TrimGraph(n_triangles=mesh.n_triangles,
                     source_linked=scores > t_trim, unary_w=unary_w,
                     adjacency=triangle_adjacency(mesh), smooth_w=smooth_w)


def min_cut(graph, weight_scale=1000):
    """Exact min s-t cut; returns (keep mask, cut cost).

    Weights are scaled to integers (x1000, rounded) for the max-flow solver;
    the reported cost is in original units. Triangles reachable from the
    source in the residual network are kept.
    """
    n = graph.n_triangles
    s, t = graph.source, graph.sink
    rows, cols, caps = [], [], []
    unary = int(round(graph.unary_w * weight_scale))
    smooth = int(round(graph.smooth_w * weight_scale))
    for i in range(n):
        if graph.source_linked[i]:
            rows.append(s), cols.append(i), caps.append(unary)
        else:
            rows.append(i), cols.append(t), caps.append(unary)
    for a, b in graph.adjacency:
        if smooth > 0:
            rows.extend([a, b]), cols.extend([b, a]), caps.extend([smooth, smooth])
    mat = csr_matrix((np.asarray(caps, dtype=np.int64),
                      (np.asarray(rows), np.asarray(cols))), shape=(n + 2, n + 2))
    if mat.nnz == 0 or not graph.source_linked.any():
        return graph.source_linked.copy(), 0.0
    if graph.source_linked.all() and len(graph.adjacency) == 0:
        return np.ones(n, dtype=bool), 0.0
    result = maximum_flow(mat.astype(np.int32), s, t)
    # antisymmetric flow matrix: cap - flow also exposes reverse residuals
    residual = (mat - result.flow).tocsr()
    # BFS from s over positive residual capacity
    reach = np.zeros(n + 2, dtype=bool)
    reach[s] = True
    frontier = [s]
    indptr, indices, data = residual.indptr, residual.indices, residual.data
    while frontier:
        nxt = []
        for u in frontier:
            for pos in range(indptr[u], indptr[u + 1]):
                v = indices[pos]
                if data[pos] > 0 and not reach[v]:
                    reach[v] = True
                    nxt.append(v)
        frontier = nxt
    keep = reach[:n]
    return keep, result.flow_value / weight_scale


def graph_cut_trim(mesh, scores, t_trim=0.94, unary_w=1.0, smooth_w=10.0):
    """Remove sink-side triangles of the min cut; vertices are kept
    (unreferenced ones are pruned) and attrs carried over."""
    if mesh.n_triangles == 0:
        return mesh
    graph = build_trim_graph(mesh, scores, t_trim, unary_w, smooth_w)
    keep, _ = min_cut(graph)
    return _subset(mesh, keep)


def _subset(mesh, keep):
    tri = mesh.triangles[keep]
    used = np.unique(tri)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    attrs = {k: np.asarray(v)[used] for k, v in mesh.vertex_attrs.items()}
    return TriangleMesh(vertices=mesh.vertices[used], triangles=remap[tri],
                        vertex_attrs=attrs)


# ---------------------------------------------------------------------------
# mesh files

def save_mesh(path, mesh, file_format=None):
    """Write binary little-endian PLY or ASCII OBJ (chosen by extension
    unless file_format forces one)."""
    path = str(path)
    fmt = file_format or ("obj" if path.lower().endswith(".obj") else "ply")
    if fmt == "ply":
        _save_ply(path, mesh)
    elif fmt == "obj":
        _save_obj(path, mesh)
    else:
        raise ValueError(f"unknown mesh format {fmt!r}")


def load_mesh(path):
    path = str(path)
    if path.lower().endswith(".obj"):
        return _load_obj(path)
    return _load_ply(path)


def _save_ply(path, mesh):
    has_quality = "indicator" in mesh.vertex_attrs
    with open(path, "wb") as fh:
        lines = ["ply", "format binary_little_endian 1.0",
                 f"element vertex {mesh.n_vertices}",
                 "property float x", "property float y", "property float z"]
        if has_quality:
            lines.append("property float quality")
        lines += [f"element face {mesh.n_triangles}",
                  "property list uchar int vertex_indices", "end_header"]
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        if has_quality:
            vdata = np.concatenate(
                [mesh.vertices,
                 np.asarray(mesh.vertex_attrs["indicator"]).reshape(-1, 1)],
                axis=-1).astype("<f4")
        else:
            vdata = mesh.vertices.astype("<f4")
        fh.write(vdata.tobytes())
        if mesh.n_triangles:
            face = np.empty(mesh.n_triangles,
                            dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            face["n"] = 3
            face["idx"] = mesh.triangles
            fh.write(face.tobytes())


def _load_ply(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError("not a PLY file")
        n_vert = n_face = 0
        vprops = []
        element = None
        while True:
            line = fh.readline().strip()
            if line == b"end_header":
                break
            parts = line.split()
            if parts[0] == b"format" and parts[1] != b"binary_little_endian":
                raise ValueError("only binary little-endian PLY is supported")
            if parts[0] == b"element":
                element = parts[1]
                if element == b"vertex":
                    n_vert = int(parts[2])
                elif element == b"face":
                    n_face = int(parts[2])
            elif parts[0] == b"property" and element == b"vertex":
                vprops.append(parts[2].decode())
        vdata = np.frombuffer(fh.read(4 * len(vprops) * n_vert),
                              dtype="<f4").reshape(n_vert, len(vprops))
        face = np.frombuffer(fh.read(n_face * (1 + 12)),
                             dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    attrs = {}
    if "quality" in vprops:
        attrs["indicator"] = vdata[:, vprops.index("quality")].astype(np.float64)
    xyz = vdata[:, [vprops.index("x"), vprops.index("y"), vprops.index("z")]]
    return TriangleMesh(vertices=xyz.astype(np.float64),
                        triangles=face["idx"].astype(np.int64),
                        vertex_attrs=attrs)


def _save_obj(path, mesh):
    with open(path, "w", encoding="ascii") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for tri in mesh.triangles:
            fh.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def _load_obj(path):
    verts, tris = [], []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriangleMesh(vertices=np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                        triangles=np.asarray(tris, dtype=np.int64).reshape(-1, 3))
