"""Tetrahedral meshes and the surface/graph services built on top of them.

A :class:`TetMesh` is the fixed discretization shared by every other module.
It is immutable after construction: arrays are flagged read-only and derived
quantities (surface triangles, normals, adjacency) are computed once.
"""
from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

# local faces of a positively oriented tet, each wound outward
_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


class MeshError(ValueError):
    """Raised for malformed mesh files or invalid mesh data."""


def _signed_volumes(nodes, tets):
    p = nodes[tets]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class TetMesh:
    """Linear tetrahedral mesh with derived boundary topology.

    Parameters
    ----------
    nodes : (n, 3) array_like
        Node coordinates (mm).
    tets : (m, 4) array_like of int
        Zero-based node indices. Negatively oriented tets are reordered so that
        every element has positive signed volume.
    """

    def __init__(self, nodes, tets):
        nodes = np.asarray(nodes, dtype=float)
        tets = np.array(tets, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 3:
            raise MeshError("nodes must have shape (n, 3)")
        if tets.ndim != 2 or tets.shape[1] != 4:
            raise MeshError("tets must have shape (m, 4)")
        n = len(nodes)
        if tets.size and (tets.min() < 0 or tets.max() >= n):
            bad = int(np.nonzero((tets < 0).any(1) | (tets >= n).any(1))[0][0])
            raise MeshError(f"tet {bad} references a node index outside [0, {n})")
        vol = _signed_volumes(nodes, tets)
        scale = np.ptp(nodes, axis=0).max() if n else 1.0
        degenerate = np.abs(vol) <= 1e-14 * scale**3
        if degenerate.any():
            raise MeshError(f"tet {int(np.nonzero(degenerate)[0][0])} has zero volume")
        flip = vol < 0
        tets[flip] = tets[flip][:, [0, 2, 1, 3]]
        self.nodes = _readonly(nodes)
        self.tets = _readonly(tets)
        self.tet_volumes = _readonly(np.abs(vol))
        self._build_faces()

    def _build_faces(self):
        m = len(self.tets)
        faces = self.tets[:, _TET_FACES].reshape(-1, 3)
        key = np.sort(faces, axis=1)
        _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.ravel()
        owner = np.repeat(np.arange(m), 4)
        boundary = counts[inverse] == 1
        if (counts > 2).any():
            raise MeshError("non-manifold mesh: a face is shared by more than two tets")
        self.surface_tris = _readonly(faces[boundary])
        self.surface_tri_owner = _readonly(owner[boundary])
        # interior faces pair two elements
        interior = np.nonzero(~boundary)[0]
        order = interior[np.argsort(inverse[interior], kind="stable")]
        pairs = owner[order].reshape(-1, 2)
        self.element_pairs = _readonly(np.sort(pairs, axis=1))
        self.surface_nodes = _readonly(np.unique(self.surface_tris))
        local = np.full(len(self.nodes), -1, dtype=np.int64)
        local[self.surface_nodes] = np.arange(len(self.surface_nodes))
        self.surface_index = _readonly(local)

    # -- sizes ---------------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.tets)

    @property
    def n_surface(self) -> int:
        return len(self.surface_nodes)

    # -- derived geometry ----------------------------------------------------
    @cached_property
    def centroids(self):
        return _readonly(self.nodes[self.tets].mean(axis=1))

    @cached_property
    def tri_normals(self):
        """Outward unit normals of the surface triangles."""
        p = self.nodes[self.surface_tris]
        nrm = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return _readonly(nrm / np.linalg.norm(nrm, axis=1, keepdims=True))

    @cached_property
    def tri_areas(self):
        p = self.nodes[self.surface_tris]
        return _readonly(0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1))

    @cached_property
    def node_normals(self):
        """Area-weighted outward unit normals, one row per surface node."""
        p = self.nodes[self.surface_tris]
        weighted = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        acc = np.zeros((self.n_surface, 3))
        loc = self.surface_index[self.surface_tris]
        for k in range(3):
            np.add.at(acc, loc[:, k], weighted)
        return _readonly(acc / np.linalg.norm(acc, axis=1, keepdims=True))

    @cached_property
    def surface_edges(self):
        """Unique undirected surface edges as sorted global node pairs."""
        t = self.surface_tris
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return _readonly(np.unique(np.sort(e, axis=1), axis=0))

    @cached_property
    def node_tris(self):
        """Sparse (n, n_tris) incidence of nodes in surface triangles."""
        t = self.surface_tris
        rows = t.ravel()
        cols = np.repeat(np.arange(len(t)), 3)
        return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n_nodes, len(t)))

    @cached_property
    def tri_neighbors(self):
        """Sparse (n_tris, n_tris) pattern of surface triangles sharing a node."""
        inc = self.node_tris.tocsc()
        return (inc.T @ inc).tocsr()

    @cached_property
    def node_elements(self):
        """Sparse (n, m) incidence of nodes in tets."""
        rows = self.tets.ravel()
        cols = np.repeat(np.arange(self.n_elements), 4)
        return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n_nodes, self.n_elements))

    @cached_property
    def surface_graph(self):
        """Surface-edge graph on surface-local indices, weighted by edge length."""
        e = self.surface_edges
        w = np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1)
        li = self.surface_index[e]
        s = self.n_surface
        g = sparse.coo_matrix((w, (li[:, 0], li[:, 1])), shape=(s, s))
        return (g + g.T).tocsr()

    @cached_property
    def node_kdtree(self):
        return cKDTree(self.nodes)

    @cached_property
    def max_edge_length(self) -> float:
        e = self.surface_edges
        return float(np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1).max())

    @property
    def mean_edge_length(self) -> float:
        e = self.surface_edges
        return float(np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1).mean())

    @property
    def total_volume(self) -> float:
        return float(self.tet_volumes.sum())

    def surface_volume(self) -> float:
        """Enclosed volume from the surface triangles (divergence theorem)."""
        p = self.nodes[self.surface_tris]
        return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)

    @cached_property
    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.nodes, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.tets, dtype="<i8").tobytes())
        return h.hexdigest()[:16]

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(np.ptp(self.nodes, axis=0)))

    def __repr__(self):
        return f"TetMesh(n={self.n_nodes}, m={self.n_elements}, s={self.n_surface})"


# -- file IO -----------------------------------------------------------------

def _data_lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def _parse_table(path, ncols, kind):
    lines = _data_lines(path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise MeshError(f"{path}: empty file") from None
    try:
        count = int(header[0])
    except ValueError:
        raise MeshError(f"{path}:{lineno}: cannot parse {kind} count {header[0]!r}") from None
    ids, rows, linenos = [], [], []
    for lineno, tok in lines:
        if len(rows) == count:
            break
        if len(tok) < ncols + 1:
            raise MeshError(f"{path}:{lineno}: expected at least {ncols + 1} columns")
        try:
            ids.append(int(tok[0]))
            rows.append([float(t) for t in tok[1:ncols + 1]])
        except ValueError:
            raise MeshError(f"{path}:{lineno}: non-numeric {kind} entry") from None
        linenos.append(lineno)
    if len(rows) != count:
        raise MeshError(f"{path}: header declares {count} {kind}s, found {len(rows)}")
    return np.array(ids), np.array(rows), linenos


def load_tet_mesh(node_file, ele_file) -> TetMesh:
    """Read a TetGen-style ``.node``/``.ele`` pair.

    Index base (0 or 1) is taken from the first node index. Errors carry the
    offending file and line number.
    """
    ids, xyz, _ = _parse_table(node_file, 3, "node")
    base = int(ids[0]) if len(ids) else 0
    if base not in (0, 1):
        raise MeshError(f"{node_file}: first node index must be 0 or 1, got {base}")
    _, conn, linenos = _parse_table(ele_file, 4, "element")
    if conn.size and not np.all(conn == np.round(conn)):
        raise MeshError(f"{ele_file}: non-integer node index")
    tets = conn.astype(np.int64) - base
    n = len(xyz)
    bad = np.nonzero((tets < 0).any(1) | (tets >= n).any(1))[0]
    if len(bad):
        raise MeshError(f"{ele_file}:{linenos[bad[0]]}: node index out of range for a {n}-node mesh")
    vol = _signed_volumes(xyz, tets)
    scale = np.ptp(xyz, axis=0).max()
    zero = np.nonzero(np.abs(vol) <= 1e-14 * scale**3)[0]
    if len(zero):
        raise MeshError(f"{ele_file}:{linenos[zero[0]]}: zero-volume tetrahedron")
    return TetMesh(xyz, tets)


def write_tet_mesh(mesh: TetMesh, stem) -> tuple[Path, Path]:
    """Write ``stem.node`` and ``stem.ele`` with 1-based indices."""
    stem = Path(stem)
    node_file, ele_file = stem.with_suffix(".node"), stem.with_suffix(".ele")
    with open(node_file, "w") as fh:
        fh.write(f"{mesh.n_nodes} 3 0 0\n")
        for i, (x, y, z) in enumerate(mesh.nodes, start=1):
            fh.write(f"{i} {x:.17g} {y:.17g} {z:.17g}\n")
    with open(ele_file, "w") as fh:
        fh.write(f"{mesh.n_elements} 4 0\n")
        for i, t in enumerate(mesh.tets + 1, start=1):
            fh.write(f"{i} {t[0]} {t[1]} {t[2]} {t[3]}\n")
    return node_file, ele_file


# -- regions -------------------------------------------------------------------

@dataclass
class RegionSpec:
    """Boundary conditions and design regions of a problem."""

    fixed_nodes: np.ndarray
    contact_nodes: np.ndarray
    shell_elements: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    shell_thickness: float = 0.0

    def __post_init__(self):
        self.fixed_nodes = np.unique(np.asarray(self.fixed_nodes, dtype=np.int64))
        self.contact_nodes = np.unique(np.asarray(self.contact_nodes, dtype=np.int64))
        self.shell_elements = np.unique(np.asarray(self.shell_elements, dtype=np.int64))

    def validate(self, mesh: TetMesh):
        if len(self.fixed_nodes) < 3:
            raise MeshError("at least three fixed nodes are required")
        x = mesh.nodes[self.fixed_nodes]
        if np.linalg.matrix_rank(x - x.mean(0), tol=1e-9 * mesh.diameter) < 2:
            raise MeshError("fixed nodes are collinear")
        if len(np.intersect1d(self.contact_nodes, self.fixed_nodes)):
            raise MeshError("contact and fixed node sets overlap")
        if len(self.contact_nodes) == 0:
            raise MeshError("contact region is empty")
        if (mesh.surface_index[self.contact_nodes] < 0).any():
            raise MeshError("contact nodes must lie on the surface")
        if self.shell_thickness > 0 and len(self.shell_elements) == 0:
            raise MeshError("shell thickness is positive but no shell elements are tagged")
        return self


def select_nodes(mesh: TetMesh, predicate, surface_only=True):
    """Indices of (surface) nodes whose coordinates satisfy ``predicate(x, y, z)``."""
    idx = mesh.surface_nodes if surface_only else np.arange(mesh.n_nodes)
    x, y, z = mesh.nodes[idx].T
    return idx[np.asarray(predicate(x, y, z), dtype=bool)]


# -- shell -------------------------------------------------------------------

def _point_triangle_distance(p, a, b, c):
    """Vectorized closest distance between points p and triangles (a, b, c)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, q):
        m = mask & ~done
        out[m] = q[m]
        done[m] = True

    put((d1 <= 0) & (d2 <= 0), a)
    put((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        put((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return np.linalg.norm(p - out, axis=1)


def centroid_depths(mesh: TetMesh, cutoff=np.inf):
    """Distance from each tet centroid to the boundary surface.

    Depths larger than ``cutoff`` are only guaranteed to be reported as
    ``> cutoff`` (candidate triangles are pruned with a KD-tree).
    """
    tri = mesh.nodes[mesh.surface_tris]
    tc = tri.mean(axis=1)
    reach = np.linalg.norm(tri - tc[:, None], axis=2).max()
    # nearest surface vertex gives an upper bound on the depth
    vtree = cKDTree(mesh.nodes[mesh.surface_nodes])
    upper, _ = vtree.query(mesh.centroids)
    radius = np.minimum(upper, cutoff) + reach
    ttree = cKDTree(tc)
    depth = upper.copy()
    cands = ttree.query_ball_point(mesh.centroids, radius)
    lens = np.fromiter((len(c) for c in cands), dtype=np.int64, count=len(cands))
    if lens.sum():
        ei = np.repeat(np.arange(mesh.n_elements), lens)
        ti = np.concatenate([np.asarray(c, dtype=np.int64) for c in cands if len(c)])
        d = _point_triangle_distance(mesh.centroids[ei], tri[ti, 0], tri[ti, 1], tri[ti, 2])
        np.minimum.at(depth, ei, d)
    return depth


def tag_shell_elements(mesh: TetMesh, thickness: float) -> np.ndarray:
    """Tets whose centroid lies within ``thickness`` of the boundary surface.

    If no centroid is that shallow, the shallowest tets are returned so the
    shell is never empty.
    """
    if not thickness > 0:
        raise ValueError("shell thickness must be positive")
    if thickness >= mesh.diameter:
        shell = np.arange(mesh.n_elements)
    else:
        depth = centroid_depths(mesh, cutoff=thickness)
        shell = np.nonzero(depth < thickness)[0]
        if len(shell) == 0:
            shell = np.nonzero(depth <= depth.min() * (1 + 1e-9))[0]
    if len(shell) == mesh.n_elements:
        warnings.warn("shell covers every element: no design freedom remains", stacklevel=2)
    return shell


# -- geodesics and sampling ----------------------------------------------------

def geodesic_distances(mesh: TetMesh, source: int) -> np.ndarray:
    """Approximate geodesic distance (Dijkstra on surface edges) to every surface node.

    The result is indexed by surface-local position (``mesh.surface_nodes``
    order). Unreachable nodes get ``inf``.
    """
    loc = mesh.surface_index[source]
    if loc < 0:
        raise ValueError(f"node {source} is not a surface node")
    return csgraph.dijkstra(mesh.surface_graph, directed=False, indices=int(loc))


def geodesic_matrix(mesh: TetMesh, nodes) -> np.ndarray:
    """Pairwise geodesic distances among the given surface nodes."""
    loc = mesh.surface_index[np.asarray(nodes)]
    if (loc < 0).any():
        raise ValueError("all nodes must lie on the surface")
    d = csgraph.dijkstra(mesh.surface_graph, directed=False, indices=loc)
    return d[:, loc]


def farthest_first(dist, count, seed=0):
    """Greedy farthest-first traversal on a distance matrix; ties go to the lowest index."""
    chosen = [seed]
    mind = dist[seed].copy()
    while len(chosen) < count:
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, dist[nxt])
    return chosen


def sample_contact_nodes(mesh: TetMesh, contact, count: int, max_iter=100, dist=None) -> np.ndarray:
    """Pick ``count`` representative contact nodes by geodesic k-medoids.

    Seeds come from a farthest-first traversal started at the lowest-index
    contact node; each centre is then moved to the member that minimizes the
    summed geodesic distance to its cluster until assignments settle.
    """
    contact = np.unique(np.asarray(contact, dtype=np.int64))
    if not 1 <= count <= len(contact):
        raise ValueError(f"sample count {count} must be in [1, {len(contact)}]")
    if count == len(contact):
        return contact.copy()
    if dist is None:
        dist = geodesic_matrix(mesh, contact)
    # unreachable pairs should never be preferred as the farthest node
    finite = np.where(np.isfinite(dist), dist, np.nanmax(np.where(np.isfinite(dist), dist, 0)) * 10 + 1)
    centers = np.array(farthest_first(finite, count))
    for _ in range(max_iter):
        label = np.argmin(finite[:, centers], axis=1)
        label[centers] = np.arange(count)
        new = centers.copy()
        for k in range(count):
            members = np.nonzero(label == k)[0]
            cost = finite[np.ix_(members, members)].sum(axis=1)
            new[k] = members[np.argmin(cost)]
        if np.array_equal(new, centers):
            break
        centers = new
    return contact[centers]


# -- Laplacians ----------------------------------------------------------------

def _laplacian_from_pairs(pairs, size):
    a = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(size, size))
    a = (a + a.T).tocsr()
    a.data[:] = 1.0
    deg = np.asarray(a.sum(axis=1)).ravel()
    return (sparse.diags(deg) - a).tocsr()


def build_laplacian(kind: str, mesh: TetMesh) -> sparse.csr_matrix:
    """Combinatorial graph Laplacian (degree on the diagonal, -1 per edge).

    ``kind="surface"`` uses surface edges on surface-local indices (s x s);
    ``kind="element"`` uses face adjacency between tets (m x m).
    """
    if kind == "surface":
        return _laplacian_from_pairs(mesh.surface_index[mesh.surface_edges], mesh.n_surface)
    if kind == "element":
        return _laplacian_from_pairs(mesh.element_pairs, mesh.n_elements)
    raise ValueError(f"unknown Laplacian kind {kind!r}")


def connected_components(mesh: TetMesh, nodes) -> list[np.ndarray]:
    """Split surface nodes into components connected by surface edges among themselves."""
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    if len(nodes) == 0:
        return []
    pos = np.full(mesh.n_nodes, -1)
    pos[nodes] = np.arange(len(nodes))
    e = mesh.surface_edges
    keep = (pos[e[:, 0]] >= 0) & (pos[e[:, 1]] >= 0)
    pe = pos[e[keep]]
    g = sparse.coo_matrix((np.ones(len(pe)), (pe[:, 0], pe[:, 1])), shape=(len(nodes), len(nodes)))
    _, label = csgraph.connected_components(g, directed=False)
    comps = [nodes[label == k] for k in np.unique(label)]
    comps.sort(key=lambda c: c[0])
    return comps
