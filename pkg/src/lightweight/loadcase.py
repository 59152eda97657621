"""Force instants: a budgeted normal load spread over a small surface patch.

The patch is the part of the surface inside a sphere of radius ``r_p`` around
the contact node. Every surface triangle reached from the contact node is
clipped against the sphere in its own plane; triangle ``t`` contributes its
clipped area ``a_t`` to each of its three nodes, so the node areas ``A_j`` sum
to three times the patch area and the nodal force magnitudes sum to ``P``.
"""
from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .mesh import TetMesh, _point_triangle_distance


def _segment_disk_area(a, b, r):
    """Signed area of disk(0, r) intersected with the triangle (0, a, b)."""
    d = b - a
    A = d @ d
    if A == 0:
        return 0.0
    B = a @ d
    C = a @ a - r * r
    ts = [0.0]
    disc = B * B - A * C
    if disc > 0:
        sq = np.sqrt(disc)
        for t in ((-B - sq) / A, (-B + sq) / A):
            if 0 < t < 1:
                ts.append(t)
    ts.append(1.0)
    total = 0.0
    for t0, t1 in zip(ts[:-1], ts[1:]):
        p, q = a + t0 * d, a + t1 * d
        mid = a + 0.5 * (t0 + t1) * d
        cross = p[0] * q[1] - p[1] * q[0]
        if mid @ mid <= r * r:
            total += 0.5 * cross
        else:
            total += 0.5 * r * r * np.arctan2(cross, p @ q)
    return total


def clipped_triangle_area(tri, center, radius) -> float:
    """Area of a 3D triangle inside the ball ``B(center, radius)``.

    The ball cuts the triangle's plane in a disk; the triangle is clipped
    against that disk exactly.
    """
    tri = np.asarray(tri, dtype=float)
    e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
    n = np.cross(e1, e2)
    nn = np.linalg.norm(n)
    if nn == 0:
        return 0.0
    n /= nn
    h = (center - tri[0]) @ n
    if abs(h) >= radius:
        return 0.0
    rr = np.sqrt(radius * radius - h * h)
    foot = center - h * n
    u = e1 / np.linalg.norm(e1)
    v = np.cross(n, u)
    pts = [np.array([(p - foot) @ u, (p - foot) @ v]) for p in tri]
    area = sum(_segment_disk_area(pts[k], pts[(k + 1) % 3], rr) for k in range(3))
    return abs(area)


def _inradius(tri):
    a = np.linalg.norm(tri[1] - tri[2])
    b = np.linalg.norm(tri[0] - tri[2])
    c = np.linalg.norm(tri[0] - tri[1])
    area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    return 2 * area / (a + b + c)


def _patch_areas(mesh: TetMesh, center, radius, ring):
    """Clipped areas of the triangles connected to ``ring`` inside the ball."""
    tris = mesh.surface_tris
    near = np.asarray(mesh.node_kdtree.query_ball_point(center, radius + mesh.max_edge_length), dtype=np.int64)
    inc = mesh.node_tris[near]
    cand = np.unique(inc.indices)
    p = mesh.nodes[tris[cand]]
    c = np.broadcast_to(center, (len(cand), 3))
    dist = _point_triangle_distance(c, p[:, 0], p[:, 1], p[:, 2])
    inside = (np.linalg.norm(p - center, axis=2) <= radius).all(axis=1)
    hit = {}
    for t, d, full in zip(cand, dist, inside):
        if full:
            hit[int(t)] = float(mesh.tri_areas[t])
        elif d < radius * (1 - 1e-12):
            a = clipped_triangle_area(mesh.nodes[tris[t]], center, radius)
            if a > 1e-12 * radius * radius:
                hit[int(t)] = a
    # keep only triangles connected to the contact node through the patch
    nbr = mesh.tri_neighbors
    areas = {}
    queue = deque(int(t) for t in ring if int(t) in hit)
    seen = set(queue)
    while queue:
        t = queue.popleft()
        areas[t] = hit[t]
        for s in nbr.indices[nbr.indptr[t]:nbr.indptr[t + 1]]:
            s = int(s)
            if s in hit and s not in seen:
                seen.add(s)
                queue.append(s)
    return areas


@dataclass(frozen=True)
class ForceInstant:
    """Full budget ``P`` pressed along ``-n_i`` around contact node ``node``."""

    node: int
    patch_radius: float
    budget: float
    nodes: np.ndarray    # nodes carrying load
    forces: np.ndarray   # (k, 3) nodal forces
    patch_area: float

    def magnitudes(self):
        return np.linalg.norm(self.forces, axis=1)


def default_patch_radius(mesh: TetMesh) -> float:
    return 2.0 * mesh.mean_edge_length


def build_force_instant(mesh: TetMesh, i: int, budget: float, patch_radius: float | None = None) -> ForceInstant:
    """Spread ``budget`` over the surface patch around node ``i``.

    The patch is grown from the triangles incident to ``i`` through node
    neighbours, keeping triangles that intersect the sphere, so surfaces on
    the far side of thin features are never loaded.
    """
    if patch_radius is None:
        patch_radius = default_patch_radius(mesh)
    if not patch_radius > 0:
        raise ValueError("patch radius must be positive")
    if budget < 0:
        raise ValueError("force budget must be non-negative")
    loc = mesh.surface_index[i]
    if loc < 0:
        raise ValueError(f"node {i} is not a surface node")
    center = mesh.nodes[i]
    normal = mesh.node_normals[loc]
    tris = mesh.surface_tris
    inc = mesh.node_tris
    ring = inc.indices[inc.indptr[i]:inc.indptr[i + 1]]

    if patch_radius < min(_inradius(mesh.nodes[tris[t]]) for t in ring):
        warnings.warn("patch radius below incident triangle inradius; using one-ring areas", stacklevel=2)
        areas = {int(t): float(mesh.tri_areas[t]) for t in ring}
    else:
        areas = _patch_areas(mesh, center, patch_radius, ring)
    node_area: dict[int, float] = {}
    for t, a in areas.items():
        for j in tris[t]:
            node_area[int(j)] = node_area.get(int(j), 0.0) + a
    patch_area = sum(areas.values())
    nodes = np.array(sorted(node_area), dtype=np.int64)
    A = np.array([node_area[j] for j in nodes])
    forces = -budget * (A / (3 * patch_area))[:, None] * normal[None, :]
    return ForceInstant(int(i), float(patch_radius), float(budget), nodes, forces, float(patch_area))


def assemble_rhs(instant: ForceInstant | None, n: int, fixed_nodes=None) -> np.ndarray:
    """Dense nodal force vector of length 3n; loads on fixed nodes are dropped."""
    f = np.zeros(3 * n)
    if instant is None or len(instant.nodes) == 0:
        return f
    f.reshape(-1, 3)[instant.nodes] += instant.forces
    if fixed_nodes is not None and len(fixed_nodes):
        fv = f.reshape(-1, 3)
        if np.any(fv[fixed_nodes] != 0):
            warnings.warn("force instant touches fixed nodes; those loads are dropped", stacklevel=2)
            fv[fixed_nodes] = 0.0
    return f


def magnitude_row(instant: ForceInstant, mesh: TetMesh) -> np.ndarray:
    """Per-surface-node force magnitudes (length s)."""
    row = np.zeros(mesh.n_surface)
    row[mesh.surface_index[instant.nodes]] = instant.magnitudes()
    return row


class InstantLibrary:
    """Unit-budget instants for every contact node, built once per mesh.

    Instants scale linearly with the budget, so the geometry work is shared
    across densities and budgets.
    """

    def __init__(self, mesh: TetMesh, contact_nodes, patch_radius=None, fixed_nodes=None):
        self.mesh = mesh
        self.contact = np.asarray(contact_nodes, dtype=np.int64)
        self.patch_radius = default_patch_radius(mesh) if patch_radius is None else float(patch_radius)
        self.fixed_nodes = fixed_nodes
        self.instants = {int(i): build_force_instant(mesh, int(i), 1.0, self.patch_radius) for i in self.contact}
        rows, cols, vals = [], [], []
        for k, i in enumerate(self.contact):
            inst = self.instants[int(i)]
            rows.append(np.full(len(inst.nodes), k))
            cols.append(mesh.surface_index[inst.nodes])
            vals.append(inst.magnitudes())
        self.magnitudes = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(len(self.contact), mesh.n_surface))

    def instant(self, i, budget) -> ForceInstant:
        u = self.instants[int(i)]
        return ForceInstant(u.node, u.patch_radius, float(budget), u.nodes, u.forces * budget, u.patch_area)

    def rhs(self, i, budget) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return assemble_rhs(self.instant(i, budget), self.mesh.n_nodes, self.fixed_nodes)
