"""Bundled desk-scale test models built from voxel masks.

Each voxel is split into six tets around its main diagonal. For each axis
listed in ``mirror`` the split is reflected for voxels below the mid plane of
that axis, so meshes of masks symmetric about those planes are exactly
symmetric (nodes, tets and surface).
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .mesh import RegionSpec, TetMesh, select_nodes, tag_shell_elements

_CORNERS = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])


def _kuhn_tets():
    tets = []
    for perm in permutations(range(3)):
        path = [np.zeros(3, dtype=int)]
        for ax in perm:
            nxt = path[-1].copy()
            nxt[ax] = 1
            path.append(nxt)
        tets.append([int(p[0] * 4 + p[1] * 2 + p[2]) for p in path])
    return np.array(tets)


_KUHN = _kuhn_tets()
_AXIS_BIT = {"x": 4, "y": 2, "z": 1}      # corner index bit of each offset


def voxel_mesh(mask, spacing=1.0, origin=(0.0, 0.0, 0.0), mirror="") -> TetMesh:
    """Tetrahedralize the solid voxels of a boolean ``mask[i, j, k]``.

    ``mirror`` is a string of axes (``"x"``, ``"yz"``, ...) to reflect the split about.
    """
    mask = np.asarray(mask, dtype=bool)
    nx, ny, nz = mask.shape
    h = np.broadcast_to(np.asarray(spacing, dtype=float), (3,))
    vox = np.argwhere(mask)
    grid_id = lambda ijk: (ijk[..., 0] * (ny + 1) + ijk[..., 1]) * (nz + 1) + ijk[..., 2]
    corners = grid_id(vox[:, None, :] + _CORNERS[None])
    flip = np.zeros(len(vox), dtype=int)
    for ax in mirror:
        a = "xyz".index(ax)
        flip |= np.where(2 * vox[:, a] + 1 < mask.shape[a], _AXIS_BIT[ax], 0)
    pattern = _KUHN[None] ^ flip[:, None, None]      # xor flips the reflected corner offsets
    tets = np.take_along_axis(corners[:, None, :].repeat(6, 1), pattern, axis=2).reshape(-1, 4)
    used, tets = np.unique(tets, return_inverse=True)
    tets = tets.reshape(-1, 4)
    k = used % (nz + 1)
    j = (used // (nz + 1)) % (ny + 1)
    i = used // ((nz + 1) * (ny + 1))
    nodes = np.column_stack([i, j, k]) * h + np.asarray(origin, dtype=float)
    return TetMesh(nodes, tets)


@dataclass
class Model:
    """A mesh with boundary conditions and a short description."""

    name: str
    mesh: TetMesh
    regions: RegionSpec
    description: str = ""


def _regions(mesh, fixed, contact, shell_thickness):
    contact = np.setdiff1d(contact, fixed)
    shell = tag_shell_elements(mesh, shell_thickness) if shell_thickness > 0 else np.zeros(0, int)
    return RegionSpec(fixed, contact, shell, shell_thickness).validate(mesh)


def cantilever(length=20.0, width=4.0, height=4.0, h=1.0, shell=1.0, contact="top") -> Model:
    """Bar clamped at x=0, loaded on its top face (or its whole free surface).

    ``contact="all"`` puts contact on every surface node off the clamped layer.
    The split is mirrored about the y and z mid planes.
    """
    shape = np.round(np.array([length, width, height]) / h).astype(int)
    mesh = voxel_mesh(np.ones(shape, bool), h, mirror="yz")
    tol = 1e-9 * length
    fixed = select_nodes(mesh, lambda x, y, z: x < tol)
    if contact == "top":
        cn = select_nodes(mesh, lambda x, y, z: (z > height - tol) & (x > h - tol))
    else:
        cn = select_nodes(mesh, lambda x, y, z: x > h - tol)
    return Model("cantilever", mesh, _regions(mesh, fixed, cn, shell),
                 "clamped bar; contact on the free surface")


def neck_thickness(x, length=24.0, base=4.0, end=8.0, ramp=4.0,
                   necks=((8.0, 2.0), (16.0, 2.6)), width=1.6):
    """Plate thickness along x: thick ends easing into a base thickness, with
    two smooth Gaussian thinnings (centre, minimum thickness)."""
    x = np.asarray(x, dtype=float)
    t = base + (end - base) * (np.clip(1 - x / ramp, 0, 1) ** 2 + np.clip(1 - (length - x) / ramp, 0, 1) ** 2)
    for c, tn in necks:
        t = t - (base - tn) * np.exp(-(((x - c) / width) ** 2))
    return t


def two_neck_plate(h=0.5, layers=10, shell=0.5, length=24.0, width=4.0, clearance=2.5) -> Model:
    """Plate clamped at both ends with a flat top and two smooth necks.

    The neck at x=8 is thinner than the one at x=16. The grid is a box with
    ``layers`` cells through the thickness, mapped so the bottom follows
    :func:`neck_thickness`; there are no re-entrant corners, so the necks
    rather than geometric singularities govern the stress. Contact is the
    top face except ``clearance`` next to each clamp.
    """
    nx, ny = round(length / h), round(width / h)
    box = voxel_mesh(np.ones((nx, ny, layers), bool), (h, h, 1.0 / layers))
    p = box.nodes.copy()
    top = float(neck_thickness(0.0, length))
    p[:, 2] = top - (1 - p[:, 2]) * neck_thickness(p[:, 0], length)
    mesh = TetMesh(p, box.tets)
    tol = 1e-9 * length
    fixed = select_nodes(mesh, lambda x, y, z: (x < tol) | (x > length - tol))
    cn = select_nodes(mesh, lambda x, y, z: (z > top - tol) & (x > clearance - tol) & (x < length - clearance + tol))
    return Model("two_neck_plate", mesh, _regions(mesh, fixed, cn, shell),
                 "clamped plate with a thin and a thicker neck, loaded on top")


def neck_regions(model: Model, half_width=1.6):
    """Interior (non-shell) element sets (thin neck, thick neck, rest) of the two-neck plate."""
    c = model.mesh.centroids[:, 0]
    interior = np.ones(model.mesh.n_elements, bool)
    interior[model.regions.shell_elements] = False
    thin = interior & (np.abs(c - 8.0) <= half_width)
    thick = interior & (np.abs(c - 16.0) <= half_width)
    rest = interior & ~thin & ~thick
    return np.nonzero(thin)[0], np.nonzero(thick)[0], np.nonzero(rest)[0]


def slingshot(h=1.0, shell=1.0) -> Model:
    """Mirror-symmetric Y-shaped fork fixed at the bottom of its stem.

    Contact is the outer faces of both prongs, so every load squeezes the
    prongs together.
    """
    nx, ny, nz = 16, 4, 18
    mask = np.zeros((nx, ny, nz), bool)
    mask[5:11, :, :8] = True       # stem
    mask[1:15, :, 8:11] = True     # yoke
    mask[1:5, :, 11:18] = True     # left prong
    mask[11:15, :, 11:18] = True   # right prong
    mesh = voxel_mesh(mask, h, mirror="x")
    W, H = nx * h, nz * h
    tol = 1e-9 * H
    fixed = select_nodes(mesh, lambda x, y, z: z < tol)
    cn = select_nodes(mesh, lambda x, y, z: (z > 11 * h - tol) & ((x < h + tol) | (x > W - h - tol)))
    return Model("slingshot", mesh, _regions(mesh, fixed, cn, shell),
                 "symmetric fork fixed at the stem, loaded on the prongs")


def bracket(h=1.0, shell=1.0) -> Model:
    """L-shaped bracket: a post fixed at its base carrying an overhanging arm.

    Contact is the top face of the arm away from its long edges.
    """
    nx, ny, nz = 16, 4, 16
    mask = np.zeros((nx, ny, nz), bool)
    mask[:4, :, :] = True          # post
    mask[:, :, 12:] = True         # arm
    mesh = voxel_mesh(mask, h)
    H = nz * h
    tol = 1e-9 * H
    fixed = select_nodes(mesh, lambda x, y, z: z < tol)
    W = ny * h
    cn = select_nodes(mesh, lambda x, y, z: (z > H - tol) & (y > h - tol) & (y < W - h + tol))
    return Model("bracket", mesh, _regions(mesh, fixed, cn, shell),
                 "L-bracket fixed at the post base, loaded on the arm")


def mirror_map(mesh: TetMesh, axis=0):
    """Node permutation mapping each node to its mirror image about the mid plane."""
    x = mesh.nodes.copy()
    lo, hi = x[:, axis].min(), x[:, axis].max()
    x[:, axis] = lo + hi - x[:, axis]
    key = lambda p: np.round(p / (1e-9 * mesh.diameter)).astype(np.int64)
    ref = {tuple(k): i for i, k in enumerate(key(mesh.nodes))}
    return np.array([ref[tuple(k)] for k in key(x)])


BUNDLED = {
    "cantilever": cantilever,
    "two_neck_plate": two_neck_plate,
    "slingshot": slingshot,
    "bracket": bracket,
}
