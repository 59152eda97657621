"""Critical instant analysis.

For a fixed density field this finds the contact node whose budgeted load
produces the largest von Mises stress, using far fewer FEA solves than
trying every contact node:

1. a handful of geodesically spread sample instants are solved exactly;
2. a quadratic ridge regression maps surface-Laplacian coordinates of the
   load to PCA weights of the stress field, giving a criticality estimate at
   every contact node;
3. the top decile of that map, split into connected islands, is searched
   hierarchically with exact solves, measuring stress only in the weak
   regions found from low-frequency vibration modes.

:func:`brute_force_oracle` solves every contact node and is the reference.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.sparse import linalg as spla

from .fem import Assembler, FemSystem, MaterialModel, element_data, modal_analysis, recover_stress
from .loadcase import InstantLibrary
from .mesh import TetMesh, build_laplacian, connected_components, geodesic_matrix, sample_contact_nodes

logger = logging.getLogger(__name__)


def feature_dim(q: int) -> int:
    return (q * q + 3 * q + 2) // 2


def default_sample_count(n_contact: int, fraction=0.05) -> int:
    return min(n_contact, max(3, math.ceil(fraction * n_contact)))


def default_q(l: int) -> int:
    """Largest q whose quadratic feature count fits max(10, l/2); capped at 16."""
    limit = max(10, l / 2)
    q = 1
    while q < 16 and feature_dim(q + 1) <= limit:
        q += 1
    return q


def surface_basis(mesh: TetMesh, q: int) -> np.ndarray:
    """Smoothest non-constant eigenvectors of the surface graph Laplacian (s x q).

    The constant eigenvector is skipped: unit-budget magnitude rows all have
    the same sum, so their projection on it is identically zero.
    """
    L = build_laplacian("surface", mesh)
    s = L.shape[0]
    if q + 1 > s:
        raise ValueError(f"q={q} exceeds the surface dimension {s}")
    if s <= 2500:
        _, vec = linalg.eigh(L.toarray(), subset_by_index=[0, q])
    else:
        lam, vec = spla.eigsh(L.tocsc(), k=q + 1, sigma=-1e-3, which="LM", v0=np.ones(s))
        vec = vec[:, np.argsort(lam)]
    vec = vec[:, 1:]
    idx = np.argmax(np.abs(vec), axis=0)
    return vec * np.sign(vec[idx, np.arange(q)])


def quadratic_features(Z) -> np.ndarray:
    """[1, z, z_i z_j (i <= j)] per row; (q^2 + 3q + 2) / 2 columns."""
    Z = np.atleast_2d(Z)
    iu, ju = np.triu_indices(Z.shape[1])
    return np.hstack([np.ones((len(Z), 1)), Z, Z[:, iu] * Z[:, ju]])


@dataclass
class CriticalityModel:
    """Surrogate from force magnitude rows to von Mises stress fields."""

    sample_nodes: np.ndarray
    psi: np.ndarray          # (s, q) surface basis
    f_mean: np.ndarray       # (s,) mean unit-budget magnitude row
    z_scale: np.ndarray      # (q,) standardization of the reduced coordinates
    phi: np.ndarray          # (m, l-1) stress principal vectors
    sigma_mean: np.ndarray   # (m,)
    W: np.ndarray            # (feature_dim(q), l-1)
    ridge: float
    budget: float
    T: np.ndarray            # (l, m) sampled von Mises fields

    @property
    def q(self):
        return self.psi.shape[1]

    def features(self, rows) -> np.ndarray:
        """Regression features of magnitude rows given at the model's budget."""
        rows = rows / self.budget if self.budget > 0 else rows
        Z = np.asarray(rows @ self.psi) - self.f_mean @ self.psi
        return quadratic_features(Z / self.z_scale)

    def predict_rows(self, rows) -> np.ndarray:
        """Estimated von Mises fields (one row per magnitude row)."""
        return self.sigma_mean + (self.features(rows) @ self.W) @ self.phi.T

    def criticality(self, rows, chunk=256) -> np.ndarray:
        """Max estimated von Mises over all elements, clamped at zero."""
        out = np.empty(rows.shape[0])
        WP = self.W @ self.phi.T
        for a in range(0, rows.shape[0], chunk):
            est = self.sigma_mean + self.features(rows[a:a + chunk]) @ WP
            out[a:a + chunk] = est.max(axis=1)
        return np.maximum(out, 0.0)


def fit_regression(X, Y, ridge_factor=1e-6):
    """Ridge solution (X'X + rI)^-1 X'Y with r relative to the mean diagonal."""
    G = X.T @ X
    r = ridge_factor * float(np.mean(np.diag(G))) or ridge_factor
    for _ in range(4):
        try:
            c = linalg.cho_factor(G + r * np.eye(len(G)))
            return linalg.cho_solve(c, X.T @ Y), r
        except linalg.LinAlgError:
            logger.warning("normal equations not positive definite at ridge %.3g; increasing", r)
            r *= 10
    raise linalg.LinAlgError("regression normal equations are rank deficient")


def train_criticality_model(system: FemSystem, library: InstantLibrary, samples, psi, budget,
                            ridge_factor=1e-6, warn=True) -> CriticalityModel:
    """Solve the sample instants exactly and fit the quadratic surrogate.

    Costs one back-substitution per sample on the existing factorization.
    """
    samples = np.asarray(samples, dtype=np.int64)
    l = len(samples)
    if l < 3:
        raise ValueError("at least three training samples are required")
    nf = feature_dim(psi.shape[1])
    if nf > l and warn:
        warnings.warn(f"{nf} regression features exceed {l} samples", stacklevel=2)
    T = np.empty((l, system.mesh.n_elements))
    for k, i in enumerate(samples):
        u = system.solve(library.rhs(i, budget))
        T[k] = recover_stress(system, u).von_mises
    rowpos = np.searchsorted(library.contact, samples)
    F = library.magnitudes[rowpos].toarray()
    f_mean = F.mean(axis=0)
    Z = (F - f_mean) @ psi
    z_scale = Z.std(axis=0)
    z_scale[z_scale <= 1e-9 * max(np.abs(F @ psi).max(), 1e-300)] = 1.0   # degenerate coordinate
    X = quadratic_features(Z / z_scale)
    sigma_mean = T.mean(axis=0)
    Tc = T - sigma_mean
    _, _, Vt = np.linalg.svd(Tc, full_matrices=False)
    phi = Vt[: l - 1].T
    W, r = fit_regression(X, Tc @ phi, ridge_factor)
    return CriticalityModel(samples, psi, f_mean, z_scale, phi, sigma_mean, W, r, float(budget), T)


def predict_stress(model: CriticalityModel, instant, mesh: TetMesh) -> np.ndarray:
    """Estimated von Mises field (length m) for one force instant."""
    row = np.zeros(mesh.n_surface)
    row[mesh.surface_index[instant.nodes]] = np.linalg.norm(instant.forces, axis=1)
    row *= model.budget / instant.budget if instant.budget > 0 else 0.0
    return model.predict_rows(row[None])[0] * (instant.budget / model.budget if model.budget > 0 else 0.0)


@dataclass
class ForceRegions:
    islands: list            # connected arrays of contact nodes
    criticality: np.ndarray  # estimate per contact node (library order)
    contact: np.ndarray

    @property
    def nodes(self):
        return np.concatenate(self.islands) if self.islands else np.zeros(0, np.int64)


def extract_force_regions(model: CriticalityModel, library: InstantLibrary, fraction=0.10,
                          criticality=None) -> ForceRegions:
    """Top ``fraction`` of contact nodes by estimated criticality, split into islands."""
    if criticality is None:
        criticality = model.criticality(library.magnitudes * model.budget)
    contact = library.contact
    count = max(1, math.ceil(fraction * len(contact)))
    order = np.lexsort((contact, -criticality))
    top = contact[order[:count]]
    return ForceRegions(connected_components(library.mesh, top), criticality, contact)


@dataclass
class WeakRegions:
    elements: np.ndarray
    mode_nodes: list = field(default_factory=list)
    eigenvalues: np.ndarray | None = None


def compute_weak_regions(system: FemSystem, num_modes=15, fraction=0.025, mass_floor=None) -> WeakRegions:
    """Elements around the nodes most stressed by the lowest vibration modes."""
    mesh = system.mesh
    lam, modes = modal_analysis(system, num_modes, mass_floor)
    count = max(1, math.ceil(fraction * mesh.n_nodes))
    inc = mesh.node_elements
    chosen, per_mode = set(), []
    for j in range(modes.shape[1]):
        vm = recover_stress(system, modes[:, j]).von_mises
        node_vm = np.zeros(mesh.n_nodes)
        np.maximum.at(node_vm, mesh.tets.ravel(), np.repeat(vm, 4))
        top = np.lexsort((np.arange(mesh.n_nodes), -node_vm))[:count]
        per_mode.append(np.sort(top))
        chosen.update(int(t) for t in top)
    nodes = np.array(sorted(chosen), dtype=np.int64)
    elements = np.unique(inc[nodes].indices)
    return WeakRegions(elements, per_mode, lam)


@dataclass
class CriticalInstantResult:
    node: int
    sigma_cr: float
    n_fea: int
    traces: list = field(default_factory=list)
    u: np.ndarray | None = None
    von_mises: np.ndarray | None = None
    # oracle only: per-contact-node maxima over all elements / over the weak regions
    all_nodes: np.ndarray | None = None
    max_all: np.ndarray | None = None
    max_wr: np.ndarray | None = None
    sigma_cr_wr: float | None = None


def _farthest_first_points(x, k):
    chosen = [0]
    d = np.linalg.norm(x - x[0], axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(x - x[nxt], axis=1))
    return x[chosen].copy()


def partition_points(x, k, max_iter=50) -> np.ndarray:
    """k-means labels with farthest-first init from the first point (ties: lowest index)."""
    centers = _farthest_first_points(x, k)
    label = None
    for _ in range(max_iter):
        d = np.linalg.norm(x[:, None, :] - centers[None], axis=2)
        new = np.argmin(d, axis=1)
        if label is not None and np.array_equal(new, label):
            break
        label = new
        for c in range(k):
            if (label == c).any():
                centers[c] = x[label == c].mean(axis=0)
    # compact labels so empty clusters disappear
    _, label = np.unique(label, return_inverse=True)
    return label


def central_node(nodes, coords):
    c = coords.mean(axis=0)
    return int(nodes[np.argmin(np.linalg.norm(coords - c, axis=1))])


def hierarchical_search(system: FemSystem, library: InstantLibrary, budget, frs: ForceRegions,
                        wrs: WeakRegions) -> CriticalInstantResult:
    """Greedy 4-way descent through each force-region island.

    Every evaluation is one exact back-substitution; stress is measured over
    the weak-region elements only.
    """
    mesh = system.mesh
    wr = wrs.elements
    start = system.n_solves
    values, fields = {}, {}

    def evaluate(i):
        if i not in values:
            u = system.solve(library.rhs(i, budget))
            vm = recover_stress(system, u).von_mises
            values[i] = float(vm[wr].max()) if len(wr) else 0.0
            fields[i] = (u, vm)
        return values[i]

    best_node, best_val, traces = -1, -np.inf, []
    for island in frs.islands:
        if len(island) == 0:
            warnings.warn("empty force-region island skipped", stacklevel=2)
            continue
        seg = np.sort(island)
        visited, levels, before = [], [], system.n_solves
        while True:
            if len(seg) == 1:
                evaluate(int(seg[0]))
                visited.append(int(seg[0]))
                break
            label = partition_points(mesh.nodes[seg], min(4, len(seg)))
            parts = [seg[label == c] for c in range(label.max() + 1)]
            centers = [central_node(p, mesh.nodes[p]) for p in parts]
            vals = [evaluate(c) for c in centers]
            visited.extend(centers)
            levels.append((len(seg), list(zip(centers, vals))))
            nxt = parts[int(np.argmax(vals))]
            if len(nxt) == len(seg):
                break
            seg = nxt
        island_best = max(visited, key=lambda i: (values[i], -i))
        traces.append(dict(island=island, visited=visited, levels=levels, n_fea=system.n_solves - before,
                           node=island_best, sigma=values[island_best]))
        if values[island_best] > best_val:
            best_node, best_val = island_best, values[island_best]
    if best_node < 0:
        return CriticalInstantResult(-1, 0.0, system.n_solves - start, traces)
    u, vm = fields[best_node]
    return CriticalInstantResult(best_node, best_val, system.n_solves - start, traces, u, vm)


def brute_force_oracle(system: FemSystem, library: InstantLibrary, budget, wrs: WeakRegions | None = None,
                       nodes=None) -> CriticalInstantResult:
    """Exact critical instant: one solve per contact node, max over all elements."""
    nodes = library.contact if nodes is None else np.asarray(nodes, dtype=np.int64)
    start = system.n_solves
    max_all = np.empty(len(nodes))
    max_wr = np.full(len(nodes), np.nan)
    for k, i in enumerate(nodes):
        vm = recover_stress(system, system.solve(library.rhs(i, budget))).von_mises
        max_all[k] = vm.max()
        if wrs is not None and len(wrs.elements):
            max_wr[k] = vm[wrs.elements].max()
    best = int(np.argmax(max_all))
    u = system.solve(library.rhs(nodes[best], budget))
    system.n_solves -= 1  # re-solve for the stored field is bookkeeping, not a search step
    vm = recover_stress(system, u).von_mises
    return CriticalInstantResult(int(nodes[best]), float(max_all[best]), system.n_solves - start, [], u, vm,
                                 nodes, max_all, max_wr,
                                 float(np.nanmax(max_wr)) if wrs is not None else None)


@dataclass
class AnalysisResult:
    system: FemSystem
    model: CriticalityModel
    frs: ForceRegions
    wrs: WeakRegions
    result: CriticalInstantResult
    n_fea: int               # training + search solves

    @property
    def sigma_cr(self):
        return self.result.sigma_cr

    @property
    def node(self):
        return self.result.node


class CriticalityAnalyzer:
    """Density-independent setup for repeated critical instant analyses.

    Instants, training samples and the surface basis depend only on the mesh
    and regions, so they are built once and reused every iteration.
    """

    def __init__(self, mesh: TetMesh, regions, material: MaterialModel = MaterialModel(), budget=1.0,
                 patch_radius=None, sample_fraction=0.05, q=None, ridge_factor=1e-6,
                 fr_fraction=0.10, wr_modes=15, wr_fraction=0.025, mass_floor=None, samples=None):
        self.mesh = mesh
        self.regions = regions
        self.material = material
        self.budget = float(budget)
        self.fr_fraction = fr_fraction
        self.wr_modes = wr_modes
        self.wr_fraction = wr_fraction
        self.mass_floor = mass_floor
        self.ridge_factor = ridge_factor
        self.assembler = Assembler(mesh, element_data(mesh, material), regions.fixed_nodes)
        self.library = InstantLibrary(mesh, regions.contact_nodes, patch_radius, regions.fixed_nodes)
        contact = self.library.contact
        if samples is None:
            l = default_sample_count(len(contact), sample_fraction)
            self.geodesics = geodesic_matrix(mesh, contact)
            samples = sample_contact_nodes(mesh, contact, l, dist=self.geodesics)
        self.samples = np.asarray(samples, dtype=np.int64)
        self.q = default_q(len(self.samples)) if q is None else int(q)
        self.psi = surface_basis(mesh, self.q)
        if feature_dim(self.q) > len(self.samples):
            warnings.warn(f"{feature_dim(self.q)} regression features exceed {len(self.samples)} samples",
                          stacklevel=2)

    def factorize(self, density, material: MaterialModel | None = None) -> FemSystem:
        return FemSystem(self.assembler, material or self.material, density)

    def train(self, system: FemSystem) -> CriticalityModel:
        return train_criticality_model(system, self.library, self.samples, self.psi, self.budget,
                                       self.ridge_factor, warn=False)

    def weak_regions(self, system: FemSystem) -> WeakRegions:
        return compute_weak_regions(system, self.wr_modes, self.wr_fraction, self.mass_floor)

    def analyze(self, density=None, system: FemSystem | None = None) -> AnalysisResult:
        if system is None:
            system = self.factorize(density)
        start = system.n_solves
        model = self.train(system)
        frs = extract_force_regions(model, self.library, self.fr_fraction)
        wrs = self.weak_regions(system)
        result = hierarchical_search(system, self.library, self.budget, frs, wrs)
        return AnalysisResult(system, model, frs, wrs, result, system.n_solves - start)

    def oracle(self, density=None, system: FemSystem | None = None, wrs=None) -> CriticalInstantResult:
        if system is None:
            system = self.factorize(density)
        return brute_force_oracle(system, self.library, self.budget, wrs)
