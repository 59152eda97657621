"""Linear elasticity on constant-strain tetrahedra with SIMP interpolation.

Voigt order throughout is (xx, yy, zz, xy, yz, zx) with engineering shear
strains. Dirichlet conditions are applied by eliminating the fixed dofs, so
the reduced stiffness stays symmetric positive definite.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .mesh import TetMesh

logger = logging.getLogger(__name__)

_REF_GRAD = np.array([[-1.0, -1.0, -1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


class FactorizationError(RuntimeError):
    """The constrained stiffness matrix is not positive definite."""


@dataclass(frozen=True)
class MaterialModel:
    youngs_modulus: float = 2100.0
    poisson_ratio: float = 0.3
    yield_strength: float = 50.0
    simp_exponent: float = 3.0
    void_fraction: float = 1e-8
    stress_exponent: float | None = None     # exponent of C_e(rho); None follows simp_exponent

    def __post_init__(self):
        if not self.youngs_modulus > 0:
            raise ValueError("Young's modulus must be positive")
        if not 0 <= self.poisson_ratio < 0.5:
            raise ValueError("Poisson ratio must lie in [0, 0.5)")
        if not self.yield_strength > 0:
            raise ValueError("yield strength must be positive")
        if not self.simp_exponent >= 1:
            raise ValueError("SIMP exponent must be >= 1")
        if not 0 < self.void_fraction < 1e-2:
            raise ValueError("void fraction must be small and positive")
        if self.stress_exponent is not None and not 0 <= self.stress_exponent <= self.simp_exponent:
            raise ValueError("stress exponent must lie in [0, simp_exponent]")

    def elasticity(self) -> np.ndarray:
        """Isotropic 6x6 elasticity matrix of the solid material."""
        E, nu = self.youngs_modulus, self.poisson_ratio
        lam = E * nu / ((1 + nu) * (1 - 2 * nu))
        mu = E / (2 * (1 + nu))
        C = np.zeros((6, 6))
        C[:3, :3] = lam
        C[np.arange(3), np.arange(3)] = lam + 2 * mu
        C[np.arange(3, 6), np.arange(3, 6)] = mu
        return C

    def stiffness_scale(self, rho):
        """SIMP factor s(rho) with K_e = s(rho) K_e^solid (and C_e likewise)."""
        eps, beta = self.void_fraction, self.simp_exponent
        return eps + (1.0 - eps) * np.asarray(rho, dtype=float) ** beta

    def stiffness_scale_derivative(self, rho):
        eps, beta = self.void_fraction, self.simp_exponent
        return beta * (1.0 - eps) * np.asarray(rho, dtype=float) ** (beta - 1)

    @property
    def stress_beta(self) -> float:
        return self.simp_exponent if self.stress_exponent is None else self.stress_exponent

    def stress_scale(self, rho):
        """Factor of C_e(rho) in the stress recovery; equals stiffness_scale unless
        ``stress_exponent`` relaxes it."""
        eps, q = self.void_fraction, self.stress_beta
        return eps + (1.0 - eps) * np.asarray(rho, dtype=float) ** q

    def stress_scale_derivative(self, rho):
        eps, q = self.void_fraction, self.stress_beta
        if q == 0:
            return np.zeros(np.shape(rho))
        return q * (1.0 - eps) * np.asarray(rho, dtype=float) ** (q - 1)


def strain_displacement(points) -> np.ndarray:
    """B matrix (6x12) of one linear tet, or (m, 6, 12) for stacked points (m, 4, 3)."""
    points = np.asarray(points, dtype=float)
    single = points.ndim == 2
    p = points[None] if single else points
    J = np.swapaxes(p[:, 1:] - p[:, :1], 1, 2)  # columns are edge vectors
    grads = _REF_GRAD[None] @ np.linalg.inv(J)  # (m, 4, 3) shape-function gradients
    m = len(p)
    B = np.zeros((m, 6, 12))
    bx, by, bz = grads[..., 0], grads[..., 1], grads[..., 2]
    B[:, 0, 0::3] = bx
    B[:, 1, 1::3] = by
    B[:, 2, 2::3] = bz
    B[:, 3, 0::3] = by
    B[:, 3, 1::3] = bx
    B[:, 4, 1::3] = bz
    B[:, 4, 2::3] = by
    B[:, 5, 0::3] = bz
    B[:, 5, 2::3] = bx
    return B[0] if single else B


@dataclass(frozen=True)
class ElementData:
    """Per-element solid quantities, stacked over all m elements."""

    B: np.ndarray        # (m, 6, 12)
    K_solid: np.ndarray  # (m, 12, 12)
    C_solid: np.ndarray  # (6, 6), homogeneous material
    volumes: np.ndarray  # (m,)

    def entry(self, e):
        return self.B[e], self.K_solid[e], self.C_solid, self.volumes[e]


def element_data(mesh: TetMesh, material: MaterialModel) -> ElementData:
    B = strain_displacement(mesh.nodes[mesh.tets])
    C = material.elasticity()
    V = mesh.tet_volumes
    K = V[:, None, None] * np.einsum("eji,jk,ekl->eil", B, C, B)
    return ElementData(B, K, C, V)


def element_solid_stiffness(mesh: TetMesh, material: MaterialModel, e: int):
    """(B_e, K_e^solid, C^solid, V_e) of a single element."""
    B = strain_displacement(mesh.nodes[mesh.tets[e]])
    C = material.elasticity()
    V = mesh.tet_volumes[e]
    return B, V * B.T @ C @ B, C, V


def simp_stiffness(K_solid, rho, material: MaterialModel = MaterialModel()):
    """Interpolated element stiffness K_void + rho^beta (K_solid - K_void)."""
    if not 0 <= rho <= 1:
        warnings.warn(f"density {rho} outside [0, 1]; clamped", stacklevel=2)
        rho = min(max(rho, 0.0), 1.0)
    K_void = material.void_fraction * K_solid
    return K_void + rho ** material.simp_exponent * (K_solid - K_void)


def element_dofs(mesh: TetMesh) -> np.ndarray:
    return (3 * mesh.tets[:, :, None] + np.arange(3)).reshape(-1, 12)


def fixed_dofs(fixed_nodes) -> np.ndarray:
    fixed_nodes = np.asarray(fixed_nodes, dtype=np.int64)
    return (3 * fixed_nodes[:, None] + np.arange(3)).ravel()


class Assembler:
    """Sparsity pattern of the reduced stiffness, reused across densities.

    Element matrices are scattered with a precomputed index map, so a new
    density only costs one weighted ``bincount``.
    """

    def __init__(self, mesh: TetMesh, data: ElementData, fixed_nodes):
        self.mesh = mesh
        self.data = data
        ndof = 3 * mesh.n_nodes
        self.ndof = ndof
        fixed = np.zeros(ndof, dtype=bool)
        fixed[fixed_dofs(fixed_nodes)] = True
        self.fixed_mask = fixed
        self.free = np.nonzero(~fixed)[0]
        red = np.full(ndof, -1, dtype=np.int64)
        red[self.free] = np.arange(len(self.free))
        self.reduced_index = red
        edofs = red[element_dofs(mesh)]
        rows = np.repeat(edofs, 12, axis=1)
        cols = np.tile(edofs, (1, 12))
        keep = (rows >= 0) & (cols >= 0)
        self._keep = keep.ravel()
        nf = len(self.free)
        key = rows.ravel()[self._keep] * nf + cols.ravel()[self._keep]
        ukey, self._slot = np.unique(key, return_inverse=True)
        self._indices = (ukey % nf).astype(np.int32)
        r = ukey // nf
        self._indptr = np.searchsorted(r, np.arange(nf + 1)).astype(np.int32)
        self._nnz = len(ukey)
        self.nf = nf

    def reduced_stiffness(self, scale) -> sparse.csr_matrix:
        vals = (scale[:, None, None] * self.data.K_solid).reshape(-1)[self._keep]
        data = np.bincount(self._slot, weights=vals, minlength=self._nnz)
        return sparse.csr_matrix((data, self._indices, self._indptr), shape=(self.nf, self.nf))

    def full_stiffness(self, scale) -> sparse.csr_matrix:
        edofs = element_dofs(self.mesh)
        rows = np.repeat(edofs, 12, axis=1).ravel()
        cols = np.tile(edofs, (1, 12)).ravel()
        vals = (scale[:, None, None] * self.data.K_solid).ravel()
        return sparse.csr_matrix((vals, (rows, cols)), shape=(self.ndof, self.ndof))


class FemSystem:
    """Assembled and factorized stiffness for one density field.

    ``n_solves`` counts back-substitutions (FEA evaluations).
    """

    def __init__(self, assembler: Assembler, material: MaterialModel, density):
        density = np.asarray(density, dtype=float)
        mesh = assembler.mesh
        if density.shape != (mesh.n_elements,):
            raise ValueError(f"density must have length {mesh.n_elements}")
        if density.min() < 0 or density.max() > 1:
            warnings.warn("density outside [0, 1]; clamped", stacklevel=2)
            density = np.clip(density, 0.0, 1.0)
        self.assembler = assembler
        self.mesh = mesh
        self.data = assembler.data
        self.material = material
        self.density = density
        self.scale = material.stiffness_scale(density)
        self.stress_scale = material.stress_scale(density)
        self.n_solves = 0
        if assembler.nf == assembler.ndof:
            raise FactorizationError("no fixed dofs: structure is floating; check the fixed region")
        self.K = assembler.reduced_stiffness(self.scale)
        K = self.K.tocsc()
        try:
            self._lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                 options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise FactorizationError(f"stiffness factorization failed ({exc}); check constraints") from None
        piv = self._lu.U.diagonal()
        if not (piv > 1e-13 * np.abs(piv).max()).all():
            raise FactorizationError("stiffness is not positive definite; check constraints")

    @property
    def free(self):
        return self.assembler.free

    def solve_reduced(self, rhs):
        return self._lu.solve(rhs)

    def solve(self, f) -> np.ndarray:
        """Displacements for nodal force vector f (length 3n); fixed dofs get 0."""
        f = np.asarray(f, dtype=float)
        u = np.zeros(self.assembler.ndof)
        u[self.free] = self._lu.solve(f[self.free])
        self.n_solves += 1
        return u


def assemble_and_factorize(mesh: TetMesh, regions, density, material: MaterialModel = MaterialModel(),
                           assembler: Assembler | None = None) -> FemSystem:
    if assembler is None:
        assembler = Assembler(mesh, element_data(mesh, material), regions.fixed_nodes)
    return FemSystem(assembler, material, density)


def solve_displacements(system: FemSystem, f) -> np.ndarray:
    return system.solve(f)


def element_strains(data: ElementData, mesh: TetMesh, u) -> np.ndarray:
    ue = np.asarray(u)[element_dofs(mesh)]
    return np.einsum("eij,ej->ei", data.B, ue)


def von_mises(sigma) -> np.ndarray:
    s = np.asarray(sigma, dtype=float)
    sx, sy, sz, txy, tyz, tzx = np.moveaxis(s, -1, 0)
    j2 = 0.5 * ((sx - sy) ** 2 + (sy - sz) ** 2 + (sz - sx) ** 2) + 3 * (txy**2 + tyz**2 + tzx**2)
    return np.sqrt(np.maximum(j2, 0.0))


def von_mises_gradient(sigma, vm=None) -> np.ndarray:
    """d(vm)/d(sigma), zero where the stress is purely hydrostatic."""
    s = np.asarray(sigma, dtype=float)
    if vm is None:
        vm = von_mises(s)
    sx, sy, sz, txy, tyz, tzx = np.moveaxis(s, -1, 0)
    g = np.stack([2 * sx - sy - sz, 2 * sy - sx - sz, 2 * sz - sx - sy, 6 * txy, 6 * tyz, 6 * tzx], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(vm[..., None] > 0, g / (2 * vm[..., None]), 0.0)
    return g


@dataclass
class StressField:
    sigma: np.ndarray      # (m, 6)
    von_mises: np.ndarray  # (m,)


def recover_stress(system: FemSystem, u) -> StressField:
    """Per-element stress sigma_e = s(rho_e) C B_e u_e and its von Mises value."""
    strain = element_strains(system.data, system.mesh, u)
    sigma = system.stress_scale[:, None] * (strain @ system.data.C_solid.T)
    return StressField(sigma, von_mises(sigma))


def lumped_mass(mesh: TetMesh, density, floor=None, material: MaterialModel = MaterialModel()) -> np.ndarray:
    """Diagonal of the lumped mass matrix (per dof), a quarter of each element's
    mass on each of its nodes.

    Element mass is ``s(rho) V_e`` with the stiffness interpolation ``s``, so
    stiffness and mass of nearly void elements vanish together and produce no
    spurious local modes. With ``floor`` the weight is ``max(rho, floor)``
    instead.
    """
    rho = np.asarray(density, dtype=float)
    weight = material.stiffness_scale(rho) if floor is None else np.maximum(rho, floor)
    w = weight * mesh.tet_volumes / 4.0
    nodal = np.bincount(mesh.tets.ravel(), weights=np.repeat(w, 4), minlength=mesh.n_nodes)
    return np.repeat(nodal, 3)


def modal_analysis(system: FemSystem, num_modes: int, mass_floor=None):
    """Lowest vibration modes of the constrained structure.

    Returns ``(lam, modes)``: eigenvalue magnitudes in ascending order and
    mass-orthonormal modes expanded to all 3n dofs.
    """
    if num_modes < 1:
        raise ValueError("num_modes must be >= 1")
    mass = lumped_mass(system.mesh, system.density, mass_floor, system.material)[system.free]
    nf = len(mass)
    k = min(num_modes, nf - 1) if nf > 1 else 1
    if nf <= 600 or k >= nf - 1:
        from scipy.linalg import eigh
        lam, vec = eigh(system.K.toarray(), np.diag(mass), subset_by_index=[0, k - 1])
    else:
        Minv = sparse.diags(mass)
        op = spla.LinearOperator((nf, nf), matvec=system.solve_reduced, dtype=float)
        ncv = min(nf, max(2 * k + 1, 20))
        for attempt in range(3):
            try:
                lam, vec = spla.eigsh(system.K, k=k, M=Minv, sigma=0.0, OPinv=op, which="LM",
                                      ncv=ncv, tol=1e-10, v0=np.ones(nf))
                break
            except spla.ArpackNoConvergence:
                logger.warning("eigensolver did not converge with ncv=%d; retrying", ncv)
                ncv = min(nf, 2 * ncv)
        else:
            raise RuntimeError("modal analysis failed to converge")
        order = np.argsort(lam)
        lam, vec = lam[order], vec[:, order]
        # re-normalize against M (ARPACK normalization can drift slightly)
        vec = vec / np.sqrt(np.einsum("ij,i,ij->j", vec, mass, vec))
    modes = np.zeros((system.assembler.ndof, k))
    modes[system.free] = vec
    return np.abs(lam), modes
