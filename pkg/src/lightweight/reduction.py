"""Reduced density parameterization: rho = G(Gamma @ alpha).

``Gamma`` holds the smoothest eigenvectors of the element-adjacency graph
Laplacian (material modes), volume-orthonormal, with shell rows zeroed so
shell elements stay at G(0) ~ 1 whatever ``alpha`` is.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.linalg import eigh
from scipy.sparse import linalg as spla

from .mesh import TetMesh, build_laplacian

logger = logging.getLogger(__name__)

BASIS_FORMAT_VERSION = 1
_G_MIN = np.finfo(float).tiny
_G_MAX = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class LogisticMap:
    steepness: float = 5.0
    inflection: float = 2.0
    threshold: float = 0.5

    def __call__(self, x):
        # G(x) = 1 / (1 + exp(k (x - x0))), written to avoid overflow; clipped
        # so that saturated entries stay inside the open interval (0, 1)
        z = self.steepness * (np.asarray(x, dtype=float) - self.inflection)
        return np.clip(np.exp(-np.logaddexp(0.0, z)), _G_MIN, _G_MAX)

    def derivative(self, x):
        # -k G (1 - G) in log form, accurate where G rounds to 1
        z = self.steepness * (np.asarray(x, dtype=float) - self.inflection)
        return -self.steepness * np.exp(-np.logaddexp(0.0, z) - np.logaddexp(0.0, -z))


@dataclass(frozen=True)
class MaterialBasis:
    """Material modes. ``modes`` is the raw V-orthonormal basis, ``gamma`` the
    shell-masked one used for densities."""

    modes: np.ndarray        # (m, k) before masking
    eigenvalues: np.ndarray  # (k,) ascending, >= 0
    shell_mask: np.ndarray   # (m,) bool
    mesh_hash: str = ""

    @property
    def gamma(self):
        g = self.modes.copy()
        g[self.shell_mask] = 0.0
        return g

    @property
    def k(self):
        return self.modes.shape[1]


def _fix_signs(vec):
    # deterministic orientation: the largest-magnitude entry of each mode is positive
    idx = np.argmax(np.abs(vec), axis=0)
    sign = np.sign(vec[idx, np.arange(vec.shape[1])])
    sign[sign == 0] = 1
    return vec * sign


def _solve_modes(mesh: TetMesh, k: int):
    L = build_laplacian("element", mesh)
    V = mesh.tet_volumes
    m = mesh.n_elements
    if m <= 1500 or k >= m - 1:
        mu, vec = eigh(L.toarray(), np.diag(V), subset_by_index=[0, k - 1])
    else:
        shift = -1e-3 * float(L.diagonal().mean()) / V.mean()
        Vm = sparse.diags(V)
        ncv = min(m, max(2 * k + 1, 30))
        for _ in range(3):
            try:
                mu, vec = spla.eigsh(L.tocsc(), k=k, M=Vm, sigma=shift, which="LM", ncv=ncv,
                                     tol=1e-12, v0=np.ones(m))
                break
            except spla.ArpackNoConvergence:
                logger.warning("material mode solve did not converge with ncv=%d; retrying", ncv)
                ncv = min(m, 2 * ncv)
        else:
            raise RuntimeError("material mode eigensolve failed")
        order = np.argsort(mu)
        mu, vec = mu[order], vec[:, order]
        vec = vec / np.sqrt(np.einsum("ij,i,ij->j", vec, V, vec))
    mu = np.maximum(mu, 0.0)
    if k == 1 or mu[1] > 1e-8 * float(L.diagonal().max()) / V.max():
        # connected mesh: the null space is exactly the constant vector
        vec[:, 0] = 1.0 / np.sqrt(V.sum())
        mu[0] = 0.0
        vec[:, 1:] = _fix_signs(vec[:, 1:])
    else:
        vec = _fix_signs(vec)
    return mu, vec


def compute_material_basis(mesh: TetMesh, shell, k: int = 15, cache_dir=None) -> MaterialBasis:
    """First ``k`` material modes of ``mesh`` with shell rows masked.

    With ``cache_dir`` the unmasked modes are stored as ``<hash>_k<k>.npz`` and
    reused on later calls.
    """
    if not 1 <= k <= mesh.n_elements:
        raise ValueError(f"k must be in [1, {mesh.n_elements}]")
    mask = np.zeros(mesh.n_elements, dtype=bool)
    mask[np.asarray(shell, dtype=np.int64)] = True
    path = Path(cache_dir) / f"{mesh.hash}_k{k}.npz" if cache_dir else None
    if path is not None and path.exists():
        basis = load_basis(path, mesh, mask)
        if basis is not None:
            return basis
    mu, vec = _solve_modes(mesh, k)
    basis = MaterialBasis(vec, mu, mask, mesh.hash)
    if path is not None:
        save_basis(path, basis)
    return basis


def save_basis(path, basis: MaterialBasis, logistic: LogisticMap | None = None):
    """Write the unmasked modes with a small header (hash, k, logistic parameters)."""
    logistic = logistic or LogisticMap()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, version=BASIS_FORMAT_VERSION, mesh_hash=basis.mesh_hash, k=basis.k,
             steepness=logistic.steepness, inflection=logistic.inflection,
             modes=basis.modes, eigenvalues=basis.eigenvalues)


def load_basis(path, mesh: TetMesh, shell_mask) -> MaterialBasis | None:
    with np.load(path) as z:
        if int(z["version"]) != BASIS_FORMAT_VERSION or str(z["mesh_hash"]) != mesh.hash:
            logger.warning("ignoring stale basis cache %s", path)
            return None
        return MaterialBasis(z["modes"], z["eigenvalues"], np.asarray(shell_mask, bool), mesh.hash)


def density_from_alpha(basis: MaterialBasis, logistic: LogisticMap, alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (basis.k,):
        raise ValueError(f"alpha must have length {basis.k}")
    return logistic(basis.gamma @ alpha)


def density_jacobian(basis: MaterialBasis, logistic: LogisticMap, alpha) -> np.ndarray:
    """d rho / d alpha, shape (m, k); shell rows are zero."""
    gamma = basis.gamma
    return logistic.derivative(gamma @ alpha)[:, None] * gamma


def binarize(density, threshold=0.5, shell=None) -> np.ndarray:
    """Solid where rho >= threshold (ties keep material); shell forced solid."""
    out = (np.asarray(density) >= threshold).astype(float)
    if shell is not None:
        out[np.asarray(shell, dtype=np.int64)] = 1.0
    return out
