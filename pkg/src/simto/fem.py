"""Linear-elastic Q4 finite elements on a regular grid with SIMP interpolation.

Node ``(i, j)`` sits at ``(i * h, j * h)`` with ``i`` along x and ``j`` along y
(y up).  Node index is ``i * (nely + 1) + j``; element ``(ex, ey)`` has index
``ey * nelx + ex`` so ``rho.reshape(nely, nelx)`` is a bottom-up image.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .linalg import NotPositiveDefinite, SparseCholesky


class FemError(Exception):
    """Structural problem with a model or its inputs."""


class SolverError(FemError):
    """The reduced linear system could not be solved."""


@dataclass(frozen=True)
class GridSpec:
    nelx: int
    nely: int
    element_size: float = 1.0

    def __post_init__(self):
        if self.nelx < 1 or self.nely < 1:
            raise FemError(f"grid needs at least one element per axis, got {self.nelx}x{self.nely}")
        if not self.element_size > 0:
            raise FemError("element_size must be positive")

    @property
    def n_elements(self) -> int:
        return self.nelx * self.nely

    @property
    def n_nodes(self) -> int:
        return (self.nelx + 1) * (self.nely + 1)

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    @property
    def width(self) -> float:
        return self.nelx * self.element_size

    @property
    def height(self) -> float:
        return self.nely * self.element_size

    def node(self, i: int, j: int) -> int:
        return i * (self.nely + 1) + j

    def node_ij(self, n):
        n = np.asarray(n)
        return n // (self.nely + 1), n % (self.nely + 1)

    def node_coords(self) -> np.ndarray:
        i, j = self.node_ij(np.arange(self.n_nodes))
        return np.column_stack([i, j]).astype(float) * self.element_size

    def nearest_node(self, xy) -> int:
        x, y = xy
        i = int(np.clip(np.rint(x / self.element_size), 0, self.nelx))
        j = int(np.clip(np.rint(y / self.element_size), 0, self.nely))
        return self.node(i, j)

    def element_centers(self) -> np.ndarray:
        ey, ex = np.divmod(np.arange(self.n_elements), self.nelx)
        return (np.column_stack([ex, ey]) + 0.5) * self.element_size

    @cached_property
    def element_nodes(self) -> np.ndarray:
        """(n_elements, 4) node indices, counter-clockwise from lower-left."""
        ey, ex = np.divmod(np.arange(self.n_elements), self.nelx)
        n1 = ex * (self.nely + 1) + ey
        n2 = (ex + 1) * (self.nely + 1) + ey
        return np.column_stack([n1, n2, n2 + 1, n1 + 1])

    @cached_property
    def edof(self) -> np.ndarray:
        """(n_elements, 8) dof indices matching the element stiffness ordering."""
        en = self.element_nodes
        out = np.empty((self.n_elements, 8), dtype=np.int64)
        out[:, 0::2] = 2 * en
        out[:, 1::2] = 2 * en + 1
        return out


@dataclass(frozen=True)
class MaterialLaw:
    e0: float = 1.0
    e_min: float = 1e-9
    p: float = 3.0
    nu: float = 0.3
    plane_strain: bool = False

    def __post_init__(self):
        if not 0 < self.e_min < self.e0:
            raise FemError("need 0 < e_min < e0")
        if self.p < 1:
            raise FemError("penalization exponent must be >= 1")
        if not 0 <= self.nu < 0.5:
            raise FemError("Poisson ratio must lie in [0, 0.5)")

    def effective(self) -> tuple[float, float]:
        """(modulus factor, Poisson ratio) of the equivalent plane-stress law."""
        if self.plane_strain:
            return 1.0 / (1.0 - self.nu**2), self.nu / (1.0 - self.nu)
        return 1.0, self.nu

    def constitutive(self) -> np.ndarray:
        """Unit-modulus 3x3 D matrix (Voigt order xx, yy, xy with engineering shear)."""
        scale, nu = self.effective()
        return scale / (1 - nu**2) * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])


@dataclass(frozen=True)
class DensityField:
    values: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size != self.grid.n_elements:
            raise FemError(f"density has {v.size} values, grid has {self.grid.n_elements} elements")
        if np.any(~np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise FemError("densities must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, grid: GridSpec, value: float) -> "DensityField":
        return cls(np.full(grid.n_elements, float(value)), grid)

    def image(self) -> np.ndarray:
        """(nely, nelx) array, row 0 = bottom."""
        return self.values.reshape(self.grid.nely, self.grid.nelx)

    @property
    def volume_fraction(self) -> float:
        return float(self.values.mean())


@dataclass(frozen=True)
class FemModel:
    grid: GridSpec
    material: MaterialLaw
    fixed_dofs: np.ndarray
    springs: tuple = ()
    loads: tuple = field(default=())

    def __post_init__(self):
        fixed = np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        if fixed.size == 0:
            raise FemError("at least one fixed dof is required")
        if fixed.min() < 0 or fixed.max() >= self.grid.n_dofs:
            raise FemError("fixed dof out of range")
        object.__setattr__(self, "fixed_dofs", fixed)
        for dof, k in self.springs:
            if not k > 0:
                raise FemError(f"spring on dof {dof} has non-positive stiffness {k}")
        for F in self.loads:
            if np.any(np.asarray(F)[fixed] != 0):
                raise FemError("load applied to a fixed dof")

    @cached_property
    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.grid.n_dofs, dtype=bool)
        mask[self.fixed_dofs] = False
        return np.flatnonzero(mask)


def element_stiffness(material: MaterialLaw) -> np.ndarray:
    """Unit-modulus, unit-thickness stiffness of a square bilinear element.

    Closed form of the 88-line code; plane strain is mapped onto the
    equivalent plane-stress parameters.
    """
    scale, nu = material.effective()
    k = np.array([
        1 / 2 - nu / 6, 1 / 8 + nu / 8, -1 / 4 - nu / 12, -1 / 8 + 3 * nu / 8,
        -1 / 4 + nu / 12, -1 / 8 - nu / 8, nu / 6, 1 / 8 - 3 * nu / 8,
    ])
    idx = np.array([
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ])
    return scale / (1 - nu**2) * k[idx]


def simp_modulus(rho_e, material: MaterialLaw):
    rho_e = np.asarray(rho_e, dtype=float)
    if np.any(rho_e < 0) or np.any(rho_e > 1) or np.any(~np.isfinite(rho_e)):
        raise ValueError("density outside [0, 1]")
    out = material.e_min + rho_e**material.p * (material.e0 - material.e_min)
    return float(out) if out.ndim == 0 else out


def simp_derivative(rho_e, material: MaterialLaw):
    rho_e = np.asarray(rho_e, dtype=float)
    return material.p * rho_e ** (material.p - 1) * (material.e0 - material.e_min)


def _check_rho(model: FemModel, rho) -> np.ndarray:
    values = rho.values if isinstance(rho, DensityField) else np.asarray(rho, dtype=float).ravel()
    if values.size != model.grid.n_elements:
        raise FemError(f"density length {values.size} does not match {model.grid.n_elements} elements")
    return values


def assemble(model: FemModel, rho) -> sp.csc_matrix:
    values = _check_rho(model, rho)
    grid = model.grid
    ke = element_stiffness(model.material)
    moduli = simp_modulus(values, model.material)
    edof = grid.edof
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    data = (moduli[:, None] * ke.ravel()[None, :]).ravel()
    if model.springs:
        s_dof = np.array([d for d, _ in model.springs], dtype=np.int64)
        s_k = np.array([k for _, k in model.springs], dtype=float)
        rows = np.concatenate([rows, s_dof])
        cols = np.concatenate([cols, s_dof])
        data = np.concatenate([data, s_k])
    K = sp.coo_matrix((data, (rows, cols)), shape=(grid.n_dofs, grid.n_dofs)).tocsc()
    # summation order can leave ~1 ulp asymmetry; make it exact
    return ((K + K.T) * 0.5).tocsc()


class Factorization:
    """Sparse Cholesky of the reduced stiffness, reused for many right-hand sides.

    Falls back to LU when Cholesky breaks down (round-off on near-void designs).
    """

    def __init__(self, model: FemModel, K: sp.spmatrix):
        if K.shape != (model.grid.n_dofs, model.grid.n_dofs):
            raise FemError(f"stiffness shape {K.shape} does not match model")
        self.model = model
        self.free = model.free_dofs
        self.K_ff = K.tocsc()[self.free][:, self.free].tocsc()
        try:
            self._lu = SparseCholesky(self.K_ff)
        except NotPositiveDefinite:
            try:
                self._lu = SparseCholesky(self.K_ff, backend="splu")
            except NotPositiveDefinite as exc:
                raise SolverError(f"reduced stiffness is singular: {exc}") from exc

    def solve(self, F, rtol: float = 1e-8) -> np.ndarray:
        F = np.asarray(F, dtype=float)
        n = self.model.grid.n_dofs
        if F.shape[0] != n:
            raise FemError(f"force vector length {F.shape[0]} does not match {n} dofs")
        F_f = F[self.free]
        U_f = self._lu.solve(F_f)
        U_f = U_f + self._lu.solve(F_f - self.K_ff @ U_f)  # one refinement step
        if not np.all(np.isfinite(U_f)):
            raise SolverError("non-finite displacements; reduced system is singular")
        res = np.linalg.norm(self.K_ff @ U_f - F_f, axis=0)
        scale = np.linalg.norm(F_f, axis=0)
        bad = res > rtol * np.maximum(scale, np.finfo(float).tiny)
        bad &= scale > 0
        if np.any(bad):
            raise SolverError(f"direct solve did not converge: residual {res.max():.3e}")
        U = np.zeros_like(F)
        U[self.free] = U_f
        return U


def solve(model: FemModel, K, F) -> np.ndarray:
    """Displacements with fixed dofs eliminated; ``F`` may hold several columns."""
    return Factorization(model, K).solve(F)


def solve_cg(model: FemModel, K, F, rtol: float = 1e-8, maxiter: int | None = None) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradient fallback (single right-hand side)."""
    F = np.asarray(F, dtype=float)
    free = model.free_dofs
    K_ff = K.tocsr()[free][:, free]
    d = K_ff.diagonal()
    M = spla.LinearOperator(K_ff.shape, matvec=lambda x: x / d)
    U_f, info = spla.cg(K_ff, F[free], rtol=rtol, atol=0.0, M=M, maxiter=maxiter or 20 * K_ff.shape[0])
    if info != 0:
        raise SolverError(f"conjugate gradient did not converge (info={info})")
    U = np.zeros_like(F)
    U[free] = U_f
    return U


def strain_displacement(xi: float = 0.0, eta: float = 0.0, h: float = 1.0) -> np.ndarray:
    """3x8 B matrix of the square element at natural coordinates (xi, eta)."""
    dn_dxi = 0.25 * np.array([-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)])
    dn_deta = 0.25 * np.array([-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)])
    dn_dx, dn_dy = dn_dxi * 2 / h, dn_deta * 2 / h
    B = np.zeros((3, 8))
    B[0, 0::2] = dn_dx
    B[1, 1::2] = dn_dy
    B[2, 0::2] = dn_dy
    B[2, 1::2] = dn_dx
    return B


def element_stress(model: FemModel, rho, U) -> np.ndarray:
    """(n_elements, 3) centroid stresses [sxx, syy, sxy]."""
    values = _check_rho(model, rho)
    B = strain_displacement(h=model.grid.element_size)
    ue = np.asarray(U, dtype=float)[model.grid.edof]
    strain = ue @ B.T
    D = model.material.constitutive()
    return simp_modulus(values, model.material)[:, None] * (strain @ D.T)


def von_mises(model: FemModel, rho, U) -> np.ndarray:
    s = element_stress(model, rho, U)
    sx, sy, txy = s[:, 0], s[:, 1], s[:, 2]
    if model.material.plane_strain:
        sz = model.material.nu * (sx + sy)
        vm2 = 0.5 * ((sx - sy) ** 2 + (sy - sz) ** 2 + (sz - sx) ** 2) + 3 * txy**2
    else:
        vm2 = sx**2 - sx * sy + sy**2 + 3 * txy**2
    return np.sqrt(np.maximum(vm2, 0.0))


def rigid_body_modes(coords: np.ndarray) -> np.ndarray:
    """(2n, 3) translations in x, y and an infinitesimal rotation about the origin."""
    n = coords.shape[0]
    modes = np.zeros((2 * n, 3))
    modes[0::2, 0] = 1
    modes[1::2, 1] = 1
    modes[0::2, 2] = -coords[:, 1]
    modes[1::2, 2] = coords[:, 0]
    return modes
