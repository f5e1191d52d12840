"""Element, assembly and solver checks for the SIMP finite-element core."""
import numpy as np
import pytest
import scipy.sparse.linalg as spla
from hypothesis import given, settings, strategies as st

from simto.fem import (
    DensityField,
    FemError,
    FemModel,
    GridSpec,
    MaterialLaw,
    SolverError,
    assemble,
    element_stiffness,
    rigid_body_modes,
    simp_modulus,
    solve,
    solve_cg,
    von_mises,
)


def gauss_q4_stiffness(nu, h=1.0):
    """2x2 Gauss integration of B'DB over a square element, written from scratch."""
    D = 1 / (1 - nu**2) * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])
    K = np.zeros((8, 8))
    g = 1 / np.sqrt(3)
    corners = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    for xi in (-g, g):
        for eta in (-g, g):
            B = np.zeros((3, 8))
            for a, (xa, ya) in enumerate(corners):
                dx = 0.25 * xa * (1 + ya * eta) * 2 / h
                dy = 0.25 * ya * (1 + xa * xi) * 2 / h
                B[0, 2 * a] = dx
                B[1, 2 * a + 1] = dy
                B[2, 2 * a] = dy
                B[2, 2 * a + 1] = dx
            K += B.T @ D @ B * (h / 2) ** 2
    return K


def cantilever(nelx=8, nely=4, h=1.0, material=None):
    grid = GridSpec(nelx, nely, h)
    left = [grid.node(0, j) for j in range(nely + 1)]
    fixed = np.sort(np.concatenate([2 * np.array(left), 2 * np.array(left) + 1]))
    return FemModel(grid, material or MaterialLaw(), fixed)


class TestGrid:
    def test_counts(self):
        g = GridSpec(150, 70)
        assert g.n_elements == 10500
        assert g.n_nodes == 151 * 71
        assert g.n_dofs == 2 * 151 * 71

    def test_node_numbering_column_major(self):
        g = GridSpec(3, 2)
        assert g.node(0, 0) == 0 and g.node(0, 2) == 2 and g.node(1, 0) == 3
        np.testing.assert_array_equal(g.node_coords()[g.node(2, 1)], [2.0, 1.0])

    def test_element_nodes_counter_clockwise(self):
        g = GridSpec(2, 2, 2.0)
        xy = g.node_coords()[g.element_nodes[3]]
        np.testing.assert_allclose(xy, [[2, 2], [4, 2], [4, 4], [2, 4]])

    @pytest.mark.parametrize("bad", [(0, 3), (3, 0)])
    def test_rejects_empty(self, bad):
        with pytest.raises(FemError):
            GridSpec(*bad)


class TestElement:
    @pytest.mark.parametrize("nu", [0.0, 0.3, 0.45])
    def test_closed_form_matches_quadrature(self, nu):
        np.testing.assert_allclose(element_stiffness(MaterialLaw(nu=nu)), gauss_q4_stiffness(nu), atol=1e-14)

    def test_symmetric_psd_with_three_zero_modes(self):
        ke = element_stiffness(MaterialLaw())
        assert np.abs(ke - ke.T).max() == 0
        w = np.linalg.eigvalsh(ke)
        assert np.sum(np.abs(w) < 1e-12) == 3
        assert w.min() > -1e-14

    def test_rigid_body_nullspace(self):
        ke = element_stiffness(MaterialLaw())
        coords = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
        assert np.abs(ke @ rigid_body_modes(coords)).max() <= 1e-12

    def test_plane_strain_maps_to_effective_constants(self):
        m = MaterialLaw(nu=0.3, plane_strain=True)
        scale, nu = m.effective()
        assert nu == pytest.approx(0.3 / 0.7)
        np.testing.assert_allclose(element_stiffness(m), scale * gauss_q4_stiffness(nu), atol=1e-13)


class TestSimp:
    def test_bounds(self):
        m = MaterialLaw()
        assert simp_modulus(0.0, m) == m.e_min
        assert simp_modulus(1.0, m) == pytest.approx(m.e0)
        assert simp_modulus(0.5, m) == pytest.approx(1e-9 + 0.125 * (1 - 1e-9))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            simp_modulus(np.array([0.5, 1.2]), MaterialLaw())

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_monotone(self, a, b):
        m = MaterialLaw()
        lo, hi = sorted((a, b))
        assert simp_modulus(lo, m) <= simp_modulus(hi, m)


class TestAssembly:
    def test_symmetric(self):
        model = cantilever()
        rho = np.random.default_rng(0).uniform(0, 1, model.grid.n_elements)
        K = assemble(model, rho)
        assert abs(K - K.T).max() == 0

    def test_rigid_modes_of_free_structure(self):
        g = GridSpec(5, 3, 2.0)
        model = FemModel(g, MaterialLaw(), np.array([0]))
        K = assemble(model, np.ones(g.n_elements)).toarray()
        assert np.abs(K @ rigid_body_modes(g.node_coords())).max() <= 1e-12

    def test_patch_test(self):
        """Linear boundary displacements reproduce the linear field exactly in the interior."""
        g = GridSpec(6, 5, 1.5)
        model = FemModel(g, MaterialLaw(), np.array([0]))
        K = assemble(model, np.ones(g.n_elements)).tocsr()
        xy = g.node_coords()
        u = np.empty(g.n_dofs)
        u[0::2] = 1e-3 * (2 * xy[:, 0] + 3 * xy[:, 1]) + 0.1
        u[1::2] = 1e-3 * (-xy[:, 0] + 0.5 * xy[:, 1]) - 0.2
        i, j = g.node_ij(np.arange(g.n_nodes))
        boundary = (i == 0) | (i == g.nelx) | (j == 0) | (j == g.nely)
        b = np.repeat(boundary, 2)
        inner = np.flatnonzero(~b)
        bd = np.flatnonzero(b)
        u_in = spla.spsolve(K[inner][:, inner].tocsc(), -K[inner][:, bd] @ u[bd])
        assert np.abs(u_in - u[inner]).max() <= 1e-8

    def test_density_length_checked(self):
        model = cantilever()
        with pytest.raises(FemError):
            assemble(model, np.ones(3))


class TestSolve:
    def test_superposition(self):
        model = cantilever(10, 5)
        rng = np.random.default_rng(1)
        rho = rng.uniform(0.2, 1, model.grid.n_elements)
        K = assemble(model, rho)
        F1, F2 = rng.normal(size=(2, model.grid.n_dofs))
        F1[model.fixed_dofs] = F2[model.fixed_dofs] = 0
        U = solve(model, K, np.column_stack([F1, F2, 2 * F1 - 3 * F2]))
        np.testing.assert_allclose(U[:, 2], 2 * U[:, 0] - 3 * U[:, 1], atol=1e-8 * np.abs(U).max())
        assert np.all(U[model.fixed_dofs] == 0)

    def test_tip_load_bends_down(self):
        model = cantilever(16, 4)
        g = model.grid
        F = np.zeros(g.n_dofs)
        F[2 * g.node(g.nelx, 0) + 1] = -1.0
        U = solve(model, assemble(model, np.ones(g.n_elements)), F)
        assert U[2 * g.node(g.nelx, 0) + 1] < 0

    def test_cg_matches_direct(self):
        model = cantilever(12, 6)
        g = model.grid
        rho = np.random.default_rng(2).uniform(0.3, 1, g.n_elements)
        K = assemble(model, rho)
        F = np.zeros(g.n_dofs)
        F[2 * g.node(g.nelx, g.nely // 2) + 1] = -1
        U = solve(model, K, F)
        Ucg = solve_cg(model, K, F)
        assert np.linalg.norm(Ucg - U) <= 1e-6 * np.linalg.norm(U)

    def test_unconstrained_system_fails(self):
        g = GridSpec(2, 2)
        model = FemModel(g, MaterialLaw(), np.array([0]))  # one dof fixed: mechanism remains
        F = np.zeros(g.n_dofs)
        F[5] = 1
        with pytest.raises(SolverError):
            solve(model, assemble(model, np.ones(4)), F)

    def test_load_on_fixed_dof_rejected(self):
        g = GridSpec(2, 2)
        F = np.zeros(g.n_dofs)
        F[0] = 1
        with pytest.raises(FemError):
            FemModel(g, MaterialLaw(), np.array([0, 1]), loads=(F,))

    def test_von_mises_uniaxial(self):
        model = cantilever(4, 2)
        g = model.grid
        xy = g.node_coords()
        U = np.zeros(g.n_dofs)
        U[0::2] = 1e-3 * xy[:, 0]  # uniform eps_xx, no lateral strain
        vm = von_mises(model, np.ones(g.n_elements), U)
        nu = model.material.nu
        sx, sy = 1e-3 / (1 - nu**2), nu * 1e-3 / (1 - nu**2)
        np.testing.assert_allclose(vm, np.sqrt(sx**2 - sx * sy + sy**2), rtol=1e-12)


def test_density_field_validation():
    g = GridSpec(2, 2)
    with pytest.raises(FemError):
        DensityField(np.array([0.5, 0.5, 1.5, 0.5]), g)
    with pytest.raises(FemError):
        DensityField(np.ones(3), g)
    d = DensityField.uniform(g, 0.25)
    assert d.volume_fraction == 0.25
    with pytest.raises(ValueError):
        d.values[0] = 1.0
