"""Independent reference implementations used as test oracles."""
import numpy as np

LD = np.longdouble


def q4_stiffness_ld(nu):
    """Unit square plane-stress Q4 stiffness by 2x2 Gauss quadrature in extended precision."""
    nu = LD(nu)
    D = np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]], dtype=LD) / (1 - nu * nu)
    g = 1 / np.sqrt(LD(3))
    corners = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    K = np.zeros((8, 8), dtype=LD)
    for xi in (-g, g):
        for eta in (-g, g):
            B = np.zeros((3, 8), dtype=LD)
            for a, (xa, ya) in enumerate(corners):
                dx = LD(0.5) * xa * (1 + ya * eta)
                dy = LD(0.5) * ya * (1 + xa * xi)
                B[0, 2 * a] = dx
                B[1, 2 * a + 1] = dy
                B[2, 2 * a] = dy
                B[2, 2 * a + 1] = dx
            K += B.T @ D @ B / 4
    return K


def _band_cholesky_solve(A, b, bw):
    """Dense SPD solve restricted to a half-bandwidth ``bw`` (no pivoting)."""
    n = A.shape[0]
    L = A.copy()
    for k in range(n):
        hi = min(n, k + bw + 1)
        L[k, k] = np.sqrt(L[k, k])
        L[k + 1:hi, k] /= L[k, k]
        col = L[k + 1:hi, k]
        L[k + 1:hi, k + 1:hi] -= np.outer(col, col)
    y = b.copy()
    for k in range(n):
        lo = max(0, k - bw)
        y[k] = (y[k] - L[k, lo:k] @ y[lo:k]) / L[k, k]
    x = y.copy()
    for k in range(n - 1, -1, -1):
        hi = min(n, k + bw + 1)
        x[k] = (x[k] - L[k + 1:hi, k] @ x[k + 1:hi]) / L[k, k]
    return x


class MechanismOracle:
    """Extended-precision evaluation of sum_i w_i (U_i' F_in) / (U_i' F_i) on a unit-element grid."""

    def __init__(self, nelx, nely, nu, p, e_min, radius, fixed_dofs, springs, F_in, F_loads, weights):
        self.nelx, self.nely = nelx, nely
        self.p, self.e_min = LD(p), LD(e_min)
        self.ke = q4_stiffness_ld(nu)
        n_el = nelx * nely
        cx = np.array([e % nelx + 0.5 for e in range(n_el)])
        cy = np.array([e // nelx + 0.5 for e in range(n_el)])
        W = np.zeros((n_el, n_el), dtype=LD)
        for e in range(n_el):
            for f in range(n_el):
                d = np.sqrt(LD(cx[e] - cx[f]) ** 2 + LD(cy[e] - cy[f]) ** 2)
                W[e, f] = max(LD(0), LD(radius) - d)
        self.W = W / W.sum(axis=1, keepdims=True)
        n_dofs = 2 * (nelx + 1) * (nely + 1)
        self.free = np.setdiff1d(np.arange(n_dofs), fixed_dofs)
        self.springs = springs
        self.n_dofs = n_dofs
        self.F_in = np.asarray(F_in, dtype=LD)
        self.F = [np.asarray(F, dtype=LD) for F in F_loads]
        self.w = [LD(v) for v in weights]
        self.edofs = []
        for e in range(n_el):
            ex, ey = e % nelx, e // nelx
            n1 = ex * (nely + 1) + ey
            n2 = (ex + 1) * (nely + 1) + ey
            nodes = [n1, n2, n2 + 1, n1 + 1]
            self.edofs.append(np.array([d for n in nodes for d in (2 * n, 2 * n + 1)]))
        self.bw = 2 * (nely + 2) + 1

    def __call__(self, x):
        phys = self.W @ np.asarray(x, dtype=LD)
        E = self.e_min + phys**self.p * (1 - self.e_min)
        K = np.zeros((self.n_dofs, self.n_dofs), dtype=LD)
        for e, dofs in enumerate(self.edofs):
            K[np.ix_(dofs, dofs)] += E[e] * self.ke
        for dof, k in self.springs:
            K[dof, dof] += LD(k)
        Kf = K[np.ix_(self.free, self.free)]
        f = LD(0)
        for F, w in zip(self.F, self.w):
            U = _band_cholesky_solve(Kf, F[self.free], self.bw)
            f += w * (U @ self.F_in[self.free]) / (U @ F[self.free])
        return f

    def central_difference(self, x, e, h=LD(1) / 64):
        """Two-level Richardson-extrapolated central difference of component ``e``."""
        x = np.asarray(x, dtype=LD)

        def c(s):
            xp, xm = x.copy(), x.copy()
            xp[e] += s
            xm[e] -= s
            return (self(xp) - self(xm)) / (2 * s)

        d1, d2, d3 = c(h), c(h / 2), c(h / 4)
        r1, r2 = (4 * d2 - d1) / 3, (4 * d3 - d2) / 3
        return (16 * r2 - r1) / 15


def fd_gradient(model, x, loads, filt, h=1e-3):
    """Double-precision central differences with one Richardson step."""
    from simto.topopt import objective_and_sensitivities

    def f(v):
        return objective_and_sensitivities(model, v, loads, filt).objective

    def central(e, step):
        xp, xm = x.copy(), x.copy()
        xp[e] += step
        xm[e] -= step
        return (f(xp) - f(xm)) / (2 * step)

    g = np.empty_like(x)
    for e in range(x.size):
        g[e] = (4 * central(e, h / 2) - central(e, h)) / 3
    return g


def check_sensitivities(domain, loads, config, x, rtol=1e-4, atol=1e-12):
    """Compare adjoint sensitivities with central differences.

    Components the double-precision differences cannot resolve are re-evaluated
    with the extended-precision oracle.  Returns (ok mask, abs errors, adjoint, reference).
    """
    from simto.topopt import DensityFilter, build_model, objective_and_sensitivities

    grid = domain.grid
    assert grid.element_size == 1.0
    model, _ = build_model(domain, loads, config)
    filt = DensityFilter(grid, config.filter_radius)
    adj = objective_and_sensitivities(model, x, loads, filt).sensitivity
    ref = fd_gradient(model, x, loads, filt)
    err = np.abs(adj - ref)
    ok = (err <= rtol * np.abs(ref)) | (err <= atol)
    if not ok.all():
        m = config.material
        oracle = MechanismOracle(grid.nelx, grid.nely, m.nu, m.p, m.e_min, config.filter_radius, model.fixed_dofs,
                                 model.springs, model.loads[0], model.loads[1:], [lc.weight for lc in loads])
        for e in np.flatnonzero(~ok):
            ref[e] = float(oracle.central_difference(x, e))
        err = np.abs(adj - ref)
        ok = (err <= rtol * np.abs(ref)) | (err <= atol)
    return ok, err, adj, ref
