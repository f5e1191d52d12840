"""Multi-load compliant-mechanism topology optimization.

Maximizes ``sum_i w_i * (U_i' K U_in) / (U_i' K U_i)`` under a volume
equality with a cone density filter and an optimality-criteria update.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import (
    DensityField,
    Factorization,
    FemError,
    FemModel,
    GridSpec,
    MaterialLaw,
    assemble,
    element_stiffness,
    simp_derivative,
)

log = logging.getLogger(__name__)


class OptimizationError(Exception):
    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class LoadCase:
    position: tuple[float, float]
    force: tuple[float, float]
    weight: float

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError(f"load weight must be positive, got {self.weight}")
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "force", tuple(float(v) for v in self.force))

    @classmethod
    def from_force(cls, position, force) -> "LoadCase":
        return cls(position, force, float(np.hypot(*force)))


@dataclass(frozen=True)
class ContactLoadSet:
    loads: tuple[LoadCase, ...]

    def __post_init__(self):
        object.__setattr__(self, "loads", tuple(self.loads))

    def __len__(self):
        return len(self.loads)

    def __iter__(self):
        return iter(self.loads)

    def validate(self, grid: GridSpec):
        if not self.loads:
            raise ValueError("a load set needs at least one load")
        tol = 1e-9
        for lc in self.loads:
            x, y = lc.position
            if not (-tol <= x <= grid.width + tol and -tol <= y <= grid.height + tol):
                raise ValueError(f"load at {lc.position} lies outside the {grid.width}x{grid.height} domain")

    def scaled(self, factor: float) -> "ContactLoadSet":
        return ContactLoadSet(tuple(LoadCase(lc.position, lc.force, lc.weight * factor) for lc in self.loads))


def baseline_loads(grid: GridSpec) -> ContactLoadSet:
    """Single unit dummy load pointing -y at the free lower-right corner."""
    return ContactLoadSet((LoadCase((grid.width, 0.0), (0.0, -1.0), 1.0),))


def edge_segment(grid: GridSpec, edge: str, start: float, stop: float) -> np.ndarray:
    """Node indices on a domain edge whose coordinate along the edge lies in [start, stop] mm."""
    h = grid.element_size
    if edge in ("left", "right"):
        i = 0 if edge == "left" else grid.nelx
        js = [j for j in range(grid.nely + 1) if start - 1e-9 <= j * h <= stop + 1e-9]
        return np.array([grid.node(i, j) for j in js], dtype=np.int64)
    if edge in ("bottom", "top"):
        j = 0 if edge == "bottom" else grid.nely
        is_ = [i for i in range(grid.nelx + 1) if start - 1e-9 <= i * h <= stop + 1e-9]
        return np.array([grid.node(i, j) for i in is_], dtype=np.int64)
    raise ValueError(f"unknown edge {edge!r}")


@dataclass(frozen=True)
class DesignDomain:
    grid: GridSpec
    fixed_port: np.ndarray
    input_port: np.ndarray
    input_force_angle: float = 190.0  # degrees CCW from +x: -x rotated 10 deg toward -y
    volume_fraction: float = 0.3

    def __post_init__(self):
        fp = np.unique(np.asarray(self.fixed_port, dtype=np.int64))
        ip = np.unique(np.asarray(self.input_port, dtype=np.int64))
        if fp.size == 0 or ip.size == 0:
            raise ValueError("ports must contain at least one node")
        if np.intersect1d(fp, ip).size:
            raise ValueError("fixed and input ports overlap")
        if not 0.05 <= self.volume_fraction <= 0.95:
            raise ValueError("volume fraction must lie in [0.05, 0.95]")
        object.__setattr__(self, "fixed_port", fp)
        object.__setattr__(self, "input_port", ip)

    @classmethod
    def default(cls, grid: GridSpec | None = None, volume_fraction: float = 0.3,
                port_length: float = 10.0, input_force_angle: float = 190.0) -> "DesignDomain":
        """Fixed port on the top ``port_length`` mm of the left edge, input port on the bottom."""
        grid = grid or GridSpec(150, 70, 1.0)
        fixed = edge_segment(grid, "left", grid.height - port_length, grid.height)
        inp = edge_segment(grid, "left", 0.0, port_length)
        return cls(grid, fixed, inp, input_force_angle, volume_fraction)

    def with_volume_fraction(self, v_f: float) -> "DesignDomain":
        return DesignDomain(self.grid, self.fixed_port, self.input_port, self.input_force_angle, v_f)

    @property
    def input_direction(self) -> np.ndarray:
        a = math.radians(self.input_force_angle)
        return np.array([math.cos(a), math.sin(a)])

    @property
    def fixed_dofs(self) -> np.ndarray:
        return np.sort(np.concatenate([2 * self.fixed_port, 2 * self.fixed_port + 1]))

    def input_force(self) -> np.ndarray:
        """Unit-magnitude input force shared equally over the input-port nodes."""
        F = np.zeros(self.grid.n_dofs)
        share = self.input_direction / self.input_port.size
        F[2 * self.input_port] = share[0]
        F[2 * self.input_port + 1] = share[1]
        return F


@dataclass(frozen=True)
class TopOptConfig:
    filter_radius: float = 2.4  # in element widths
    max_iterations: int = 100
    change_tolerance: float = 0.01
    oc_move_limit: float = 0.2
    oc_damping: float = 0.5
    oc_bisection_tolerance: float = 1e-4
    k_in: float = 0.1
    k_out: float = 0.1
    material: MaterialLaw = field(default_factory=MaterialLaw)

    def __post_init__(self):
        if self.filter_radius < 1:
            raise ValueError("filter radius must be at least one element")
        if not 0 < self.oc_move_limit < 1:
            raise ValueError("move limit must lie in (0, 1)")
        if not 0 < self.oc_damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


class DensityFilter:
    """Cone-weight density filter ``H x / Hs`` with weights ``max(0, r - dist)``."""

    def __init__(self, grid: GridSpec, radius: float):
        self.grid = grid
        self.radius = float(radius)
        h = grid.element_size
        reach = int(math.ceil(self.radius / h))
        ey, ex = np.divmod(np.arange(grid.n_elements), grid.nelx)
        rows, cols, vals = [], [], []
        for dy in range(-reach, reach + 1):
            for dx in range(-reach, reach + 1):
                w = self.radius - h * math.hypot(dx, dy)
                if w <= 0:
                    continue
                nx, ny = ex + dx, ey + dy
                ok = (nx >= 0) & (nx < grid.nelx) & (ny >= 0) & (ny < grid.nely)
                rows.append(np.flatnonzero(ok))
                cols.append(ny[ok] * grid.nelx + nx[ok])
                vals.append(np.full(ok.sum(), w))
        n = grid.n_elements
        if rows:
            self.H = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        else:
            # radius below the element spacing: only the element itself
            self.H = sp.identity(n, format="csr")
        self.Hs = np.asarray(self.H.sum(axis=1)).ravel()

    def apply(self, x) -> np.ndarray:
        return (self.H @ np.asarray(x, dtype=float)) / self.Hs

    def adjoint(self, g) -> np.ndarray:
        """Transpose of :meth:`apply`, used to chain sensitivities back to the design variables."""
        return self.H.T @ (np.asarray(g, dtype=float) / self.Hs)


def density_filter(rho: DensityField, radius: float) -> DensityField:
    """Filter ``rho`` with a cone of ``radius`` mm."""
    out = DensityFilter(rho.grid, radius).apply(rho.values)
    return DensityField(np.clip(out, 0.0, 1.0), rho.grid)


def build_model(domain: DesignDomain, loads: ContactLoadSet, config: TopOptConfig) -> tuple[FemModel, np.ndarray]:
    """FEM model carrying ``F_in`` and one force vector per load, plus the load node indices.

    Each load node gets a ``k_out`` spring on both dofs; the input port shares ``k_in``.
    """
    grid = domain.grid
    loads.validate(grid)
    nodes = np.array([grid.nearest_node(lc.position) for lc in loads], dtype=np.int64)
    springs = []
    k_share = config.k_in / domain.input_port.size
    for n in domain.input_port:
        springs += [(2 * n, k_share), (2 * n + 1, k_share)]
    for n in nodes:
        springs += [(2 * n, config.k_out), (2 * n + 1, config.k_out)]
    forces = [domain.input_force()]
    for n, lc in zip(nodes, loads):
        F = np.zeros(grid.n_dofs)
        F[2 * n], F[2 * n + 1] = lc.force
        forces.append(F)
    fixed = set(domain.fixed_dofs.tolist())
    for n in nodes:
        if 2 * n in fixed or 2 * n + 1 in fixed:
            raise FemError(f"load node {n} lies on the fixed port")
    model = FemModel(grid, config.material, domain.fixed_dofs, tuple(springs), tuple(forces))
    return model, nodes


@dataclass
class Evaluation:
    objective: float
    sensitivity: np.ndarray
    mpe: np.ndarray
    se: np.ndarray
    U: np.ndarray  # columns: U_in, U_1..U_N


def objective_and_sensitivities(model: FemModel, rho, loads: ContactLoadSet,
                                filt: DensityFilter | None = None) -> Evaluation:
    """Objective and its gradient.

    ``model.loads`` must be ``(F_in, F_1, ..., F_N)`` as built by :func:`build_model`.
    With ``filt`` given, ``rho`` is the design variable; it is filtered first and
    the gradient is returned with respect to the unfiltered values.
    """
    x = rho.values if isinstance(rho, DensityField) else np.asarray(rho, dtype=float)
    # filtering a field in [0, 1] can overshoot by an ulp
    phys = np.clip(filt.apply(x), 0.0, 1.0) if filt is not None else x
    weights = np.array([lc.weight for lc in loads])
    if len(model.loads) != weights.size + 1:
        raise FemError("model must carry the input force followed by one force per load")
    K = assemble(model, phys)
    F = np.column_stack(model.loads)
    U = Factorization(model, K).solve(F)
    U_in, U_out = U[:, 0], U[:, 1:]
    mpe = U_out.T @ F[:, 0]
    se = np.einsum("ij,ij->j", U_out, F[:, 1:])
    if np.any(se <= 0):
        raise FemError("non-positive strain energy; degenerate load case")
    f = float(np.sum(weights * mpe / se))

    ke = element_stiffness(model.material)
    edof = model.grid.edof
    ue_in = U_in[edof]
    dE = simp_derivative(phys, model.material)
    grad = np.zeros(model.grid.n_elements)
    for i in range(weights.size):
        ue_i = U_out[edof, i]
        d_mpe = -dE * np.einsum("ej,jk,ek->e", ue_i, ke, ue_in)
        d_se = -dE * np.einsum("ej,jk,ek->e", ue_i, ke, ue_i)
        grad += weights[i] * (d_mpe * se[i] - mpe[i] * d_se) / se[i] ** 2
    if filt is not None:
        grad = filt.adjoint(grad)
    return Evaluation(f, grad, mpe, se, U)


def oc_update(rho, df_drho, dv_drho, v_f: float, config: TopOptConfig) -> np.ndarray:
    """Optimality-criteria step for a maximization problem under ``mean(rho) == v_f``.

    Non-positive sensitivities get a vanishing ascent factor so those elements
    fall to their lower move bound.
    """
    x = np.asarray(rho, dtype=float)
    df = np.asarray(df_drho, dtype=float)
    dv = np.asarray(dv_drho, dtype=float)
    if not (x.shape == df.shape == dv.shape):
        raise ValueError("rho, df and dv must share a shape")
    m, eta, tol = config.oc_move_limit, config.oc_damping, config.oc_bisection_tolerance
    lo = np.maximum(0.0, x - m)
    hi = np.minimum(1.0, x + m)
    peak = np.max(np.abs(df)) if df.size else 0.0
    floor = 1e-12 * peak if peak > 0 else 1.0
    ratio = np.maximum(df, floor) / dv

    def step(log_lam):
        return np.clip(x * (ratio * math.exp(-log_lam)) ** eta, lo, hi)

    a, b = math.log(ratio.min()) - 700.0 / eta, math.log(ratio.max()) + 700.0 / eta
    a, b = max(a, -700.0), min(b, 700.0)
    va, vb = step(a).mean() - v_f, step(b).mean() - v_f
    if abs(va) <= tol:
        return step(a)
    if abs(vb) <= tol:
        return step(b)
    if va < 0 or vb > 0:
        raise OptimizationError(f"cannot bracket the volume multiplier (residuals {va:.3e}, {vb:.3e})")
    for _ in range(200):
        mid = 0.5 * (a + b)
        new = step(mid)
        res = new.mean() - v_f
        if abs(res) <= tol:
            return new
        if res > 0:
            a = mid
        else:
            b = mid
    raise OptimizationError("volume bisection did not converge in 200 iterations")


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    max_change: float
    volume: float


@dataclass
class OptimizationLog:
    records: list[IterationRecord] = field(default_factory=list)
    design_variables: np.ndarray | None = None
    converged: bool = False

    def __len__(self):
        return len(self.records)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])


def optimize(domain: DesignDomain, loads: ContactLoadSet, config: TopOptConfig | None = None,
             rho0: DensityField | None = None, callback=None) -> tuple[DensityField, OptimizationLog]:
    """Run filter -> assemble -> solve -> sensitivities -> OC until the change drops below tolerance.

    Returns the filtered (physical) density of the last design and the iteration log.
    """
    config = config or TopOptConfig()
    grid = domain.grid
    if rho0 is None:
        rho0 = DensityField.uniform(grid, domain.volume_fraction)
    history = OptimizationLog(design_variables=rho0.values.copy())
    if config.max_iterations == 0:
        return rho0, history
    try:
        model, _ = build_model(domain, loads, config)
    except (FemError, ValueError) as exc:
        raise OptimizationError(str(exc), history) from exc
    filt = DensityFilter(grid, config.filter_radius * grid.element_size)
    x = rho0.values.copy()
    dv = np.full(x.size, 1.0 / x.size)
    for it in range(1, config.max_iterations + 1):
        try:
            ev = objective_and_sensitivities(model, x, loads, filt)
            x_new = oc_update(x, ev.sensitivity, dv, domain.volume_fraction, config)
        except (FemError, OptimizationError) as exc:
            history.design_variables = x
            raise OptimizationError(f"iteration {it}: {exc}", history) from exc
        change = float(np.max(np.abs(x_new - x)))
        x = x_new
        history.records.append(IterationRecord(it, ev.objective, change, float(x.mean())))
        log.debug("it %3d  f=%.6e  change=%.4f  vol=%.4f", it, ev.objective, change, x.mean())
        if callback is not None:
            callback(it, x)
        if change < config.change_tolerance:
            history.converged = True
            break
    history.design_variables = x
    phys = np.clip(filt.apply(x), 0.0, 1.0)
    return DensityField(phys, grid), history


def input_displacement(domain: DesignDomain, loads: ContactLoadSet, design: DensityField,
                       config: TopOptConfig | None = None) -> np.ndarray:
    """Displacement field under ``F_in`` alone for an (already filtered) design."""
    config = config or TopOptConfig()
    model, _ = build_model(domain, loads, config)
    K = assemble(model, design)
    return Factorization(model, K).solve(model.loads[0])
