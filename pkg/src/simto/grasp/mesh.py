"""Triangle meshes for fingers (from density fields) and objects (from polygons)."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import Delaunay

from ..fem import DensityField


class MeshingError(Exception):
    pass


class InfeasibleDesign(MeshingError):
    """The thresholded design cannot be mounted (e.g. no material at the fixed port)."""


@dataclass(frozen=True)
class Ports:
    fixed: np.ndarray  # mesh-local node indices
    input: np.ndarray
    input_direction: tuple[float, float]  # unit vector in the design frame


@dataclass(frozen=True)
class BodyMesh:
    nodes: np.ndarray
    triangles: np.ndarray
    role: str = "object"
    grid_nodes: np.ndarray | None = None  # design-grid node id of each mesh node
    ports: Ports | None = None
    element_size: float = 1.0

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 2)
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if tris.size == 0:
            raise MeshingError("mesh has no triangles")
        area = signed_areas(nodes, tris)
        if np.any(area <= 0):
            raise MeshingError("triangles must be positively oriented and non-degenerate")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "triangles", tris)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def boundary_edges(self) -> np.ndarray:
        return boundary_edges(self.triangles)

    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges())

    def area(self) -> float:
        return float(signed_areas(self.nodes, self.triangles).sum())


def signed_areas(nodes: np.ndarray, tris: np.ndarray) -> np.ndarray:
    a, b, c = nodes[tris[:, 0]], nodes[tris[:, 1]], nodes[tris[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def boundary_edges(tris: np.ndarray) -> np.ndarray:
    """Directed edges used by exactly one triangle; interior lies to their left."""
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    key = np.sort(e, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return e[counts[inv.ravel()] == 1]


def largest_component(solid: np.ndarray) -> np.ndarray:
    """Mask of the largest 4-connected component (ties go to the first in scan order)."""
    labels, n = ndimage.label(solid)
    if n == 0:
        return np.zeros_like(solid, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def mesh_from_density(rho: DensityField, threshold: float = 0.5, domain=None) -> BodyMesh:
    """Two triangles per kept element of the largest 4-connected solid component.

    With ``domain`` (a :class:`~simto.topopt.DesignDomain`) the port nodes are
    attached; a component without fixed-port nodes raises :class:`InfeasibleDesign`.
    """
    grid = rho.grid
    solid = rho.image() >= threshold
    if not solid.any():
        raise MeshingError("no element reaches the density threshold")
    keep = largest_component(solid)
    ey, ex = np.nonzero(keep)
    elems = ey * grid.nelx + ex
    quads = grid.element_nodes[elems]
    used, local = np.unique(quads, return_inverse=True)
    local = local.reshape(quads.shape)
    tris = np.concatenate([local[:, [0, 1, 2]], local[:, [0, 2, 3]]])
    nodes = grid.node_coords()[used]
    ports = None
    if domain is not None:
        fixed = np.flatnonzero(np.isin(used, domain.fixed_port))
        inp = np.flatnonzero(np.isin(used, domain.input_port))
        if fixed.size == 0:
            raise InfeasibleDesign("no material at fixed port")
        ports = Ports(fixed, inp, tuple(float(v) for v in domain.input_direction))
    return BodyMesh(nodes, tris, "gripper-left", used, ports, grid.element_size)


def points_in_polygon(points: np.ndarray, edges_a: np.ndarray, edges_b: np.ndarray) -> np.ndarray:
    """Even-odd test of many points against a set of closed edge loops."""
    px = points[:, 0][:, None]
    py = points[:, 1][:, None]
    ax, ay = edges_a[:, 0][None, :], edges_a[:, 1][None, :]
    bx, by = edges_b[:, 0][None, :], edges_b[:, 1][None, :]
    straddle = (ay > py) != (by > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = ax + (py - ay) * (bx - ax) / (by - ay)
    hits = straddle & (px < xcross)
    return (hits.sum(axis=1) % 2) == 1


def _resample_loop(poly: np.ndarray, spacing: float) -> np.ndarray:
    out = []
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / spacing)))
        t = np.arange(n)[:, None] / n
        out.append(a + t * (b - a))
    return np.concatenate(out)


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def triangulate_polygon(poly, spacing: float = 4.0, role: str = "object") -> BodyMesh:
    """Delaunay mesh of a simple counter-clockwise polygon with roughly uniform spacing."""
    poly = np.asarray(poly, dtype=float)
    if poly.ndim != 2 or poly.shape[0] < 3:
        raise MeshingError("polygon needs at least three vertices")
    if polygon_area(poly) < 0:
        poly = poly[::-1]
    boundary = _resample_loop(poly, spacing)
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    # hexagonal interior lattice
    dy = spacing * np.sqrt(3) / 2
    ys = np.arange(lo[1] + dy / 2, hi[1], dy)
    pts = []
    for k, y in enumerate(ys):
        xs = np.arange(lo[0] + (spacing / 2 if k % 2 else 0.0), hi[0], spacing)
        pts.append(np.column_stack([xs, np.full(xs.size, y)]))
    interior = np.concatenate(pts) if pts else np.empty((0, 2))
    a, b = poly, np.roll(poly, -1, axis=0)
    if interior.size:
        inside = points_in_polygon(interior, a, b)
        interior = interior[inside]
        d = _point_segment_distance(interior, a, b).min(axis=1)
        interior = interior[d > 0.45 * spacing]
    pts = np.concatenate([boundary, interior])
    tri = Delaunay(pts).simplices
    cent = pts[tri].mean(axis=1)
    tri = tri[points_in_polygon(cent, a, b)]
    area = signed_areas(pts, tri)
    tri[area < 0] = tri[area < 0][:, [0, 2, 1]]
    tri = tri[np.abs(area) > 1e-6 * spacing**2]
    used, local = np.unique(tri, return_inverse=True)
    mesh = BodyMesh(pts[used], local.reshape(-1, 3), role, element_size=spacing)
    return mesh


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    ap = p[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("ijk,jk->ij", ap, ab) / np.einsum("jk,jk->j", ab, ab), 0.0, 1.0)
    c = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(p[:, None, :] - c, axis=2)


def load_polygon(path) -> np.ndarray:
    """Read one ``x,y`` vertex (mm) per line; blank lines and ``#`` comments are skipped."""
    pts = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        x, y = line.split(",")
        pts.append((float(x), float(y)))
    if len(pts) < 3:
        raise MeshingError(f"{path}: polygon needs at least three vertices")
    return np.array(pts)


def write_polygon(path, poly) -> None:
    lines = [f"{x:.6f},{y:.6f}" for x, y in np.asarray(poly)]
    Path(path).write_text("\n".join(lines) + "\n")
