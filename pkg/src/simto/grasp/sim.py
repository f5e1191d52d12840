"""Implicit 2D soft-body grasp simulation.

Two mirrored corotational-triangle fingers squeeze a deformable object resting
on a rigid ground line, then lift it.  Each step minimizes the backward-Euler
incremental potential (inertia, elasticity, gravity, penalty contact and a
lagged smoothed-Coulomb friction potential) with a line-searched Newton solve.

Internal units are mm, s, kg; forces are reported in N and stresses in Pa.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..linalg import CholeskySolver, NotPositiveDefinite
from .mesh import BodyMesh, boundary_edges, points_in_polygon

log = logging.getLogger(__name__)

FORCE_TO_N = 1e-3  # kg mm / s^2 -> N
STRESS_TO_PA = 1e3  # kg / (mm s^2) -> Pa

GRIPPER_IN_OBJECT, OBJECT_IN_GRIPPER, GROUND = 0, 1, 2
SHIFT_MIN, SHIFT_MAX = 1e-6, 1.0  # diagonal shift range for indefinite Newton systems


class SimulationError(Exception):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class SimConfig:
    E_g: float = 1.39e6  # Pa
    E_o: float = 1.39e6
    nu_g: float = 0.4
    nu_o: float = 0.4
    d_c: float = 80.0  # mm
    d_l: float = 30.0
    t: float = 4.0  # s
    N_t: int = 400  # 10 ms steps; the implicit integrator needs no explicit-stability bound
    friction_mu: float = 0.5
    gravity: float = 9.81  # m/s^2 along world -y
    material_density: float = 1000.0  # kg/m^3
    contact_stiffness: float = 100.0  # per-node penalty as a multiple of E * thickness
    thickness: float = 10.0  # mm, out-of-plane extent of every body
    friction_velocity: float = 1.0  # mm/s, static/kinetic smoothing width
    seed: int = 0
    pose_jitter: float = 0.0  # mm, uniform jitter on the object position
    finger_gap: float = 5.0  # mm between the undisturbed object and each finger
    base_height: float = 0.0  # mm, lowest finger point above the ground
    frame_rotation: float = 90.0  # deg, design frame -> world for the left finger
    ground: bool = True
    newton_tol: float = 1e-5  # mm, infinity norm of the Newton step
    newton_force_tol: float = 1e-3  # N, infinity norm of the residual nodal force
    max_newton: int = 60
    store_positions: str = "contact"  # "all", "contact" or "none"

    def __post_init__(self):
        if self.N_t < 2 or self.N_t % 2:
            raise ValueError("N_t must be an even number >= 2")
        if self.d_c < 0 or self.d_l < 0:
            raise ValueError("d_c and d_l must be non-negative")
        if not self.t > 0:
            raise ValueError("duration must be positive")
        if self.friction_mu < 0:
            raise ValueError("friction coefficient must be non-negative")
        if self.store_positions not in ("all", "contact", "none"):
            raise ValueError("store_positions must be 'all', 'contact' or 'none'")

    @property
    def dt(self) -> float:
        return self.t / self.N_t


@dataclass(frozen=True)
class Pose:
    rotation: float = 0.0  # degrees about the out-of-plane axis
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        if not all(math.isfinite(v) for v in (self.rotation, *self.translation)):
            raise ValueError("pose must be finite")


@dataclass
class ContactEvent:
    finger: str  # "left" or "right"
    node: int  # finger mesh node id
    point: np.ndarray  # world position of the contact, mm
    force: np.ndarray  # force on the object by the gripper, world frame, N
    normal: np.ndarray  # unit contact normal pointing into the object


@dataclass
class StepRecord:
    step: int
    time: float
    contacts: list[ContactEvent]
    grounded: bool
    object_stress: float  # peak von Mises, Pa
    object_centroid: np.ndarray
    object_momentum: np.ndarray  # kg mm / s
    newton_iterations: int = 0


@dataclass
class SimTrace:
    config: SimConfig
    steps: list[StepRecord]
    positions: list  # per step: (n_nodes, 2) array or None
    slices: dict  # body name -> slice into the node arrays
    reference: np.ndarray  # left-finger node coordinates in the design frame
    rest_positions: np.ndarray
    masses: np.ndarray
    grid_nodes: np.ndarray | None = None

    def __len__(self):
        return len(self.steps)

    def finger_positions(self, step: int, finger: str = "left") -> np.ndarray | None:
        pos = self.positions[step]
        return None if pos is None else pos[self.slices[finger]]

    def to_jsonl(self, path, positions: bool = False) -> None:
        with open(path, "w") as fh:
            for rec, pos in zip(self.steps, self.positions):
                row = {
                    "step": rec.step,
                    "time": rec.time,
                    "grounded": rec.grounded,
                    "object_stress": rec.object_stress,
                    "object_centroid": rec.object_centroid.tolist(),
                    "contacts": [
                        {"finger": c.finger, "node": c.node, "point": c.point.tolist(),
                         "force": c.force.tolist(), "normal": c.normal.tolist()}
                        for c in rec.contacts
                    ],
                }
                if positions and pos is not None:
                    row["positions"] = pos.tolist()
                fh.write(json.dumps(row) + "\n")


def _rot(deg: float) -> np.ndarray:
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def mirror_mesh(mesh: BodyMesh, role: str = "gripper-right") -> BodyMesh:
    """Reflect across the vertical axis x = 0, keeping triangles positively oriented."""
    nodes = mesh.nodes * np.array([-1.0, 1.0])
    return BodyMesh(nodes, mesh.triangles[:, [0, 2, 1]], role, mesh.grid_nodes, mesh.ports, mesh.element_size)


class _Scene:
    """Flattened multi-body state: rest shapes, masses, element data and contact topology."""

    def __init__(self, finger: BodyMesh, obj: BodyMesh, poses, config: SimConfig):
        if finger.ports is None:
            raise ValueError("finger mesh needs port information (mesh it with a design domain)")
        P_g, P_o = poses
        self.config = config
        rng = np.random.default_rng(config.seed)

        # object: centroid at x = 0, resting on the ground, then perturbed by its pose
        o = obj.nodes - obj.nodes.mean(axis=0)
        half_width = np.max(np.abs(o[:, 0]))
        o = o @ _rot(P_o.rotation).T
        o[:, 1] -= o[:, 1].min()
        o += np.asarray(P_o.translation)
        if config.pose_jitter > 0:
            o += rng.uniform(-config.pose_jitter, config.pose_jitter, size=2)

        # left finger: design frame rotated into the world, inner edge facing the object
        Rf = _rot(config.frame_rotation)
        fl = finger.nodes @ Rf.T
        fl += np.array([-(half_width + config.finger_gap) - fl[:, 0].max(), config.base_height - fl[:, 1].min()])
        pivot = fl[finger.ports.fixed].mean(axis=0)
        fl = (fl - pivot) @ _rot(P_g.rotation).T + pivot + np.asarray(P_g.translation)
        fr = fl * np.array([-1.0, 1.0])

        nl, no = finger.n_nodes, obj.n_nodes
        self.slices = {"left": slice(0, nl), "right": slice(nl, 2 * nl), "object": slice(2 * nl, 2 * nl + no)}
        self.n = 2 * nl + no
        self.X0 = np.concatenate([fl, fr, o])
        self.finger = finger
        self.obj = obj

        tl = finger.triangles
        tr = finger.triangles[:, [0, 2, 1]] + nl
        to = obj.triangles + 2 * nl
        self.tris = np.concatenate([tl, tr, to])
        ntf = tl.shape[0]
        E = np.concatenate([np.full(2 * ntf, config.E_g), np.full(to.shape[0], config.E_o)]) * 1e-3
        nu = np.concatenate([np.full(2 * ntf, config.nu_g), np.full(to.shape[0], config.nu_o)])
        self.mu = E / (2 * (1 + nu))
        self.lam = E * nu / (1 - nu**2)
        self.obj_tris = slice(2 * ntf, self.tris.shape[0])

        X = self.X0
        a, b, c = X[self.tris[:, 0]], X[self.tris[:, 1]], X[self.tris[:, 2]]
        Dm = np.stack([b - a, c - a], axis=2)
        self.area = 0.5 * np.linalg.det(Dm)
        if np.any(self.area <= 0):
            raise ValueError("placed meshes contain inverted triangles")
        self.Dm_inv = np.linalg.inv(Dm)
        self.T = config.thickness
        self.vol = self.area * self.T
        rho = config.material_density * 1e-9
        self.mass = np.zeros(self.n)
        np.add.at(self.mass, self.tris.ravel(), np.repeat(rho * self.vol / 3, 3))

        G = self.Dm_inv  # row k: gradient of the shape function of node k + 1
        grads = np.concatenate([-G.sum(axis=1, keepdims=True), G], axis=1)  # (m, 3, 2)
        dofs = np.empty((self.tris.shape[0], 6), dtype=np.int64)
        dofs[:, 0::2] = 2 * self.tris
        dofs[:, 1::2] = 2 * self.tris + 1
        self.tri_dofs = dofs
        # d vec(F) / d x_e, vec row-major (F00, F01, F10, F11), x_e = (x0, y0, x1, y1, x2, y2)
        self.dFdx = np.zeros((self.tris.shape[0], 4, 6))
        for k in range(3):
            for i in range(2):
                for j in range(2):
                    self.dFdx[:, 2 * i + j, 2 * k + i] = grads[:, k, j]

        # kinematic port nodes of both fingers
        ports = finger.ports
        d_in = Rf @ np.asarray(ports.input_direction)
        d_in = _rot(P_g.rotation) @ d_in
        self.input_dir = {"left": d_in, "right": d_in * np.array([-1.0, 1.0])}
        self.port_nodes = {
            side: (np.asarray(ports.fixed) + self.slices[side].start, np.asarray(ports.input) + self.slices[side].start)
            for side in ("left", "right")
        }
        kin = np.concatenate([np.concatenate(v) for v in self.port_nodes.values()])
        self.kinematic = np.zeros(self.n, dtype=bool)
        self.kinematic[kin] = True
        free_dof = np.repeat(~self.kinematic, 2)
        self.free_dofs = np.flatnonzero(free_dof)
        self.dof_map = -np.ones(2 * self.n, dtype=np.int64)
        self.dof_map[self.free_dofs] = np.arange(self.free_dofs.size)

        # fixed sparsity pattern of the elastic + inertia Hessian over free dofs; pattern_slot maps
        # every element-block entry (then every mass entry) to its position in the CSC data array
        self.dFdxT = np.ascontiguousarray(np.transpose(self.dFdx, (0, 2, 1)))
        self.mass_diag = np.repeat(self.mass, 2)
        rows = np.concatenate([np.repeat(self.tri_dofs, 6, axis=1).ravel(), np.arange(2 * self.n)])
        cols = np.concatenate([np.tile(self.tri_dofs, (1, 6)).ravel(), np.arange(2 * self.n)])
        rm, cm = self.dof_map[rows], self.dof_map[cols]
        keep = (rm >= 0) & (cm >= 0)
        m = self.free_dofs.size
        pat = sp.csc_matrix((np.ones(keep.sum()), (rm[keep], cm[keep])), shape=(m, m))
        pat.sum_duplicates()
        pat.sort_indices()
        self.pattern = pat
        # slot lookup: linear index -> data position
        lin = pat.indices.astype(np.int64) + m * np.repeat(np.arange(m), np.diff(pat.indptr))
        slot = np.full(rows.size, pat.nnz, dtype=np.int64)  # dropped entries go to a dummy slot
        q = rm[keep] + m * cm[keep].astype(np.int64)
        slot[keep] = np.searchsorted(lin, q)
        self.pattern_slot = slot

        # contact topology
        self.finger_edges = boundary_edges(finger.triangles)
        self.finger_bnodes = np.unique(self.finger_edges)
        self.obj_edges = boundary_edges(obj.triangles) + 2 * nl
        self.obj_bnodes = np.unique(self.obj_edges)
        self.edges = {"left": self.finger_edges, "right": self.finger_edges[:, ::-1] + nl}
        self.k_grip = config.contact_stiffness * config.E_g * 1e-3 * self.T
        self.k_ground = config.contact_stiffness * config.E_o * 1e-3 * self.T
        self.g = config.gravity * 1e3

    def targets(self, step: int) -> np.ndarray:
        """Prescribed port positions after ``step`` steps."""
        cfg = self.config
        half = cfg.N_t // 2
        comp = cfg.d_c * min(step, half) / half
        lift = cfg.d_l * max(0, step - half) / half
        out = self.X0.copy()
        for side, (fixed, inp) in self.port_nodes.items():
            out[inp] += comp * self.input_dir[side]
            out[np.concatenate([fixed, inp])] += np.array([0.0, lift])
        return out


def _segment_closest(p, a, b):
    ab = b - a
    L2 = np.einsum("...k,...k->...", ab, ab)
    t = np.clip(np.einsum("...k,...k->...", p - a, ab) / np.maximum(L2, 1e-300), 0.0, 1.0)
    c = a + t[..., None] * ab
    return t, c


@dataclass
class _Contacts:
    kind: np.ndarray
    p: np.ndarray
    a: np.ndarray
    b: np.ndarray
    t: np.ndarray
    n: np.ndarray  # unit normal: direction the penetrating node is pushed
    d: np.ndarray  # penetration depth, mm
    k: np.ndarray
    side: np.ndarray  # 0 left, 1 right, -1 ground

    @property
    def size(self):
        return self.p.size

    @property
    def normal_force(self):
        return self.k * self.d

    def keys(self):
        return list(zip(self.kind.tolist(), self.p.tolist()))


def _empty_contacts():
    z = np.zeros(0)
    zi = np.zeros(0, dtype=np.int64)
    return _Contacts(zi, zi, zi, zi, z, np.zeros((0, 2)), z, z, zi)


def _penetrations(points_idx, x, edges, k, kind, side):
    """Nodes in ``points_idx`` lying inside the region bounded by ``edges``, pushed out through the nearest edge."""
    if points_idx.size == 0 or edges.size == 0:
        return None
    ea, eb = x[edges[:, 0]], x[edges[:, 1]]
    lo = np.minimum(ea, eb).min(axis=0)
    hi = np.maximum(ea, eb).max(axis=0)
    P = x[points_idx]
    near = np.all((P >= lo) & (P <= hi), axis=1)
    if not near.any():
        return None
    idx = points_idx[near]
    P = P[near]
    inside = points_in_polygon(P, ea, eb)
    if not inside.any():
        return None
    idx, P = idx[inside], P[inside]
    t, c = _segment_closest(P[:, None, :], ea[None], eb[None])
    dist = np.linalg.norm(P[:, None, :] - c, axis=2)
    j = np.argmin(dist, axis=1)
    rows = np.arange(idx.size)
    d = dist[rows, j]
    cj = c[rows, j]
    tj = t[rows, j]
    n = cj - P
    e = eb[j] - ea[j]
    edge_normal = np.column_stack([e[:, 1], -e[:, 0]]) / np.linalg.norm(e, axis=1)[:, None]
    small = d < 1e-12
    n[~small] /= d[~small, None]
    n[small] = edge_normal[small]
    return _Contacts(np.full(idx.size, kind), idx, edges[j, 0], edges[j, 1], tj, n, d,
                     np.full(idx.size, k), np.full(idx.size, side))


def _concat(parts):
    parts = [p for p in parts if p is not None]
    if not parts:
        return _empty_contacts()
    return _Contacts(*(np.concatenate([getattr(p, f) for p in parts]) for f in _Contacts.__dataclass_fields__))


def detect_contacts(scene: _Scene, x: np.ndarray) -> _Contacts:
    parts = []
    for si, side in enumerate(("left", "right")):
        sl = scene.slices[side]
        g_nodes = scene.finger_bnodes + sl.start
        parts.append(_penetrations(g_nodes, x, scene.obj_edges, scene.k_grip, GRIPPER_IN_OBJECT, si))
        parts.append(_penetrations(scene.obj_bnodes, x, scene.edges[side], scene.k_grip, OBJECT_IN_GRIPPER, si))
    if scene.config.ground:
        yo = x[scene.obj_bnodes, 1]
        below = yo < 0
        if below.any():
            idx = scene.obj_bnodes[below]
            m = idx.size
            parts.append(_Contacts(np.full(m, GROUND), idx, -np.ones(m, dtype=np.int64), -np.ones(m, dtype=np.int64),
                                   np.zeros(m), np.tile([0.0, 1.0], (m, 1)), -yo[below],
                                   np.full(m, scene.k_ground), -np.ones(m, dtype=np.int64)))
    return _concat(parts)


def _stencil(c: _Contacts):
    """Node triples and weights so that relative motion = sum_j w_j * dx[node_j]."""
    nodes = np.column_stack([c.p, np.where(c.a < 0, c.p, c.a), np.where(c.b < 0, c.p, c.b)])
    ground = c.a < 0
    w = np.column_stack([np.ones(c.size), -(1 - c.t), -c.t])
    w[ground, 1:] = 0.0
    return nodes, w


def _f0(y, eps):
    return np.where(y < eps, -y**3 / (3 * eps**2) + y**2 / eps + eps / 3, y)


def _f1(y, eps):
    return np.where(y < eps, -y**2 / eps**2 + 2 * y / eps, 1.0)


def _f1_prime(y, eps):
    return np.where(y < eps, -2 * y / eps**2 + 2 / eps, 0.0)


def _polar_angle(F):
    return np.arctan2(F[:, 1, 0] - F[:, 0, 1], F[:, 0, 0] + F[:, 1, 1])


class _Stepper:
    def __init__(self, scene: _Scene):
        self.s = scene
        cfg = scene.config
        self.h = cfg.dt
        self.mu_f = cfg.friction_mu
        self.eps_u = cfg.friction_velocity * self.h
        self.projected_steps = 0
        self.shifted_steps = 0
        self._shift = SHIFT_MIN
        self._shifted = CholeskySolver()
        self._geom = None
        self._exact = CholeskySolver()
        self._projected = CholeskySolver()

    def deformation(self, x):
        s = self.s
        e = x[s.tris]
        Ds = np.swapaxes(e[:, 1:] - e[:, :1], 1, 2)
        return Ds @ s.Dm_inv

    def _geometry(self, x):
        """Deformation gradients, rotation angles and contacts of ``x`` (memoized on the array object)."""
        if self._geom is not None and self._geom[0] is x:
            return self._geom[1]
        F = self.deformation(x)
        th = _polar_angle(F)
        out = (F, np.cos(th), np.sin(th), detect_contacts(self.s, x))
        self._geom = (x, out)
        return out

    def energy(self, x, xhat, x_start, fric):
        s = self.s
        dx = x - xhat
        e = 0.5 * np.sum(s.mass * np.einsum("ij,ij->i", dx, dx)) / self.h**2
        e += np.sum(s.mass * s.g * x[:, 1])
        F, c, sn, con = self._geometry(x)
        R = np.stack([np.stack([c, -sn], 1), np.stack([sn, c], 1)], 1)
        diff = F - R
        tr = c * (F[:, 0, 0] + F[:, 1, 1]) + sn * (F[:, 1, 0] - F[:, 0, 1]) - 2
        e += np.sum(s.vol * (s.mu * np.einsum("eij,eij->e", diff, diff) + 0.5 * s.lam * tr**2))
        e += 0.5 * np.sum(con.k * con.d**2)
        if fric is not None and fric.size:
            e += np.sum(self._friction_terms(x, x_start, fric)[0])
        return e

    def _friction_terms(self, x, x_start, fric):
        nodes, w = _stencil(fric)
        disp = x - x_start
        rel = np.einsum("cj,cjk->ck", w, disp[nodes])
        tau = np.column_stack([-fric.n[:, 1], fric.n[:, 0]])
        u = np.einsum("ck,ck->c", rel, tau)
        y = np.abs(u)
        lam = fric.k * fric.d
        energy = self.mu_f * lam * _f0(y, self.eps_u)
        return energy, nodes, w, tau, u, lam

    def gradient_hessian(self, x, xhat, x_start, fric, project=False):
        s = self.s
        n = s.n
        g = np.zeros((n, 2))
        g += (s.mass[:, None] * (x - xhat)) / self.h**2
        g[:, 1] += s.mass * s.g
        F, c, sn, con = self._geometry(x)
        R = np.stack([np.stack([c, -sn], 1), np.stack([sn, c], 1)], 1)
        tr = c * (F[:, 0, 0] + F[:, 1, 1]) + sn * (F[:, 1, 0] - F[:, 0, 1]) - 2
        P = 2 * s.mu[:, None, None] * (F - R) + (s.lam * tr)[:, None, None] * R
        H12 = s.vol[:, None, None] * (P @ np.einsum("eij->eji", s.Dm_inv))  # columns: nodes 1, 2
        ge = np.concatenate([-(H12[:, :, 0] + H12[:, :, 1])[:, None, :], H12[:, :, 0][:, None, :], H12[:, :, 1][:, None, :]], axis=1)
        ge = ge.reshape(-1, 2)
        g[:, 0] += np.bincount(s.tris.ravel(), weights=ge[:, 0], minlength=n)
        g[:, 1] += np.bincount(s.tris.ravel(), weights=ge[:, 1], minlength=n)

        # Hessian of the corotated energy in F: 2 mu I + lam r r' + c t t'; with ``project`` the twist
        # coefficient c is clamped so that every eigenvalue stays non-negative
        I1 = np.sqrt((F[:, 0, 0] + F[:, 1, 1]) ** 2 + (F[:, 1, 0] - F[:, 0, 1]) ** 2)
        r = R.reshape(-1, 4)
        t = np.column_stack([-sn, -c, c, -sn])  # vec(R J)
        ct = (s.lam * (I1 - 2) - 2 * s.mu) / np.maximum(I1, 1e-12)
        if project:
            ct = np.maximum(ct, -s.mu)
        Hf = (2 * s.mu)[:, None, None] * np.eye(4) + s.lam[:, None, None] * r[:, :, None] * r[:, None, :]
        Hf += ct[:, None, None] * t[:, :, None] * t[:, None, :]
        Ke = s.vol[:, None, None] * (s.dFdxT @ Hf @ s.dFdx)
        data = np.bincount(s.pattern_slot, weights=np.concatenate([Ke.ravel(), s.mass_diag / self.h**2]),
                           minlength=s.pattern.nnz)[: s.pattern.nnz]
        H = sp.csc_matrix((data, s.pattern.indices, s.pattern.indptr), shape=s.pattern.shape)

        rows, cols, vals = [], [], []
        if con.size:
            nodes, w = _stencil(con)
            fn = (con.k * con.d)[:, None] * con.n  # force on the penetrating node
            np.add.at(g, nodes.ravel(), (-w[:, :, None] * fn[:, None, :]).reshape(-1, 2))
            self._add_projected(rows, cols, vals, nodes, w, con.n, con.k)
            # closest point at a segment end: the distance is point-to-point, whose squared form
            # is isotropic, so the tangential curvature equals the normal one
            vert = (con.a >= 0) & ((con.t <= 0.0) | (con.t >= 1.0))
            if vert.any():
                tang = np.column_stack([-con.n[vert, 1], con.n[vert, 0]])
                self._add_projected(rows, cols, vals, nodes[vert], w[vert], tang, con.k[vert])
        if fric is not None and fric.size:
            _, fnodes, fw, tau, u, lam = self._friction_terms(x, x_start, fric)
            y = np.abs(u)
            coef = self.mu_f * lam * _f1(y, self.eps_u) * np.sign(u)
            np.add.at(g, fnodes.ravel(), (fw[:, :, None] * (coef[:, None] * tau)[:, None, :]).reshape(-1, 2))
            self._add_projected(rows, cols, vals, fnodes, fw, tau, self.mu_f * lam * _f1_prime(y, self.eps_u))
        if rows:
            rows = np.concatenate(rows)
            cols = np.concatenate(cols)
            vals = np.concatenate(vals)
            rm, cm = s.dof_map[rows], s.dof_map[cols]
            keep = (rm >= 0) & (cm >= 0)
            m = s.free_dofs.size
            H = H + sp.csc_matrix((vals[keep], (rm[keep], cm[keep])), shape=(m, m))
        return g.ravel()[s.free_dofs], H

    def _direction(self, x, xhat, x_prev, fric, step_index):
        """Newton direction from the exact Hessian.

        An indefinite Hessian (buckling, compressed elements) is shifted by a growing multiple of
        its diagonal until it factors; the per-element projection is the last resort.
        """
        g, H = self.gradient_hessian(x, xhat, x_prev, fric)
        try:
            dx = self._exact.factor(H).solve(-g)
            if np.all(np.isfinite(dx)) and g @ dx < 0:
                self._shift = max(self._shift * 0.1, SHIFT_MIN)
                return g, dx
        except NotPositiveDefinite:
            pass
        D = sp.diags(np.abs(H.diagonal()))
        shift = self._shift
        while shift <= SHIFT_MAX:
            try:
                dx = self._shifted.factor(H + shift * D).solve(-g)
                if np.all(np.isfinite(dx)) and g @ dx < 0:
                    self._shift = shift
                    self.shifted_steps += 1
                    return g, dx
            except NotPositiveDefinite:
                pass
            shift *= 10.0
        self.projected_steps += 1
        g, H = self.gradient_hessian(x, xhat, x_prev, fric, project=True)
        try:
            return g, self._projected.factor(H).solve(-g)
        except NotPositiveDefinite as exc:
            raise SimulationError(f"singular Newton system: {exc}", step_index) from exc

    @staticmethod
    def _add_projected(rows, cols, vals, nodes, w, direction, stiffness):
        """Blocks stiffness * (J' d)(d' J) for each contact stencil."""
        v = w[:, :, None] * direction[:, None, :]  # (c, 3, 2)
        v = v.reshape(-1, 6)
        blocks = stiffness[:, None, None] * v[:, :, None] * v[:, None, :]
        dofs = np.empty((nodes.shape[0], 6), dtype=np.int64)
        dofs[:, 0::2] = 2 * nodes
        dofs[:, 1::2] = 2 * nodes + 1
        rows.append(np.repeat(dofs, 6, axis=1).ravel())
        cols.append(np.tile(dofs, (1, 6)).ravel())
        vals.append(blocks.ravel())

    def step(self, x_prev, v_prev, target, fric, step_index):
        s = self.s
        cfg = s.config
        xhat = x_prev + self.h * v_prev
        xhat[s.kinematic] = target[s.kinematic]
        x = xhat.copy()
        g0 = None
        iters = 0
        converged = False
        for iters in range(1, cfg.max_newton + 1):
            g, dx = self._direction(x, xhat, x_prev, fric, step_index)
            gnorm = np.linalg.norm(g)
            if g0 is None:
                g0 = gnorm
            elif np.max(np.abs(g)) * FORCE_TO_N < cfg.newton_force_tol:
                converged = True
                break
            if not np.all(np.isfinite(dx)):
                raise SimulationError("non-finite Newton step", step_index)
            if np.max(np.abs(dx)) < cfg.newton_tol:
                converged = True
                break
            full = np.zeros(2 * s.n)
            full[s.free_dofs] = dx
            full = full.reshape(-1, 2)
            e0 = self.energy(x, xhat, x_prev, fric)
            slope = float(g @ dx)
            alpha = 1.0
            for _ in range(40):
                trial = x + alpha * full
                e1 = self.energy(trial, xhat, x_prev, fric)
                if e1 <= e0 + 1e-4 * alpha * slope or e1 <= e0 + 1e-13 * abs(e0) and alpha < 1e-6:
                    break
                alpha *= 0.5
            if alpha == 1.0 and e1 - e0 < 2.0 * slope:
                # the energy falls faster than the quadratic model (buckling): extend the step
                for _ in range(4):
                    longer = x + 2 * alpha * full
                    e2 = self.energy(longer, xhat, x_prev, fric)
                    if e2 >= e1:
                        break
                    alpha, trial, e1 = 2 * alpha, longer, e2
            x = trial
            if alpha * np.max(np.abs(dx)) < cfg.newton_tol:
                converged = True
                break
        if not np.all(np.isfinite(x)):
            raise SimulationError("state became non-finite", step_index)
        if not converged:
            g, _ = self.gradient_hessian(x, xhat, x_prev, fric)
            if np.linalg.norm(g) >= g0:
                raise SimulationError(f"Newton residual not reduced after {cfg.max_newton} iterations", step_index)
            log.warning("step %d: Newton stopped at max iterations (residual reduced %.2e -> %.2e)",
                        step_index, g0, np.linalg.norm(g))
        return x, iters

    def object_stress(self, x):
        s = self.s
        F = self.deformation(x)[s.obj_tris]
        th = _polar_angle(F)
        c, sn = np.cos(th), np.sin(th)
        # S = R^T F, symmetric stretch
        s00 = c * F[:, 0, 0] + sn * F[:, 1, 0] - 1
        s11 = -sn * F[:, 0, 1] + c * F[:, 1, 1] - 1
        s01 = 0.5 * ((c * F[:, 0, 1] + sn * F[:, 1, 1]) + (-sn * F[:, 0, 0] + c * F[:, 1, 0]))
        mu, lam = s.mu[s.obj_tris], s.lam[s.obj_tris]
        tr = s00 + s11
        sx = 2 * mu * s00 + lam * tr
        sy = 2 * mu * s11 + lam * tr
        txy = 2 * mu * s01
        vm = np.sqrt(np.maximum(sx**2 - sx * sy + sy**2 + 3 * txy**2, 0.0))
        return float(vm.max()) * STRESS_TO_PA

    def events(self, x, x_prev, fric, con: _Contacts):
        """Gripper-object contact events at the end of a step (forces on the object, N)."""
        if con.size == 0:
            return []
        fr_force = {}
        if fric is not None and fric.size:
            _, _, _, tau, u, lam = self._friction_terms(x, x_prev, fric)
            mag = -self.mu_f * lam * _f1(np.abs(u), self.eps_u) * np.sign(u)
            for key, m, tv in zip(fric.keys(), mag, tau):
                fr_force[key] = m * tv
        out = []
        sides = ("left", "right")
        lam_now = con.normal_force
        for i, key in enumerate(con.keys()):
            kind = con.kind[i]
            if kind == GROUND:
                continue
            n = con.n[i]
            tau = np.array([-n[1], n[0]])
            ft = fr_force.get(key, np.zeros(2)) @ tau
            # Coulomb bound against the end-of-step normal force
            cap = self.mu_f * lam_now[i]
            ft = float(np.clip(ft, -cap, cap))
            on_node = lam_now[i] * n + ft * tau
            side = sides[con.side[i]]
            start = self.s.slices[side].start
            if kind == GRIPPER_IN_OBJECT:
                out.append(ContactEvent(side, int(con.p[i] - start), x[con.p[i]].copy(),
                                        -on_node * FORCE_TO_N, -n))
            else:
                c = (1 - con.t[i]) * x[con.a[i]] + con.t[i] * x[con.b[i]]
                for node, wgt in ((con.a[i], 1 - con.t[i]), (con.b[i], con.t[i])):
                    if wgt <= 0:
                        continue
                    out.append(ContactEvent(side, int(node - start), c.copy(), wgt * on_node * FORCE_TO_N, n.copy()))
        return out


def simulate(left_finger: BodyMesh, obj: BodyMesh, poses=None, config: SimConfig | None = None) -> SimTrace:
    """Squeeze ``obj`` between ``left_finger`` and its mirror image, then lift.

    Ports move kinematically: the input port advances ``d_c`` along the design
    input direction over the first half, then all port nodes rise ``d_l``.
    """
    config = config or SimConfig()
    poses = poses or (Pose(), Pose())
    scene = _Scene(left_finger, obj, poses, config)
    stepper = _Stepper(scene)
    x = scene.X0.copy()
    v = np.zeros_like(x)
    fric = None
    steps, positions = [], []
    osl = scene.slices["object"]
    for k in range(1, config.N_t + 1):
        target = scene.targets(k)
        x_prev = x
        x, iters = stepper.step(x_prev, v, target, fric, k)
        v = (x - x_prev) / stepper.h
        con = detect_contacts(scene, x)
        events = stepper.events(x, x_prev, fric, con)
        fric = con if config.friction_mu > 0 else None
        grounded = bool(np.any(con.kind == GROUND))
        om = scene.mass[osl]
        rec = StepRecord(
            step=k,
            time=k * stepper.h,
            contacts=events,
            grounded=grounded,
            object_stress=stepper.object_stress(x),
            object_centroid=(om[:, None] * x[osl]).sum(axis=0) / om.sum(),
            object_momentum=(om[:, None] * v[osl]).sum(axis=0),
            newton_iterations=iters,
        )
        steps.append(rec)
        keep = config.store_positions == "all" or (config.store_positions == "contact" and (events or k == config.N_t))
        positions.append(x.copy() if keep else None)
    return SimTrace(config, steps, positions, scene.slices, left_finger.nodes.copy(), scene.X0.copy(),
                    scene.mass.copy(), left_finger.grid_nodes)


def grasp_outcome(trace: SimTrace) -> tuple[bool, float, float]:
    """(success, lift time in s, peak object von Mises stress in Pa)."""
    if not trace.steps:
        return False, 0.0, 0.0
    dt = trace.config.t / trace.config.N_t
    last = trace.steps[-1]
    success = bool(last.contacts) and not last.grounded
    lifted = sum(1 for r in trace.steps if r.contacts and not r.grounded)
    peak = max(r.object_stress for r in trace.steps)
    return success, lifted * dt, float(peak)
