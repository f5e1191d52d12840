"""Contact-force extraction: simulation trace -> load set for topology optimization.

Per timestep the deformed gripper is aligned to its undeformed design frame R
with the Kabsch rotation, contact forces are rotated into R and filtered by the
keep rule, and the largest kept force per gripper node is retained.  The raw set
is then reduced by rounding positions to the millimetre grid and averaging.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .topopt import ContactLoadSet, LoadCase

log = logging.getLogger(__name__)


class ExtractionError(Exception):
    pass


class EmptyLoadError(ExtractionError):
    """No contact force survived the keep rule."""


class DegenerateConfiguration(ExtractionError):
    pass


@dataclass(frozen=True)
class FrameAlignment:
    rotation: np.ndarray  # maps centred deformed points onto centred reference points
    rmsd: float


@dataclass(frozen=True)
class RawEntry:
    point: np.ndarray  # reference-frame position, mm
    force: np.ndarray  # reference-frame force, N
    magnitude: float


@dataclass
class RawForceSet:
    entries: dict[int, RawEntry] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, node):
        return node in self.entries

    def __getitem__(self, node) -> RawEntry:
        return self.entries[node]


def kabsch(deformed, reference) -> FrameAlignment:
    """Proper rotation minimizing the RMSD between centred point sets (2D or 3D)."""
    P = np.asarray(deformed, dtype=float)
    Q = np.asarray(reference, dtype=float)
    if P.shape != Q.shape or P.ndim != 2 or P.shape[1] not in (2, 3):
        raise ValueError(f"point sets must share an (n, 2) or (n, 3) shape, got {P.shape} and {Q.shape}")
    dim = P.shape[1]
    if P.shape[0] < dim:
        raise ValueError(f"need at least {dim} points in {dim}D")
    Pc = P - P.mean(axis=0)
    Qc = Q - Q.mean(axis=0)
    Hc = Pc.T @ Qc
    if not np.any(np.abs(Hc) > 1e-300) or np.allclose(Pc, 0.0) or np.allclose(Qc, 0.0):
        raise DegenerateConfiguration("points are coincident; rotation is undefined")
    U, _, Vt = np.linalg.svd(Hc)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    S = np.eye(dim)
    S[-1, -1] = d
    R = Vt.T @ S @ U.T
    rmsd = float(np.sqrt(np.mean(np.sum((Pc @ R.T - Qc) ** 2, axis=1))))
    return FrameAlignment(R, rmsd)


def keep_rule(force) -> bool:
    """Positive normal push on the object (-y) that also resists slip (+x), both strict."""
    f = np.asarray(force, dtype=float)
    return bool(f[1] < 0 and f[0] > 0)


def update_raw_set(raw: RawForceSet, node: int, point, force) -> RawForceSet:
    """Insert, or replace only when the candidate is strictly larger in magnitude (in place)."""
    force = np.asarray(force, dtype=float)
    mag = float(np.linalg.norm(force))
    cur = raw.entries.get(node)
    if cur is None or mag > cur.magnitude:
        raw.entries[node] = RawEntry(np.asarray(point, dtype=float).copy(), force.copy(), mag)
    return raw


def round_mm(values) -> np.ndarray:
    """Nearest millimetre, halves rounded up."""
    return np.floor(np.asarray(values, dtype=float) + 0.5)


def reduce(raw: RawForceSet) -> ContactLoadSet:
    """Round to the mm grid, group by (x, y), average each group, drop any out-of-plane part."""
    if len(raw) == 0:
        raise EmptyLoadError("raw force set is empty")
    groups: dict[tuple[float, float], list[np.ndarray]] = {}
    for node in sorted(raw.entries):
        e = raw.entries[node]
        key = tuple(round_mm(e.point[:2]).tolist())
        groups.setdefault(key, []).append(e.force)
    loads = []
    for key in sorted(groups):
        mean = np.mean(np.stack(groups[key]), axis=0)[:2]
        w = float(np.hypot(mean[0], mean[1]))
        if w == 0.0:
            log.warning("contact group at %s averages to zero force; dropped", key)
            continue
        loads.append(LoadCase(key, (float(mean[0]), float(mean[1])), w))
    if not loads:
        raise EmptyLoadError("every contact group averaged to zero")
    return ContactLoadSet(tuple(loads))


_MIRROR = np.array([-1.0, 1.0])


def raw_forces(trace, reference=None) -> RawForceSet:
    """Replay the keep/update rules over every recorded gripper contact of ``trace``.

    Right-finger contacts are mirrored into the left finger's frame, so both
    fingers feed one set keyed by the shared mesh node ids.
    """
    ref = np.asarray(trace.reference if reference is None else reference, dtype=float)
    raw = RawForceSet()
    for k, rec in enumerate(trace.steps):
        if not rec.contacts:
            continue
        rotations = {}
        for ev in rec.contacts:
            if ev.finger not in rotations:
                pos = trace.finger_positions(k, ev.finger)
                if pos is None:
                    raise ExtractionError(f"step {rec.step}: contact recorded without node positions")
                if ev.finger == "right":
                    pos = pos * _MIRROR
                rotations[ev.finger] = kabsch(pos, ref).rotation
            f = np.asarray(ev.force, dtype=float)
            if ev.finger == "right":
                f = f * _MIRROR
            f_R = rotations[ev.finger] @ f
            if keep_rule(f_R):
                update_raw_set(raw, int(ev.node), ref[ev.node], f_R)
    return raw


def extract(trace, reference=None) -> ContactLoadSet:
    """Load set in design-domain coordinates; raises :class:`EmptyLoadError` if nothing survives."""
    raw = raw_forces(trace, reference)
    if len(raw) == 0:
        raise EmptyLoadError("no contact force satisfied the keep rule")
    return reduce(raw)


def write_raw_csv(path, raw: RawForceSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "x", "y", "fx", "fy", "magnitude"])
        for node in sorted(raw.entries):
            e = raw.entries[node]
            w.writerow([node, *_fmt(e.point[:2]), *_fmt(e.force[:2]), f"{e.magnitude:.10g}"])


def write_loads_csv(path, loads: ContactLoadSet) -> None:
    """Reduced loads; ``node_id`` is -1 because a group may merge several nodes."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "x", "y", "fx", "fy", "magnitude"])
        for lc in loads:
            w.writerow([-1, *_fmt(lc.position), *_fmt(lc.force), f"{lc.weight:.10g}"])


def read_loads_csv(path) -> ContactLoadSet:
    loads = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            loads.append(LoadCase((float(row["x"]), float(row["y"])), (float(row["fx"]), float(row["fy"])),
                                  float(row["magnitude"])))
    if not loads:
        raise EmptyLoadError(f"{path}: no loads")
    return ContactLoadSet(tuple(loads))


def _fmt(v):
    return [f"{float(x):.10g}" for x in v]
