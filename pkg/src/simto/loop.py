"""Outer iteration: simulate the current design, extract contact loads, re-optimize.

Iteration 0 is the all-solid design domain.  Iteration k >= 1 simulates design
k - 1 (which also yields that design's lift time), extracts its contact loads
and optimizes design k from a uniform field.  The loop stops on convergence of
the exported density fields, the iteration cap, an infeasible design, an empty
load set or any sub-module error.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from . import io
from .extract import EmptyLoadError, ExtractionError, extract, write_loads_csv
from .fem import DensityField, FemError
from .grasp.mesh import BodyMesh, MeshingError, load_polygon, mesh_from_density, triangulate_polygon
from .grasp.shapes import SHAPES
from .grasp.sim import Pose, SimConfig, SimulationError, grasp_outcome, simulate
from .topopt import ContactLoadSet, DesignDomain, OptimizationError, TopOptConfig, optimize

log = logging.getLogger(__name__)

SOLID_THRESHOLD = 0.5


@dataclass(frozen=True)
class LoopConfig:
    epsilon: float = 10.0
    max_simto_iterations: int = 20
    check_feasibility: bool = True
    evaluate_final: bool = False  # one extra simulate call to score the last design
    object_spacing: float = 4.0  # mm, object mesh resolution
    pose_gripper: Pose = field(default_factory=Pose)
    pose_object: Pose = field(default_factory=Pose)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_simto_iterations < 1:
            raise ValueError("max_simto_iterations must be >= 1")


@dataclass
class RunRecord:
    iteration: int
    design: DensityField
    loads: ContactLoadSet | None = None
    lift_time: float | None = None
    success: bool | None = None
    peak_stress: float | None = None
    diversity: float | None = None  # filled in by population analysis
    feasible: bool = True
    reasons: list[str] = field(default_factory=list)
    change: float | None = None  # sum of (delta rho)^4 against the previous design
    to_iterations: int = 0
    config_hash: str = ""
    wall_time: float = 0.0
    error: str | None = None

    def summary(self) -> dict:
        return {
            "iteration": self.iteration,
            "lift_time": self.lift_time,
            "success": self.success,
            "peak_stress": self.peak_stress,
            "diversity": self.diversity,
            "feasible": self.feasible,
            "reasons": list(self.reasons),
            "change": self.change,
            "to_iterations": self.to_iterations,
            "volume_fraction": self.design.volume_fraction,
            "n_loads": 0 if self.loads is None else len(self.loads),
            "config_hash": self.config_hash,
            "wall_time": self.wall_time,
            "error": self.error,
        }


@dataclass
class RunResult:
    records: list[RunRecord]
    status: str  # converged | max_iterations | infeasible | empty_loads | error
    simulate_calls: int


def converged(rho_prev, rho_next, epsilon: float = 10.0) -> bool:
    return convergence_measure(rho_prev, rho_next) < epsilon


def convergence_measure(rho_prev, rho_next) -> float:
    a = _values(rho_prev)
    b = _values(rho_next)
    if a.shape != b.shape:
        raise ValueError(f"designs differ in size: {a.size} vs {b.size}")
    d = np.abs(b - a)  # |.| first: x**4 and (-x)**4 can round differently
    return float(np.sum((d * d) ** 2))


def feasible(rho, domain: DesignDomain) -> tuple[bool, list[str]]:
    """Single 4-connected solid component (rho >= 0.5) touching the fixed port."""
    grid = domain.grid
    vals = _values(rho)
    if vals.size != grid.n_elements:
        raise ValueError("design does not match the domain grid")
    solid = vals.reshape(grid.nely, grid.nelx) >= SOLID_THRESHOLD
    labels, n = ndimage.label(solid)
    reasons = []
    if n == 0:
        reasons.append("no material")
    elif n > 1:
        reasons.append("disconnected")
    port_elems = np.flatnonzero(np.isin(grid.element_nodes, domain.fixed_port).any(axis=1))
    if not solid.ravel()[port_elems].any():
        reasons.append("no material at fixed port")
    return not reasons, reasons


def _values(rho) -> np.ndarray:
    return np.asarray(rho.values if isinstance(rho, DensityField) else rho, dtype=float).ravel()


def load_object(spec: str, spacing: float = 4.0) -> BodyMesh:
    """Object mesh from a built-in shape name or a polygon file."""
    if spec in SHAPES:
        poly = SHAPES[spec]()
    else:
        poly = load_polygon(spec)
    return triangulate_polygon(poly, spacing=spacing)


def drop_fixed_port_loads(loads: ContactLoadSet, domain: DesignDomain) -> tuple[ContactLoadSet | None, int]:
    """Remove loads whose snapped node is clamped; such loads do no work on the design."""
    keep = [lc for lc in loads if domain.grid.nearest_node(lc.position) not in set(domain.fixed_port.tolist())]
    dropped = len(loads) - len(keep)
    return (ContactLoadSet(tuple(keep)) if keep else None), dropped


class _Store:
    def __init__(self, root):
        self.root = None if root is None else Path(root)
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def config(self, payload):
        if self.root is not None:
            io.dump_json(self.root / "config.json", payload)

    def record(self, rec: RunRecord, history=None, write_design=True):
        if self.root is None:
            return
        d = self.root / f"iter_{rec.iteration}"
        d.mkdir(exist_ok=True)
        if write_design:
            io.write_design_csv(d / "design.csv", rec.design)
            io.write_pgm(d / "design.pgm", rec.design)
            if rec.loads is not None:
                write_loads_csv(d / "loads.csv", rec.loads)
            if history is not None:
                io.write_log_csv(d / "log.csv", history)
        io.dump_json(d / "record.json", rec.summary())

    def finish(self, status, records, calls):
        if self.root is not None:
            io.dump_json(self.root / "summary.json", {
                "status": status,
                "iterations": len(records) - 1,
                "simulate_calls": calls,
                "feasible": sum(r.feasible and r.error is None for r in records),
                "infeasible": sum(not r.feasible and r.error is None for r in records),
                "errored": sum(r.error is not None for r in records),
            })


def run(domain: DesignDomain, obj: BodyMesh, sim_config: SimConfig | None = None,
        topopt_config: TopOptConfig | None = None, loop_config: LoopConfig | None = None,
        out_dir=None, pose_schedule: Callable[[int], tuple[Pose, Pose]] | None = None,
        meta: dict | None = None) -> RunResult:
    """Run the loop; with ``out_dir`` every design and record is persisted as it is produced."""
    sim_config = sim_config or SimConfig()
    topopt_config = topopt_config or TopOptConfig()
    loop_config = loop_config or LoopConfig()
    cfg_payload = {
        "domain": {
            "nelx": domain.grid.nelx, "nely": domain.grid.nely, "element_size": domain.grid.element_size,
            "fixed_port": domain.fixed_port, "input_port": domain.input_port,
            "input_force_angle": domain.input_force_angle, "volume_fraction": domain.volume_fraction,
        },
        "sim": sim_config, "topopt": topopt_config, "loop": loop_config, "meta": meta or {},
    }
    chash = io.config_hash(cfg_payload)
    store = _Store(out_dir)
    store.config(cfg_payload)

    t0 = time.perf_counter()
    design = DensityField.uniform(domain.grid, 1.0)
    ok, reasons = feasible(design, domain)
    current = RunRecord(0, design, feasible=ok, reasons=reasons, config_hash=chash)
    records = [current]
    store.record(current)
    calls = 0
    status = "max_iterations"
    poses = (loop_config.pose_gripper, loop_config.pose_object)

    for k in range(1, loop_config.max_simto_iterations + 1):
        t_iter = time.perf_counter()
        if pose_schedule is not None:
            poses = pose_schedule(k)
        try:
            finger = mesh_from_density(current.design, SOLID_THRESHOLD, domain)
            calls += 1
            trace = simulate(finger, obj, poses, sim_config)
        except (MeshingError, SimulationError, FemError, ValueError) as exc:
            current.error = f"simulation: {exc}"
            store.record(current, write_design=False)
            status = "error"
            break
        current.success, current.lift_time, current.peak_stress = grasp_outcome(trace)
        store.record(current, write_design=False)

        try:
            loads = extract(trace)
        except EmptyLoadError as exc:
            log.info("iteration %d: %s", k, exc)
            status = "empty_loads"
            break
        except ExtractionError as exc:
            current.error = f"extraction: {exc}"
            store.record(current, write_design=False)
            status = "error"
            break
        loads, dropped = drop_fixed_port_loads(loads, domain)
        if dropped:
            log.warning("iteration %d: dropped %d load(s) on the fixed port", k, dropped)
        if loads is None:
            status = "empty_loads"
            break

        try:
            new, history = optimize(domain, loads, topopt_config)
        except OptimizationError as exc:
            rec = RunRecord(k, current.design, loads, feasible=False, reasons=["optimization failed"],
                            config_hash=chash, error=f"optimization: {exc}",
                            wall_time=time.perf_counter() - t_iter)
            records.append(rec)
            store.record(rec, write_design=False)
            status = "error"
            break
        ok, reasons = feasible(new, domain) if loop_config.check_feasibility else (True, [])
        rec = RunRecord(k, new, loads, feasible=ok, reasons=reasons, change=convergence_measure(current.design, new),
                        to_iterations=len(history), config_hash=chash, wall_time=time.perf_counter() - t_iter)
        records.append(rec)
        store.record(rec, history)
        log.info("iteration %d: %d loads, change %.4g, feasible %s", k, len(loads), rec.change, ok)
        current = rec
        if not ok:
            status = "infeasible"
            break
        if rec.change < loop_config.epsilon:
            status = "converged"
            break

    last = records[-1]
    if (loop_config.evaluate_final and status in ("converged", "max_iterations") and last.feasible
            and last.lift_time is None):
        try:
            finger = mesh_from_density(last.design, SOLID_THRESHOLD, domain)
            calls += 1
            last.success, last.lift_time, last.peak_stress = grasp_outcome(simulate(finger, obj, poses, sim_config))
        except (MeshingError, SimulationError, FemError, ValueError) as exc:
            last.error = f"final evaluation: {exc}"
        store.record(last, write_design=False)
    store.finish(status, records, calls)
    log.info("run finished: %s after %d iterations (%.1f s)", status, len(records) - 1, time.perf_counter() - t0)
    return RunResult(records, status, calls)


def load_run(run_dir) -> list[dict]:
    """Record summaries of a persisted run, in iteration order."""
    run_dir = Path(run_dir)
    out = []
    for d in sorted(run_dir.glob("iter_*"), key=lambda p: int(p.name.split("_")[1])):
        out.append(json.loads((d / "record.json").read_text()))
    return out
