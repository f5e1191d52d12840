"""Parameter sweeps over (E_g, E_o, v_f) with resumable per-run directories."""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import re
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io
from .fem import GridSpec
from .grasp.shapes import SHAPES
from .grasp.sim import SimConfig
from .loop import LoopConfig, load_object, run
from .metrics import DesignPopulation, default_workers, diversity, pareto_front
from .topopt import DesignDomain, TopOptConfig

log = logging.getLogger(__name__)

MPA = 1e6


@dataclass(frozen=True)
class SweepGrid:
    moduli_g: tuple[float, ...] = (0.46 * MPA, 0.60 * MPA, 1.39 * MPA, 11.51 * MPA)
    moduli_o: tuple[float, ...] = (0.46 * MPA, 0.60 * MPA, 1.39 * MPA, 11.51 * MPA)
    volume_fractions: tuple[float, ...] = (0.20, 0.25, 0.30, 0.35)
    objects: tuple[str, ...] = ("curvy_ball",)

    def __post_init__(self):
        for name in ("moduli_g", "moduli_o", "volume_fractions", "objects"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValueError(f"{name} must be nonempty")
            object.__setattr__(self, name, vals)

    def cells(self) -> list["Cell"]:
        return [Cell(o, eg, eo, vf) for o in self.objects
                for eg, eo, vf in itertools.product(self.moduli_g, self.moduli_o, self.volume_fractions)]

    @property
    def runs_per_object(self) -> int:
        return len(self.moduli_g) * len(self.moduli_o) * len(self.volume_fractions)


@dataclass(frozen=True)
class Cell:
    object: str
    E_g: float
    E_o: float
    v_f: float

    @property
    def run_id(self) -> str:
        stem = re.sub(r"[^A-Za-z0-9]+", "-", Path(self.object).stem).strip("-") or "object"
        if self.object not in SHAPES:  # files: a path digest keeps similar names apart
            stem += "-" + hashlib.sha256(self.object.encode()).hexdigest()[:6]
        return f"{stem}_Eg{self.E_g / MPA:g}_Eo{self.E_o / MPA:g}_vf{self.v_f:g}"


@dataclass(frozen=True)
class SweepSettings:
    grid: GridSpec = field(default_factory=lambda: GridSpec(60, 28, 2.5))
    sim: SimConfig = field(default_factory=SimConfig)
    topopt: TopOptConfig = field(default_factory=TopOptConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    seed: int = 0


@dataclass
class SweepSummary:
    attempted: int = 0
    completed: int = 0
    skipped: int = 0
    failed: int = 0
    feasible: int = 0
    infeasible: int = 0
    errored: int = 0
    statuses: dict = field(default_factory=dict)


def _run_cell(args):
    cell, settings, run_dir = args
    run_dir = Path(run_dir)
    if run_dir.exists():
        shutil.rmtree(run_dir)  # stale partial run
    try:
        domain = DesignDomain.default(settings.grid, cell.v_f)
        sim = replace(settings.sim, E_g=cell.E_g, E_o=cell.E_o, seed=settings.seed)
        obj = load_object(cell.object, settings.loop.object_spacing)
        result = run(domain, obj, sim, settings.topopt, settings.loop, run_dir,
                     meta={"object": cell.object, "E_g": cell.E_g, "E_o": cell.E_o, "v_f": cell.v_f,
                           "run_id": cell.run_id})
        return cell.run_id, result.status, None
    except Exception as exc:  # a failing run must not abort the sweep
        log.exception("run %s failed", cell.run_id)
        return cell.run_id, "failed", f"{type(exc).__name__}: {exc}"


def plan(grid: SweepGrid) -> list[Cell]:
    return grid.cells()


def _manifest(grid: SweepGrid, settings: SweepSettings, status: dict) -> dict:
    return {
        "grid": {"moduli_g": list(grid.moduli_g), "moduli_o": list(grid.moduli_o),
                 "volume_fractions": list(grid.volume_fractions), "objects": list(grid.objects)},
        "seeds": [settings.seed],
        "cells": [{"run_id": c.run_id, "object": c.object, "E_g": c.E_g, "E_o": c.E_o, "v_f": c.v_f,
                   "status": status.get(c.run_id, "pending")} for c in grid.cells()],
    }


def execute_sweep(grid: SweepGrid, out_dir, settings: SweepSettings | None = None,
                  workers: int | None = None) -> SweepSummary:
    """One loop run per cell in ``out_dir/run_<id>``; runs with a ``summary.json`` are skipped."""
    settings = settings or SweepSettings()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = grid.cells()
    ids = [c.run_id for c in cells]
    if len(set(ids)) != len(ids):
        raise ValueError("sweep cells map to duplicate run directories")
    summary = SweepSummary(attempted=len(cells))
    status = {}
    todo = []
    for c in cells:
        done = out / f"run_{c.run_id}" / "summary.json"
        if done.exists():
            try:
                status[c.run_id] = json.loads(done.read_text())["status"]
                summary.skipped += 1
                continue
            except (json.JSONDecodeError, KeyError):
                log.warning("run %s has a corrupt summary; rerunning", c.run_id)
        todo.append((c, settings, str(out / f"run_{c.run_id}")))
    io.dump_json(out / "manifest.json", _manifest(grid, settings, status))

    workers = workers or default_workers()
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(todo))) as ex:
            results = list(ex.map(_run_cell, todo))
    else:
        results = [_run_cell(t) for t in todo]
    for run_id, st, err in results:
        status[run_id] = st
        if err is not None:
            summary.failed += 1
            log.warning("run %s: %s", run_id, err)
        else:
            summary.completed += 1
    io.dump_json(out / "manifest.json", _manifest(grid, settings, status))

    for c in cells:
        s = out / f"run_{c.run_id}" / "summary.json"
        if s.exists():
            d = json.loads(s.read_text())
            summary.feasible += d["feasible"]
            summary.infeasible += d["infeasible"]
            summary.errored += d["errored"]
    summary.statuses = status
    return summary


# aggregation --------------------------------------------------------------------------------

@dataclass
class AggregateReport:
    population: DesignPopulation | None
    rows: list[dict]
    feasible: int
    infeasible: int
    errored: int
    skipped_records: int

    @property
    def attempted(self) -> int:
        return self.feasible + self.infeasible + self.errored


SCATTER_COLUMNS = ["diversity", "lift_time", "v_f", "E_g", "E_o", "on_front", "object", "run", "iteration"]


def _load_records(sweep_dir: Path):
    for run_dir in sorted(p for p in sweep_dir.glob("run_*") if p.is_dir()):
        try:
            cfg = json.loads((run_dir / "config.json").read_text())
            es = float(cfg["domain"]["element_size"])
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            log.warning("%s: unreadable config (%s); run skipped", run_dir.name, exc)
            yield None
            continue
        meta = cfg.get("meta", {})
        iters = sorted((p for p in run_dir.glob("iter_*") if p.is_dir()), key=lambda p: int(p.name.split("_")[1]))
        for it in iters:
            try:
                rec = json.loads((it / "record.json").read_text())
                if not isinstance(rec, dict) or "feasible" not in rec:
                    raise ValueError("missing fields")
                design = io.read_design_csv(it / "design.csv", es) if rec["feasible"] and not rec.get("error") \
                    else None
            except Exception as exc:
                log.warning("%s/%s: corrupt record skipped (%s)", run_dir.name, it.name, exc)
                yield None
                continue
            yield {"run": run_dir.name, "iteration": int(rec["iteration"]), "record": rec, "design": design,
                   "object": meta.get("object", cfg.get("meta", {}).get("object", "")),
                   "E_g": float(meta.get("E_g", cfg["sim"]["E_g"])), "E_o": float(meta.get("E_o", cfg["sim"]["E_o"])),
                   "v_f": float(meta.get("v_f", cfg["domain"]["volume_fraction"]))}


def aggregate(sweep_dir, group_by_object: bool = True) -> AggregateReport:
    """Population of every feasible per-iteration design, with diversity and Pareto membership.

    Diversity is measured against the mean design of the same object unless
    ``group_by_object`` is false.  Designs never simulated have no lift time and
    sit off the front.
    """
    sweep_dir = Path(sweep_dir)
    if not sweep_dir.is_dir():
        raise FileNotFoundError(sweep_dir)
    entries, skipped = [], 0
    feas = infeas = err = 0
    for e in _load_records(sweep_dir):
        if e is None:
            skipped += 1
            continue
        rec = e["record"]
        if rec.get("error"):
            err += 1
        elif rec["feasible"]:
            feas += 1
            entries.append(e)
        else:
            infeas += 1
    if feas + infeas + err == 0:
        raise ValueError(f"{sweep_dir}: no run records found")
    rows = []
    keyfn = (lambda e: e["object"]) if group_by_object else (lambda e: "")
    groups: dict[str, list[dict]] = {}
    for e in entries:
        groups.setdefault(keyfn(e), []).append(e)
    for key in sorted(groups):
        grp = groups[key]
        D = diversity(np.stack([e["design"].values for e in grp]))
        lift = [e["record"].get("lift_time") for e in grp]
        scored = [i for i, v in enumerate(lift) if v is not None]
        on = set()
        if scored:
            front = pareto_front([(D[i], lift[i]) for i in scored])
            on = {scored[j] for j in front}
        for i, e in enumerate(grp):
            rows.append({"diversity": float(D[i]), "lift_time": lift[i], "v_f": e["v_f"], "E_g": e["E_g"],
                         "E_o": e["E_o"], "on_front": i in on, "object": e["object"], "run": e["run"],
                         "iteration": e["iteration"]})
    pop = None
    if entries:
        pop = DesignPopulation([e["design"] for e in entries],
                               [np.nan if e["record"].get("lift_time") is None else e["record"]["lift_time"]
                                for e in entries],
                               [{k: e[k] for k in ("object", "run", "iteration", "E_g", "E_o", "v_f")}
                                for e in entries])
    return AggregateReport(pop, rows, feas, infeas, err, skipped)


def write_scatter_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SCATTER_COLUMNS)
        w.writeheader()
        for r in rows:
            out = dict(r)
            out["diversity"] = f"{r['diversity']:.10g}"
            out["lift_time"] = "" if r["lift_time"] is None else f"{r['lift_time']:.10g}"
            out["on_front"] = int(r["on_front"])
            w.writerow(out)


def write_aggregate(sweep_dir, report: AggregateReport) -> tuple[Path, Path]:
    sweep_dir = Path(sweep_dir)
    pop_path, front_path = sweep_dir / "population.csv", sweep_dir / "pareto.csv"
    write_scatter_csv(pop_path, report.rows)
    write_scatter_csv(front_path, [r for r in report.rows if r["on_front"]])
    return pop_path, front_path
