"""Sweep planning, resumable execution and aggregation."""
import csv
import hashlib
import json
import logging

import numpy as np
import pytest

from simto import io
from simto.fem import DensityField, GridSpec
from simto.grasp.sim import SimConfig
from simto.loop import LoopConfig
from simto.metrics import diversity, pareto_front
from simto.sweep import (
    SCATTER_COLUMNS,
    SweepGrid,
    SweepSettings,
    aggregate,
    execute_sweep,
    plan,
    write_aggregate,
)
from simto.topopt import TopOptConfig

TINY = SweepSettings(grid=GridSpec(30, 14, 5.0), sim=SimConfig(t=0.6, N_t=24, d_c=30.0, d_l=6.0),
                     topopt=TopOptConfig(max_iterations=8), loop=LoopConfig(max_simto_iterations=1, object_spacing=6.0))
ONE = SweepGrid(moduli_g=(1.39e6,), moduli_o=(1.39e6,), volume_fractions=(0.3,), objects=("circle",))


def tree_hashes(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_default_grid_has_64_runs_per_object():
    g = SweepGrid()
    assert g.runs_per_object == 64
    assert len(plan(g)) == 64


def test_run_ids_are_unique_across_objects():
    g = SweepGrid(objects=("curvy_ball", "star", "shapes/curvy ball.txt"))
    ids = [c.run_id for c in plan(g)]
    assert len(ids) == 192 and len(set(ids)) == 192


def test_empty_axis_rejected():
    with pytest.raises(ValueError):
        SweepGrid(volume_fractions=())


@pytest.fixture(scope="module")
def tiny_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    summary = execute_sweep(ONE, out, TINY, workers=1)
    return out, summary


def test_single_cell_runs_once(tiny_sweep):
    out, summary = tiny_sweep
    assert summary.attempted == 1 and summary.completed == 1 and summary.failed == 0
    runs = [p for p in out.glob("run_*") if p.is_dir()]
    assert len(runs) == 1
    assert (runs[0] / "summary.json").is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert [c["status"] for c in manifest["cells"]] == [summary.statuses[runs[0].name[4:]]]


def test_resume_changes_no_bytes(tiny_sweep):
    out, _ = tiny_sweep
    before = tree_hashes(out)
    again = execute_sweep(ONE, out, TINY, workers=1)
    assert again.skipped == 1 and again.completed == 0
    assert tree_hashes(out) == before


def test_failed_run_does_not_abort(tmp_path):
    grid = SweepGrid(moduli_g=(1.39e6,), moduli_o=(1.39e6,), volume_fractions=(0.3,),
                     objects=(str(tmp_path / "missing.txt"),))
    summary = execute_sweep(grid, tmp_path / "out", TINY, workers=1)
    assert summary.failed == 1 and summary.completed == 0
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["cells"][0]["status"] == "failed"


def test_aggregate_of_real_sweep(tiny_sweep):
    out, summary = tiny_sweep
    rep = aggregate(out)
    assert rep.feasible + rep.infeasible + rep.errored == rep.attempted
    assert rep.feasible == summary.feasible and rep.infeasible == summary.infeasible
    assert len(rep.rows) == rep.feasible


# synthetic sweep directories

def write_run(root, name, designs, grid, meta, lift_times, feasible_flags=None):
    d = root / f"run_{name}"
    d.mkdir(parents=True)
    io.dump_json(d / "config.json", {"domain": {"element_size": grid.element_size, "volume_fraction": meta["v_f"]},
                                     "sim": {"E_g": meta["E_g"], "E_o": meta["E_o"]}, "meta": meta})
    feasible_flags = feasible_flags or [True] * len(designs)
    for k, (rho, lt, ok) in enumerate(zip(designs, lift_times, feasible_flags)):
        it = d / f"iter_{k}"
        it.mkdir()
        io.write_design_csv(it / "design.csv", DensityField(rho, grid))
        io.dump_json(it / "record.json", {"iteration": k, "lift_time": lt, "feasible": ok,
                                          "reasons": [] if ok else ["disconnected"], "error": None})
    return d


def test_three_valid_one_corrupt(tmp_path, caplog):
    grid = GridSpec(6, 4)
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(3, grid.n_elements)).round(6)
    meta = {"object": "circle", "E_g": 1.0, "E_o": 2.0, "v_f": 0.3}
    d = write_run(tmp_path, "a", list(X) + [X[0]], grid, meta, [0.5, 0.7, 0.2, 0.9])
    (d / "iter_3" / "record.json").write_text("{not json")
    with caplog.at_level(logging.WARNING):
        rep = aggregate(tmp_path)
    assert len(rep.population) == 3
    assert rep.skipped_records == 1
    assert sum("corrupt" in r.message for r in caplog.records) == 1


def test_rows_match_metrics_outputs(tmp_path):
    grid = GridSpec(5, 3)
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(6, grid.n_elements)).round(6)
    lifts = [0.3, 0.8, None, 0.1, 0.8, 0.5]
    write_run(tmp_path, "x", list(X[:3]), grid, {"object": "star", "E_g": 1.0, "E_o": 1.0, "v_f": 0.2}, lifts[:3])
    write_run(tmp_path, "y", list(X[3:]), grid, {"object": "star", "E_g": 2.0, "E_o": 1.0, "v_f": 0.25}, lifts[3:])
    rep = aggregate(tmp_path)
    D = diversity(X)
    scored = [i for i, v in enumerate(lifts) if v is not None]
    front = {scored[j] for j in pareto_front([(D[i], lifts[i]) for i in scored])}
    assert len(rep.rows) == 6
    for i, row in enumerate(rep.rows):
        assert row["diversity"] == pytest.approx(D[i], rel=1e-12)
        assert row["lift_time"] == lifts[i]
        assert row["on_front"] == (i in front)
    pop_path, front_path = write_aggregate(tmp_path, rep)
    with pop_path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == SCATTER_COLUMNS
    assert [float(r["diversity"]) for r in rows] == pytest.approx(D.tolist(), rel=1e-9)
    with front_path.open() as fh:
        assert len(list(csv.DictReader(fh))) == len(front)


def test_diversity_grouped_per_object(tmp_path):
    grid = GridSpec(4, 2)
    X = np.random.default_rng(2).uniform(size=(4, grid.n_elements)).round(6)
    write_run(tmp_path, "a", list(X[:2]), grid, {"object": "circle", "E_g": 1.0, "E_o": 1.0, "v_f": 0.2}, [0.1, 0.2])
    write_run(tmp_path, "b", list(X[2:]), grid, {"object": "star", "E_g": 1.0, "E_o": 1.0, "v_f": 0.2}, [0.1, 0.2])
    rep = aggregate(tmp_path)
    got = {(r["object"], r["iteration"]): r["diversity"] for r in rep.rows}
    Dc, Ds = diversity(X[:2]), diversity(X[2:])
    assert got[("circle", 0)] == pytest.approx(Dc[0]) and got[("star", 1)] == pytest.approx(Ds[1])
    pooled = aggregate(tmp_path, group_by_object=False)
    assert [r["diversity"] for r in pooled.rows] == pytest.approx(diversity(X).tolist())


def test_infeasible_designs_counted_not_pooled(tmp_path):
    grid = GridSpec(4, 2)
    X = np.random.default_rng(3).uniform(size=(3, grid.n_elements)).round(6)
    write_run(tmp_path, "a", list(X), grid, {"object": "circle", "E_g": 1.0, "E_o": 1.0, "v_f": 0.2},
              [0.1, 0.2, None], [True, True, False])
    rep = aggregate(tmp_path)
    assert (rep.feasible, rep.infeasible, rep.errored) == (2, 1, 0)
    assert len(rep.population) == 2


def test_empty_directory(tmp_path):
    with pytest.raises(ValueError):
        aggregate(tmp_path)
    with pytest.raises(FileNotFoundError):
        aggregate(tmp_path / "nope")
