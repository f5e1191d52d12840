"""Population metrics: geometric diversity, Pareto fronts and the grasp evaluation protocol."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .fem import DensityField
from .grasp.mesh import BodyMesh
from .grasp.sim import Pose, SimConfig, SimulationError, grasp_outcome, simulate

log = logging.getLogger(__name__)


@dataclass
class DesignPopulation:
    designs: list[DensityField]
    lift_times: list[float]
    metadata: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.designs:
            raise ValueError("population is empty")
        grid = self.designs[0].grid
        if any(d.grid != grid for d in self.designs):
            raise ValueError("all designs must share one grid")
        if len(self.lift_times) != len(self.designs):
            raise ValueError("one lift time per design is required")
        if not self.metadata:
            self.metadata = [{} for _ in self.designs]
        if len(self.metadata) != len(self.designs):
            raise ValueError("one metadata entry per design is required")

    def __len__(self):
        return len(self.designs)

    def matrix(self) -> np.ndarray:
        return np.stack([d.values for d in self.designs])


def diversity(population, norm: str = "euclidean") -> np.ndarray:
    """Distance of every design from the population mean, ``D_i = ||rho_i - mean||``.

    ``population`` is a :class:`DesignPopulation` or a (K, n) array.
    """
    X = population.matrix() if isinstance(population, DesignPopulation) else np.atleast_2d(
        np.asarray(population, dtype=float))
    if X.shape[0] == 0 or X.size == 0:
        raise ValueError("population is empty")
    dev = X - X.mean(axis=0)
    if norm == "euclidean":
        return np.sqrt(np.einsum("ij,ij->i", dev, dev))
    if norm == "l1":
        return np.abs(dev).sum(axis=1)
    if norm == "max":
        return np.abs(dev).max(axis=1)
    raise ValueError(f"unknown norm {norm!r}")


def pareto_front(points) -> list[int]:
    """Indices of points not dominated when both coordinates are maximized, ascending."""
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    if P.shape[0] == 0:
        raise ValueError("no points")
    order = np.lexsort((-P[:, 1], -P[:, 0]))  # x descending, then y descending
    front = []
    best_prev = -np.inf  # max y among strictly larger x
    i = 0
    n = order.size
    while i < n:
        j = i
        x = P[order[i], 0]
        while j < n and P[order[j], 0] == x:
            j += 1
        group = order[i:j]
        gmax = P[group[0], 1]
        if gmax > best_prev:
            front.extend(int(g) for g in group if P[g, 1] == gmax)
        best_prev = max(best_prev, gmax)
        i = j
    return sorted(front)


# evaluation protocol -------------------------------------------------------------------------

EVALUATION_POSES = (
    Pose(),
    Pose(rotation=5.0),
    Pose(rotation=10.0),
    Pose(translation=(6.0, 0.0)),
    Pose(translation=(12.0, 0.0)),
    Pose(translation=(0.0, 8.0)),
    Pose(translation=(0.0, 16.0)),
)


def evaluation_config(base: SimConfig | None = None) -> SimConfig:
    """8 s grasps, 80 mm squeeze then 40 mm lift, at the base step size; 0.1 mm seed jitter."""
    base = base or SimConfig()
    dt = base.t / base.N_t
    n = int(round(8.0 / dt))
    return replace(base, t=8.0, N_t=n + (n % 2), d_c=80.0, d_l=40.0, pose_jitter=0.1)


@dataclass(frozen=True)
class Trial:
    object: str
    pose: int
    seed: int
    success: bool
    lift_time: float
    peak_stress: float  # Pa
    failed: bool = False  # simulator error, counted as unsuccessful
    message: str = ""


@dataclass
class ObjectSummary:
    object: str
    trials: list[Trial]

    @property
    def n(self) -> int:
        return len(self.trials)

    @property
    def successes(self) -> int:
        return sum(t.success for t in self.trials)

    @property
    def success_rate(self) -> float:
        return self.successes / self.n if self.n else 0.0

    @property
    def stress(self) -> tuple[float, float]:
        s = np.array([t.peak_stress for t in self.trials if not t.failed])
        if s.size == 0:
            return float("nan"), float("nan")
        return float(s.mean()), float(s.std())


@dataclass
class EvaluationSummary:
    in_domain: ObjectSummary | None
    out_domain: list[ObjectSummary]

    @property
    def out_domain_trials(self) -> int:
        return sum(o.n for o in self.out_domain)

    @property
    def out_domain_success(self) -> float:
        n = self.out_domain_trials
        return sum(o.successes for o in self.out_domain) / n if n else float("nan")


def success_rate(successes: int, trials: int) -> float:
    if trials <= 0:
        raise ValueError("no trials")
    if not 0 <= successes <= trials:
        raise ValueError("successes must lie in [0, trials]")
    return successes / trials


def _trial(args) -> Trial:
    finger, obj_name, obj, pose_idx, pose, seed, cfg = args
    cfg = replace(cfg, seed=seed)
    try:
        ok, lift, stress = grasp_outcome(simulate(finger, obj, (Pose(), pose), cfg))
        return Trial(obj_name, pose_idx, seed, ok, lift, stress)
    except (SimulationError, ValueError, FloatingPointError) as exc:
        return Trial(obj_name, pose_idx, seed, False, 0.0, float("nan"), True, str(exc))


def default_workers() -> int:
    env = os.environ.get("SIMTO_THREADS")
    if env:
        return max(1, int(env))
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


def evaluation_protocol(finger: BodyMesh, objects: dict[str, BodyMesh], sim_config: SimConfig | None = None,
                        seeds: int = 5, poses=EVALUATION_POSES, in_domain: str | None = None,
                        workers: int | None = None, runner=None) -> EvaluationSummary:
    """Grasp every object at every pose and seed; ``in_domain`` names the object the design was made for.

    ``runner`` replaces the simulator call (takes the argument tuple, returns a :class:`Trial`).
    """
    if seeds < 1 or not poses or not objects:
        raise ValueError("need at least one seed, pose and object")
    cfg = sim_config or evaluation_config()
    jobs = [(finger, name, obj, p, pose, s, cfg)
            for name, obj in objects.items() for p, pose in enumerate(poses) for s in range(seeds)]
    runner = runner or _trial
    workers = workers or default_workers()
    if workers > 1 and len(jobs) > 1 and runner is _trial:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            trials = list(ex.map(runner, jobs))
    else:
        trials = [runner(j) for j in jobs]
    trials.sort(key=lambda t: (t.object, t.pose, t.seed))
    for t in trials:
        if t.failed:
            log.warning("%s pose %d seed %d: simulation failed (%s)", t.object, t.pose, t.seed, t.message)
    by_obj = {name: ObjectSummary(name, [t for t in trials if t.object == name]) for name in objects}
    ind = by_obj.pop(in_domain) if in_domain in by_obj else None
    return EvaluationSummary(ind, [by_obj[k] for k in sorted(by_obj)])


RESULT_COLUMNS = ["object", "design", "E_g_opt", "E_o_opt", "v_f_opt", "iters", "stress_mean", "stress_std",
                  "in_domain_success", "out_domain_success"]


def results_row(obj: str, design: str, E_g: float, E_o: float, v_f: float, iters: int,
                summary: EvaluationSummary) -> dict:
    ind = summary.in_domain
    mean, std = ind.stress if ind is not None else (float("nan"), float("nan"))
    return {
        "object": obj, "design": design, "E_g_opt": E_g, "E_o_opt": E_o, "v_f_opt": v_f, "iters": iters,
        "stress_mean": mean, "stress_std": std,
        "in_domain_success": ind.success_rate if ind is not None else float("nan"),
        "out_domain_success": summary.out_domain_success,
    }


def write_results_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
