"""Experiment orchestration: task generation and pairing, training runs, metrics, reports.

A sweep trains every task of a problem family as the *main* task once per
configuration (single-task baseline, and each two-task mode with and without
the cosine gate), pairing it with a randomly drawn *auxiliary* task.
Reports are plain JSON lines and CSV so that they can be diffed and plotted
without extra dependencies.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import nets, optim
from .errors import (
    AggregationError,
    ConfigError,
    ContractError,
    EvaluationError,
    MetricError,
    TrainingError,
)
from .nets import MODES, ArchitectureSpec, NetworkAssembly
from .pde import InitialConditionSpec, LossWeights, PdeProblem, assemble_loss, make_problem, sample_ic
from .refsolve import DESK_RESOLUTION, GridField, SolverConfig, read_grid, solve, write_grid
from .sampling import SamplingPlan, TrainingBatches, default_plan, next_minibatch, sample_plan

ATL_MODES = tuple(m for m in MODES if m != "single")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ArchitecturePlan:
    """Layer counts and width from which every mode's ArchitectureSpec is built."""

    width: int
    single_layers: int
    expert_layers: int
    tower_layers: int

    def spec(self, mode: str, problem: PdeProblem) -> ArchitectureSpec:
        return ArchitectureSpec.build_default(
            mode, problem.input_dim, problem.field_count, self.width,
            self.single_layers, self.expert_layers, self.tower_layers,
        )


DEFAULT_ARCHITECTURE = {
    "diffreact": ArchitecturePlan(100, 4, 3, 2),
    "burgers": ArchitecturePlan(50, 5, 4, 2),
    "swe": ArchitecturePlan(100, 6, 5, 2),
}

_NESTED = {
    "sampling": SamplingPlan,
    "architecture": ArchitecturePlan,
    "lr_schedule": optim.LrSchedule,
    "loss_weights": LossWeights,
}


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    modes: tuple[str, ...] = MODES
    use_cosine: tuple[bool, ...] = (True, False)
    task_count: int = 100
    pairing_seed: int = 0
    sampling: SamplingPlan | None = None
    architecture: ArchitecturePlan | None = None
    iterations: int = 30_000
    lr_schedule: optim.LrSchedule = optim.LrSchedule()
    loss_weights: LossWeights = LossWeights()
    output_dir: str = "runs"
    # reference grid resolution, network seed, parallel runs, optional pre-generated task directory
    resolution: tuple[int, ...] | None = None
    seed: int = 0
    workers: int = 1
    task_dir: str | None = None

    def __post_init__(self):
        if self.problem not in DEFAULT_ARCHITECTURE:
            raise ConfigError(f"unknown problem {self.problem!r}")
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "use_cosine", tuple(bool(c) for c in self.use_cosine))
        bad = [m for m in self.modes if m not in MODES]
        if bad or not self.modes:
            raise ConfigError(f"modes must be a nonempty subset of {MODES}, got {list(self.modes)}")
        if not self.use_cosine and any(m != "single" for m in self.modes):
            raise ConfigError("use_cosine must list at least one variant for two-task modes")
        if self.task_count < 2:
            raise ConfigError("pairing needs a pool of at least two tasks")
        if self.iterations < 0 or self.workers < 1:
            raise ConfigError("iterations must be nonnegative and workers positive")
        if self.sampling is None:
            object.__setattr__(self, "sampling", default_plan(self.problem))
        if self.architecture is None:
            object.__setattr__(self, "architecture", DEFAULT_ARCHITECTURE[self.problem])
        res = self.resolution or DESK_RESOLUTION[self.problem]
        object.__setattr__(self, "resolution", tuple(int(n) for n in res))

    @property
    def pde(self) -> PdeProblem:
        return make_problem(self.problem)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("modes", "use_cosine", "resolution"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "problem" not in d:
            raise ConfigError("config needs a 'problem'")
        kw = dict(d)
        try:
            for key, typ in _NESTED.items():
                if kw.get(key) is not None:
                    sub = kw[key]
                    extra = sorted(set(sub) - {f.name for f in fields(typ)})
                    if extra:
                        raise ConfigError(f"unknown keys in {key}: {extra}")
                    kw[key] = typ(**sub)
            return cls(**kw)
        except (TypeError, ContractError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(d)


def desk_smoke_config(**overrides) -> ExperimentConfig:
    """Reduced Diffusion-Reaction setup for a 2,000-iteration smoke run on one CPU core.

    Width 32 instead of 100 and 1,000 collocation points instead of 10,000;
    layer counts, point counts on the boundary and initial slice, learning
    rate schedule and loss weights keep their defaults. The reference grid is
    64 x 64.
    """
    kw = dict(
        problem="diffreact",
        task_count=2,
        iterations=2_000,
        sampling=SamplingPlan(1_000, 100, 100, None, 0),
        architecture=ArchitecturePlan(32, 4, 3, 2),
        resolution=(64, 64),
        output_dir="runs/smoke",
    )
    kw.update(overrides)
    return ExperimentConfig(**kw)


# ---------------------------------------------------------------------------
# tasks


@dataclass
class Task:
    task_id: int
    ic: InitialConditionSpec
    grid: GridField | None = None


@dataclass
class TaskPair:
    main: Task
    aux: Task

    def __post_init__(self):
        if self.main.task_id == self.aux.task_id:
            raise ContractError("a task cannot be its own auxiliary task")


def task_ic(kind: str, task_id: int, seed: int) -> InitialConditionSpec:
    """Initial condition of task ``task_id``; independent of how many tasks are drawn."""
    return sample_ic(kind, nets.philox([seed, task_id]))


def generate_tasks(kind: str, n: int, seed: int, resolution=None, solve_grids: bool = True) -> list[Task]:
    res = tuple(resolution or DESK_RESOLUTION[kind])
    tasks = []
    for k in range(n):
        ic = task_ic(kind, k, seed)
        grid = solve(kind, ic, SolverConfig(res)) if solve_grids else None
        tasks.append(Task(k, ic, grid))
    return tasks


def pair_tasks(n: int, seed: int) -> list[int]:
    """Auxiliary task index for each main task: uniform over the other ``n - 1`` tasks."""
    if n < 2:
        raise ContractError("pairing needs at least two tasks")
    draws = nets.philox([seed, 0x5A1B]).integers(0, n - 1, size=n)
    return [int(d + (d >= k)) for k, d in enumerate(draws)]


def write_tasks(tasks: list[Task], kind: str, seed: int, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for t in tasks:
        name = f"task_{t.task_id:04d}.grid"
        write_grid(t.grid, out / name)
        entries.append({"task_id": t.task_id, "ic": t.ic.to_dict(), "file": name})
    manifest = {"problem": kind, "seed": seed, "tasks": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_tasks(task_dir) -> tuple[str, list[Task]]:
    root = Path(task_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    tasks = [
        Task(e["task_id"], InitialConditionSpec.from_dict(e["ic"]), read_grid(root / e["file"]))
        for e in manifest["tasks"]
    ]
    return manifest["problem"], tasks


def load_tasks(config: ExperimentConfig) -> list[Task]:
    if config.task_dir is None:
        return generate_tasks(config.problem, config.task_count, config.pairing_seed, config.resolution)
    kind, tasks = read_tasks(config.task_dir)
    if kind != config.problem or len(tasks) < config.task_count:
        raise ConfigError(f"{config.task_dir} holds {len(tasks)} {kind} tasks")
    return tasks[: config.task_count]


def make_pairs(config: ExperimentConfig, tasks: list[Task] | None = None) -> list[TaskPair]:
    tasks = load_tasks(config) if tasks is None else tasks
    aux = pair_tasks(len(tasks), config.pairing_seed)
    return [TaskPair(tasks[k], tasks[aux[k]]) for k in range(len(tasks))]


# ---------------------------------------------------------------------------
# metrics


def _target(reference) -> np.ndarray:
    # Shallow Water is scored on the water height only, which is the first field
    if isinstance(reference, GridField):
        return reference.values[0]
    return np.asarray(reference, dtype=np.float64)


def compute_l2(prediction, reference) -> float:
    """Relative L2 error ``||pred - ref|| / ||ref||`` over all grid points.

    ``reference`` is a GridField (its first field is used: ``u``, or ``h`` for
    Shallow Water) or a plain array. ``prediction`` must have the shape of
    that field, or of the GridField's full ``values`` array.
    """
    ref = _target(reference)
    pred = np.asarray(prediction, dtype=np.float64)
    if isinstance(reference, GridField) and pred.shape == reference.values.shape:
        pred = pred[0]
    if pred.shape != ref.shape:
        raise ContractError(f"prediction shape {pred.shape} does not match reference {ref.shape}")
    denom = np.linalg.norm(ref.ravel())
    if denom == 0.0:
        raise MetricError("reference has zero norm; relative error undefined")
    return float(np.linalg.norm((pred - ref).ravel()) / denom)


def compute_boost(err_baseline: float, err_mode: float) -> float:
    """Percentage error reduction of a mode versus the baseline."""
    if not err_baseline > 0:
        raise MetricError("baseline error must be positive")
    return 100.0 * (err_baseline - err_mode) / err_baseline


def evaluate_on_grid(net: NetworkAssembly, grid: GridField, chunk: int = 20_000) -> np.ndarray:
    """Main-task prediction shaped like ``grid.values``."""
    out = nets.predict(net, "main", grid.points(), chunk=chunk)
    shape = grid.values.shape[1:]
    return np.stack([out[:, k].reshape(shape) for k in range(out.shape[1])])


# ---------------------------------------------------------------------------
# training


def variant_name(mode: str, use_cosine: bool) -> str:
    if mode == "single":
        return "none"
    return "cos" if use_cosine else "org"


@dataclass
class RunReport:
    task_id: int
    aux_task_id: int | None
    mode: str
    variant: str
    relative_l2: float | None
    loss_history: dict[str, list[float]]
    wall_time: float
    seed: int
    iterations: int
    failed: bool = False
    failure_iteration: int | None = None
    failure_message: str | None = None
    aux_applied: int = 0

    @property
    def use_cosine(self) -> bool:
        return self.variant == "cos"

    @property
    def initial_loss(self) -> float:
        return self.loss_history["total"][0]

    @property
    def final_loss(self) -> float:
        return self.loss_history["total"][-1]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> RunReport:
        return cls(**json.loads(line))


HISTORY_KEYS = ("L_f", "L_b", "L_0", "total")


def _batches(config: ExperimentConfig, problem: PdeProblem, task: Task) -> TrainingBatches:
    return sample_plan(problem, config.sampling, task.ic, stream=task.task_id)


def _step_batches(full: TrainingBatches, plan: SamplingPlan, task_id: int, it: int) -> TrainingBatches:
    if plan.minibatch is None or plan.minibatch >= len(full.collocation):
        return full
    sub = next_minibatch(full.collocation, it, plan.minibatch, seed=plan.seed * 100_003 + task_id)
    return full.with_collocation(sub)


def _check_loss(loss, it: int):
    if not math.isfinite(loss.total):
        raise TrainingError(f"non-finite loss at iteration {it}", iteration=it)


def train_task(config: ExperimentConfig, pair: TaskPair, mode: str, cosine_flag: bool, seed: int | None = None,
               *, return_network: bool = False):
    """Train one configuration on ``pair.main`` and score it on its reference grid.

    Single-task runs use plain Adam on the main-task loss; two-task runs use
    the gated update, with the gate active only when ``cosine_flag``. A
    non-finite loss or gradient ends the run, which is then reported as
    failed at that iteration instead of raising.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "single" and cosine_flag:
        raise ConfigError("the cosine gate needs a shared partition; single mode has none")
    if pair.main.grid is None:
        raise ContractError("main task has no reference grid")
    seed = config.seed if seed is None else seed
    problem = config.pde
    plan = config.sampling
    net = nets.build(config.architecture.spec(mode, problem), seed)
    main_full = _batches(config, problem, pair.main)
    aux_full = _batches(config, problem, pair.aux) if mode != "single" else None
    history = {k: [] for k in HISTORY_KEYS}
    states = optim.init_states(net) if mode != "single" else None
    adam = optim.AdamState.zeros(net.parameters.size) if mode == "single" else None
    applied = 0
    failed_at, message = None, None
    start = time.perf_counter()
    it = 0
    try:
        for it in range(config.iterations):
            lr = config.lr_schedule.lr(it)
            main_loss = assemble_loss(problem, net, "main", _step_batches(main_full, plan, pair.main.task_id, it),
                                      config.loss_weights)
            _check_loss(main_loss, it)
            for k in HISTORY_KEYS:
                history[k].append(getattr(main_loss, k))
            if mode == "single":
                g = net.bind(main_loss.node.tape).flat_grad(main_loss.node)
                params, adam = optim.adam_step(adam, net.parameters, g, lr)
                net = net.with_parameters(params)
            else:
                aux_loss = assemble_loss(problem, net, "aux", _step_batches(aux_full, plan, pair.aux.task_id, it),
                                         config.loss_weights)
                _check_loss(aux_loss, it)
                net, states, decision = optim.gcs_update(net, main_loss, aux_loss, states, lr, cosine_flag)
                applied += decision.aux_applied
    except (EvaluationError, TrainingError) as exc:
        failed_at, message = it, str(exc)
    l2 = None
    if failed_at is None:
        chunk = plan.minibatch or plan.n_collocation
        pred = evaluate_on_grid(net, pair.main.grid, chunk=chunk)
        if np.all(np.isfinite(pred)):
            l2 = compute_l2(pred, pair.main.grid)
        else:
            failed_at, message = config.iterations, "non-finite prediction on the evaluation grid"
    report = RunReport(
        task_id=pair.main.task_id,
        aux_task_id=None if mode == "single" else pair.aux.task_id,
        mode=mode,
        variant=variant_name(mode, cosine_flag),
        relative_l2=l2,
        loss_history=history,
        wall_time=time.perf_counter() - start,
        seed=seed,
        iterations=config.iterations,
        failed=failed_at is not None,
        failure_iteration=failed_at,
        failure_message=message,
        aux_applied=applied,
    )
    return (report, net) if return_network else report


def run_configurations(config: ExperimentConfig) -> list[tuple[str, bool]]:
    """All ``(mode, cosine_flag)`` combinations a sweep trains, in a fixed order."""
    out = []
    for mode in config.modes:
        if mode == "single":
            out.append((mode, False))
        else:
            out.extend((mode, c) for c in config.use_cosine)
    return out


def _run_one(args):
    config, pair, mode, flag = args
    return train_task(config, pair, mode, flag)


def sweep(config: ExperimentConfig, pairs: list[TaskPair] | None = None) -> list[RunReport]:
    """Train every configuration on every task; runs are independent and may run in parallel."""
    pairs = make_pairs(config) if pairs is None else pairs
    jobs = [(config, p, m, c) for p in pairs for m, c in run_configurations(config)]
    if config.workers == 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(_run_one, jobs))


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class AggregateRow:
    mode: str
    variant: str
    mean_l2: float
    mean_boost_pct: float
    wins: int
    tasks: int
    mean_positive_boost_pct: float = math.nan
    failed: int = 0
    per_task: dict[int, tuple[float, float, float]] = field(default_factory=dict, repr=False)


@dataclass
class AggregateTable:
    rows: list[AggregateRow]

    def row(self, mode: str, variant: str | None = None) -> AggregateRow:
        for r in self.rows:
            if r.mode == mode and (variant is None or r.variant == variant):
                return r
        raise KeyError((mode, variant))


def aggregate(reports: list[RunReport]) -> AggregateTable:
    """Per-configuration means over tasks, with boost and wins against the single-task baseline.

    Failed runs are left out of every mean and counted in ``failed``. A task
    whose baseline failed contributes to no two-task row either.
    """
    baseline: dict[int, RunReport] = {}
    for r in reports:
        if r.mode == "single":
            if r.task_id in baseline:
                raise AggregationError(f"duplicate baseline for task {r.task_id}")
            baseline[r.task_id] = r
    orphans = sorted({r.task_id for r in reports if r.mode != "single" and r.task_id not in baseline})
    if orphans:
        raise AggregationError(f"no single-task baseline for tasks {orphans}", orphans)

    groups: dict[tuple[str, str], list[RunReport]] = {}
    for r in reports:
        groups.setdefault((r.mode, r.variant), []).append(r)
    rows = []
    for mode in MODES:
        for variant in ("none", "cos", "org"):
            group = groups.get((mode, variant))
            if not group:
                continue
            per_task, failed = {}, 0
            for r in group:
                base = baseline[r.task_id]
                if r.failed or base.failed:
                    failed += 1
                    continue
                boost = compute_boost(base.relative_l2, r.relative_l2)
                per_task[r.task_id] = (r.relative_l2, base.relative_l2, boost)
            if per_task:
                l2s = [v[0] for v in per_task.values()]
                boosts = [v[2] for v in per_task.values()]
                wins = sum(v[0] < v[1] for v in per_task.values())
                pos = [b for b in boosts if b > 0]
                row = AggregateRow(mode, variant, float(np.mean(l2s)), float(np.mean(boosts)), int(wins),
                                   len(per_task), float(np.mean(pos)) if pos else math.nan, failed, per_task)
            else:
                row = AggregateRow(mode, variant, math.nan, math.nan, 0, 0, math.nan, failed)
            rows.append(row)
    return AggregateTable(rows)


# ---------------------------------------------------------------------------
# smoothing and report files


def smooth_losses(history, sigma: float) -> np.ndarray:
    """Gaussian-smoothed copy of a loss curve (reflective edges, same length)."""
    if not sigma > 0:
        raise ContractError("sigma must be positive")
    return gaussian_filter1d(np.asarray(history, dtype=np.float64), sigma, mode="reflect")


AGGREGATE_COLUMNS = ("mode", "variant", "mean_l2", "mean_boost_pct", "wins", "tasks",
                     "mean_positive_boost_pct", "failed")


def run_filename(report: RunReport) -> str:
    return f"run_t{report.task_id:04d}_{report.mode}_{report.variant}.jsonl"


def write_reports(reports: list[RunReport], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in reports:
        path = out / run_filename(r)
        path.write_text(r.to_json() + "\n")
        paths.append(path)
    return paths


def read_reports(in_dir) -> list[RunReport]:
    reports = []
    for path in sorted(Path(in_dir).glob("*.jsonl")):
        for line in path.read_text().splitlines():
            if line.strip():
                reports.append(RunReport.from_json(line))
    return reports


def write_aggregate_csv(table: AggregateTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGGREGATE_COLUMNS)
        for r in table.rows:
            w.writerow([r.mode, r.variant, repr(r.mean_l2), repr(r.mean_boost_pct), r.wins, r.tasks,
                        repr(r.mean_positive_boost_pct), r.failed])


def write_loss_csv(report: RunReport, path, sigma: float | None = None) -> None:
    cols = {k: np.asarray(report.loss_history[k], dtype=np.float64) for k in HISTORY_KEYS}
    if sigma is not None and len(cols["total"]):
        cols = {k: smooth_losses(v, sigma) for k, v in cols.items()}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("iteration", *HISTORY_KEYS))
        for i in range(len(cols["total"])):
            w.writerow([i, *(repr(float(cols[k][i])) for k in HISTORY_KEYS)])


def compare(config: ExperimentConfig, out_dir=None) -> tuple[list[RunReport], AggregateTable]:
    """Full sweep plus aggregate; writes run reports and ``aggregate.csv`` into ``out_dir``."""
    out = Path(out_dir or config.output_dir)
    reports = sweep(config)
    table = aggregate(reports)
    write_reports(reports, out)
    write_aggregate_csv(table, out / "aggregate.csv")
    return reports, table


__all__ = [
    "ATL_MODES", "AggregateRow", "AggregateTable", "ArchitecturePlan", "DEFAULT_ARCHITECTURE",
    "ExperimentConfig", "RunReport", "Task", "TaskPair", "aggregate", "compare", "compute_boost",
    "compute_l2", "desk_smoke_config", "evaluate_on_grid", "generate_tasks", "make_pairs", "pair_tasks", "read_reports",
    "read_tasks", "run_configurations", "smooth_losses", "sweep", "train_task", "write_aggregate_csv",
    "write_loss_csv", "write_reports", "write_tasks",
]
