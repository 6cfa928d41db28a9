"""Collocation, periodic-boundary and initial point sets.

All draws use Philox streams keyed by ``(seed, stream)`` so that each point
set, and each mini-batch iteration, is reproducible on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .nets import philox
from .pde import InitialConditionSpec, PdeProblem

# stream ids for the independent point sets
_COLLOCATION, _BOUNDARY, _INITIAL, _MINIBATCH = 1, 2, 3, 4


@dataclass(frozen=True)
class SamplingPlan:
    n_collocation: int
    n_boundary_per_edge: int
    n_initial: int
    minibatch: int | None = None
    seed: int = 0

    def __post_init__(self):
        if min(self.n_collocation, self.n_boundary_per_edge, self.n_initial) < 1:
            raise ContractError("point counts must be positive")
        if self.minibatch is not None and not 1 <= self.minibatch <= self.n_collocation:
            raise ContractError("minibatch must lie in [1, n_collocation]")


def default_plan(kind: str, seed: int = 0) -> SamplingPlan:
    if kind == "swe":
        return SamplingPlan(100_000, 1_000, 1_000, 20_000, seed)
    return SamplingPlan(10_000, 100, 100, None, seed)


@dataclass
class PointBatch:
    coords: dict[str, np.ndarray]
    role: str
    values: list[np.ndarray] | None = None

    def __len__(self):
        return len(next(iter(self.coords.values()))) if self.coords else 0

    def take(self, idx) -> PointBatch:
        vals = None if self.values is None else [v[idx] for v in self.values]
        return PointBatch({k: v[idx] for k, v in self.coords.items()}, self.role, vals)


@dataclass
class TrainingBatches:
    collocation: PointBatch
    boundary_pairs: list[tuple[PointBatch, PointBatch]]
    initial: PointBatch
    ic: InitialConditionSpec | None = None
    data: PointBatch | None = None

    def with_collocation(self, coll: PointBatch) -> TrainingBatches:
        return TrainingBatches(coll, self.boundary_pairs, self.initial, self.ic, self.data)


def _open(rng, lo, hi, n):
    # (lo, hi): shift the [0, 1) lattice off zero
    return lo + (hi - lo) * (rng.random(n) + 2.0**-54)


def _half_open_upper(rng, lo, hi, n):
    # (lo, hi]
    return hi - (hi - lo) * rng.random(n)


def _space(problem: PdeProblem, rng, n, closed: bool):
    out = {}
    for name, (lo, hi) in zip(problem.input_names, problem.space_domain):
        out[name] = rng.uniform(lo, hi, n) if closed else _open(rng, lo, hi, n)
    return out


def _time(problem: PdeProblem, rng, n):
    lo, hi = problem.time_domain
    if problem.kind == "swe":
        return rng.uniform(lo, hi, n)
    return _half_open_upper(rng, lo, hi, n)


def sample_plan(problem: PdeProblem, plan: SamplingPlan, ic: InitialConditionSpec | None = None,
                stream: int = 0) -> TrainingBatches:
    """Uniform i.i.d. points over the interior, the periodic edge pairs and the initial slice.

    ``stream`` separates the point sets of different tasks trained under one seed.
    """
    closed = problem.kind == "swe"
    rng = philox([plan.seed, stream, _COLLOCATION])
    coords = _space(problem, rng, plan.n_collocation, closed)
    coords["t"] = _time(problem, rng, plan.n_collocation)
    collocation = PointBatch(coords, "collocation")

    rng = philox([plan.seed, stream, _BOUNDARY])
    pairs = []
    n = plan.n_boundary_per_edge
    for axis, (lo, hi) in zip(problem.input_names, problem.space_domain):
        shared = {}
        for other, (olo, ohi) in zip(problem.input_names, problem.space_domain):
            if other != axis:
                shared[other] = rng.uniform(olo, ohi, n)
        shared["t"] = _time(problem, rng, n)
        side_a = PointBatch({**shared, axis: np.full(n, lo)}, "boundary_pair")
        side_b = PointBatch({**shared, axis: np.full(n, hi)}, "boundary_pair")
        for side in (side_a, side_b):
            side.coords = {k: side.coords[k] for k in problem.input_names}
        pairs.append((side_a, side_b))

    rng = philox([plan.seed, stream, _INITIAL])
    init = _space(problem, rng, plan.n_initial, closed)
    init["t"] = np.zeros(plan.n_initial)
    initial = PointBatch(init, "initial")
    return TrainingBatches(collocation, pairs, initial, ic)


def minibatch_indices(n_total: int, size: int, seed: int, iteration: int) -> np.ndarray:
    if not 1 <= size <= n_total:
        raise ContractError("minibatch size must lie in [1, pool size]")
    rng = philox([seed, _MINIBATCH, iteration])
    return rng.choice(n_total, size=size, replace=False)


def next_minibatch(full_collocation: PointBatch, iteration: int, size: int, seed: int = 0) -> PointBatch:
    """Subset of ``size`` distinct collocation points for ``iteration``.

    Boundary and initial points are never sub-sampled; only the collocation
    pool goes through here.
    """
    idx = minibatch_indices(len(full_collocation), size, seed, iteration)
    return full_collocation.take(idx)
