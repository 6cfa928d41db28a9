import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from atlpinn import harness, pde
from atlpinn.errors import AggregationError, ConfigError, ContractError, MetricError
from atlpinn.harness import ArchitecturePlan, ExperimentConfig, RunReport
from atlpinn.optim import LrSchedule
from atlpinn.pde import LossWeights
from atlpinn.refsolve import SolverConfig, solve
from atlpinn.sampling import SamplingPlan


def tiny_config(**kw):
    base = dict(
        problem="diffreact",
        task_count=3,
        iterations=3,
        sampling=SamplingPlan(24, 6, 6, None, 0),
        architecture=ArchitecturePlan(4, 2, 2, 1),
        resolution=(16, 8),
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def tiny_pairs():
    return harness.make_pairs(tiny_config())


# -- configuration -------------------------------------------------------------


def test_defaults_match_stated_settings():
    dr = ExperimentConfig("diffreact")
    assert dr.iterations == 30_000 and dr.task_count == 100
    assert dr.architecture == ArchitecturePlan(100, 4, 3, 2)
    assert dr.sampling == SamplingPlan(10_000, 100, 100, None, 0)
    assert dr.lr_schedule == LrSchedule(1e-3, 10_000)
    assert dr.loss_weights == LossWeights(1, 1, 1, 0)
    assert ExperimentConfig("burgers").architecture == ArchitecturePlan(50, 5, 4, 2)
    swe = ExperimentConfig("swe")
    assert swe.architecture == ArchitecturePlan(100, 6, 5, 2)
    assert swe.sampling.minibatch == 20_000
    spec = dr.architecture.spec("single", dr.pde)
    assert spec.single_spec.hidden_layers == 4 and spec.single_spec.width == 100


def test_config_json_round_trip(tmp_path):
    cfg = tiny_config(use_cosine=[True])
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.load(path) == cfg


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"problem": "burgers", "learning_rate": 0.1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"problem": "burgers", "sampling": {"n_points": 5}})


@pytest.mark.parametrize(
    "bad",
    [
        {"problem": "heat"},
        {"problem": "burgers", "modes": ["single", "moe"]},
        {"problem": "burgers", "task_count": 1},
        {"problem": "burgers", "iterations": -1},
        {"problem": "burgers", "sampling": {"n_collocation": 0, "n_boundary_per_edge": 1, "n_initial": 1}},
        {"modes": ["single"]},
    ],
)
def test_bad_configs(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "list.json")


# -- tasks and pairing --------------------------------------------------------------


@given(n=st.integers(2, 200), seed=st.integers(0, 2**31))
def test_pairing_never_self(n, seed):
    aux = harness.pair_tasks(n, seed)
    assert len(aux) == n
    assert all(a != k and 0 <= a < n for k, a in enumerate(aux))
    assert aux == harness.pair_tasks(n, seed)


def test_pairing_roughly_uniform():
    counts = np.zeros(5)
    for seed in range(4000):
        counts[harness.pair_tasks(5, seed)[0]] += 1
    assert counts[0] == 0
    np.testing.assert_allclose(counts[1:] / 4000, 0.25, atol=0.03)


def test_pairing_pool_too_small():
    with pytest.raises(ContractError):
        harness.pair_tasks(1, 0)


def test_task_pair_rejects_self():
    t = harness.Task(0, pde.sample_ic("burgers", harness.nets.philox(0)))
    with pytest.raises(ContractError):
        harness.TaskPair(t, t)


def test_task_ic_independent_of_pool_size():
    a = harness.generate_tasks("burgers", 2, 7, solve_grids=False)
    b = harness.generate_tasks("burgers", 5, 7, solve_grids=False)
    assert [t.ic for t in a] == [t.ic for t in b[:2]]


def test_tasks_write_and_read(tmp_path):
    tasks = harness.generate_tasks("diffreact", 2, 3, (16, 4))
    harness.write_tasks(tasks, "diffreact", 3, tmp_path)
    kind, back = harness.read_tasks(tmp_path)
    assert kind == "diffreact"
    for t, b in zip(tasks, back):
        assert t.ic == b.ic and t.grid.same_as(b.grid)


# -- metrics ----------------------------------------------------------------


def reference():
    return solve("diffreact", pde.sample_ic("diffreact", harness.nets.philox(1)), SolverConfig((32, 8)))


def test_l2_examples():
    ref = reference()
    u = ref.values[0]
    assert harness.compute_l2(u, ref) == 0.0
    assert harness.compute_l2(2 * u, ref) == pytest.approx(1.0, rel=1e-14)
    c = np.random.default_rng(0).normal(size=u.shape)
    c *= 0.1 * np.linalg.norm(u) / np.linalg.norm(c)
    assert harness.compute_l2(u + c, ref) == pytest.approx(0.1, rel=1e-12)
    assert harness.compute_l2(ref.values, ref) == 0.0


def test_l2_uses_height_for_swe():
    g = solve("swe", pde.InitialConditionSpec.dambreak(0.5), SolverConfig((8, 8, 3)))
    pred = g.values.copy()
    pred[1:] += 5.0
    assert harness.compute_l2(pred, g) == 0.0


def test_l2_errors():
    ref = reference()
    with pytest.raises(ContractError):
        harness.compute_l2(np.zeros((3, 3)), ref)
    with pytest.raises(MetricError):
        harness.compute_l2(np.ones(4), np.zeros(4))


def test_boost_examples():
    assert harness.compute_boost(7.19e-1, 2.43e-2) == pytest.approx(96.62, abs=0.01)
    assert harness.compute_boost(0.3, 0.3) == 0.0
    assert harness.compute_boost(0.3, 0.6) == pytest.approx(-100.0)
    with pytest.raises(MetricError):
        harness.compute_boost(0.0, 0.1)


# -- training -------------------------------------------------------------------


def test_zero_iterations_scores_untrained_network(tiny_pairs):
    cfg = tiny_config(iterations=0)
    report, net = harness.train_task(cfg, tiny_pairs[0], "mmoe", True, return_network=True)
    assert report.loss_history == {k: [] for k in harness.HISTORY_KEYS}
    untrained = harness.nets.build(cfg.architecture.spec("mmoe", cfg.pde), cfg.seed)
    assert net.parameters.tobytes() == untrained.parameters.tobytes()
    expected = harness.compute_l2(harness.evaluate_on_grid(untrained, tiny_pairs[0].main.grid), tiny_pairs[0].main.grid)
    assert report.relative_l2 == expected
    assert not report.failed and report.relative_l2 >= 0


def test_single_with_cosine_rejected(tiny_pairs):
    with pytest.raises(ConfigError):
        harness.train_task(tiny_config(), tiny_pairs[0], "single", True)


@pytest.mark.parametrize("mode,flag", [("single", False), ("hard", True), ("soft", False), ("ple", True)])
def test_report_shape(tiny_pairs, mode, flag):
    r = harness.train_task(tiny_config(), tiny_pairs[1], mode, flag)
    assert len(r.loss_history["total"]) == 3
    assert r.variant == harness.variant_name(mode, flag)
    assert r.aux_task_id == (None if mode == "single" else tiny_pairs[1].aux.task_id)
    assert r.relative_l2 >= 0 and r.wall_time > 0
    for i in range(3):
        parts = sum(r.loss_history[k][i] for k in ("L_f", "L_b", "L_0"))
        assert r.loss_history["total"][i] == pytest.approx(parts, rel=1e-14)


def test_training_deterministic(tiny_pairs):
    a = harness.train_task(tiny_config(), tiny_pairs[0], "mmoe", True)
    b = harness.train_task(tiny_config(), tiny_pairs[0], "mmoe", True)
    a.wall_time = b.wall_time = 0.0
    assert a.to_json() == b.to_json()


def test_gate_counts_only_for_cosine_variant(tiny_pairs):
    org = harness.train_task(tiny_config(), tiny_pairs[0], "hard", False)
    assert org.aux_applied == 3


def test_minibatched_training_runs():
    cfg = tiny_config(sampling=SamplingPlan(40, 6, 6, 10, 0))
    pair = harness.make_pairs(cfg)[0]
    r = harness.train_task(cfg, pair, "hard", True)
    assert not r.failed and len(r.loss_history["total"]) == 3


def test_non_finite_loss_marks_run_failed(tiny_pairs, monkeypatch):
    real = harness.assemble_loss
    calls = {"n": 0}

    def flaky(*args, **kw):
        loss = real(*args, **kw)
        calls["n"] += 1
        if calls["n"] == 3:
            loss.total = math.nan
        return loss

    monkeypatch.setattr(harness, "assemble_loss", flaky)
    r = harness.train_task(tiny_config(iterations=5), tiny_pairs[0], "single", False)
    assert r.failed and r.failure_iteration == 2
    assert r.relative_l2 is None
    assert len(r.loss_history["total"]) == 2


# -- aggregation ----------------------------------------------------------------


def rep(task, mode, variant, l2, failed=False):
    return RunReport(task, None if mode == "single" else task + 1, mode, variant, None if failed else l2,
                     {k: [] for k in harness.HISTORY_KEYS}, 0.0, 0, 0, failed)


def test_aggregate_hand_fixture():
    reports = [
        rep(0, "single", "none", 0.5), rep(1, "single", "none", 0.2),
        rep(0, "hard", "cos", 0.25), rep(1, "hard", "cos", 0.3),
        rep(0, "mmoe", "org", 0.45), rep(1, "mmoe", "org", 0.14),
    ]
    t = harness.aggregate(reports)
    base = t.row("single", "none")
    assert (base.mean_l2, base.mean_boost_pct, base.wins, base.tasks) == (pytest.approx(0.35), 0.0, 0, 2)
    hard = t.row("hard", "cos")
    assert hard.mean_l2 == pytest.approx(0.275)
    assert hard.mean_boost_pct == pytest.approx((50.0 - 50.0) / 2)
    assert hard.wins == 1 and hard.mean_positive_boost_pct == pytest.approx(50.0)
    mmoe = t.row("mmoe", "org")
    assert mmoe.wins == 2 and mmoe.mean_boost_pct == pytest.approx((10.0 + 30.0) / 2)


def test_aggregate_single_win():
    t = harness.aggregate([rep(0, "single", "none", 0.4), rep(0, "ple", "cos", 0.1)])
    assert (t.row("ple").wins, t.row("ple").tasks) == (1, 1)


def test_aggregate_identical_modes():
    reports = [rep(k, "single", "none", 0.1 * (k + 1)) for k in range(3)]
    reports += [rep(k, "soft", "org", 0.1 * (k + 1)) for k in range(3)]
    row = harness.aggregate(reports).row("soft")
    assert row.wins == 0 and row.mean_boost_pct == 0.0 and math.isnan(row.mean_positive_boost_pct)


def test_aggregate_orphans():
    with pytest.raises(AggregationError) as info:
        harness.aggregate([rep(0, "single", "none", 0.1), rep(3, "hard", "cos", 0.1), rep(5, "ple", "org", 0.2)])
    assert info.value.orphans == (3, 5)


def test_aggregate_excludes_failed():
    reports = [
        rep(0, "single", "none", 0.4), rep(1, "single", "none", 0.2, failed=True),
        rep(0, "hard", "cos", 0.2), rep(1, "hard", "cos", 0.1), rep(2, "single", "none", 0.3),
        rep(2, "hard", "cos", 0.1, failed=True),
    ]
    row = harness.aggregate(reports).row("hard", "cos")
    assert row.tasks == 1 and row.failed == 2 and row.mean_l2 == 0.2
    assert harness.aggregate(reports).row("single").failed == 1


@given(errs=st.lists(st.tuples(st.floats(1e-4, 10), st.floats(0, 10)), min_size=1, max_size=30))
def test_aggregate_conservation(errs):
    reports = []
    for k, (b, m) in enumerate(errs):
        reports += [rep(k, "single", "none", b), rep(k, "mmoe", "cos", m)]
    row = harness.aggregate(reports).row("mmoe", "cos")
    recomputed = np.mean([100 * (b - m) / b for b, m in errs])
    assert abs(row.mean_boost_pct - recomputed) <= 1e-12 * max(1.0, abs(recomputed))
    assert row.mean_boost_pct == pytest.approx(np.mean([v[2] for v in row.per_task.values()]), abs=1e-12)
    assert row.wins == sum(m < b for b, m in errs) <= row.tasks


# -- smoothing ------------------------------------------------------------------


def test_smooth_constant_unchanged():
    np.testing.assert_allclose(harness.smooth_losses(np.full(50, 3.5), 4.0), 3.5, rtol=1e-15)


def test_smooth_impulse_matches_discrete_kernel():
    x = np.zeros(41)
    x[20] = 1.0
    out = harness.smooth_losses(x, 1.0)
    # truncated Gaussian kernel normalized to unit mass (radius 4 sigma)
    k = np.exp(-0.5 * np.arange(-4, 5) ** 2)
    k /= k.sum()
    assert out[20] == pytest.approx(k[4], rel=1e-12)
    assert out[20] == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-4)
    np.testing.assert_allclose(out[16:25], k, rtol=1e-12)


@given(st.lists(st.floats(0, 1e3), min_size=20, max_size=200), st.floats(0.5, 3.0))
def test_smooth_preserves_length_and_mean(xs, sigma):
    x = np.asarray(xs)
    x = np.concatenate([x, x[::-1]])  # reflective edges conserve mass exactly for mirrored input
    out = harness.smooth_losses(x, sigma)
    assert out.shape == x.shape
    assert abs(out.mean() - x.mean()) <= 1e-12 * max(1.0, abs(x.mean()))


def test_smooth_needs_positive_sigma():
    with pytest.raises(ContractError):
        harness.smooth_losses([1.0, 2.0], 0.0)


# -- files ------------------------------------------------------------------------


def test_reports_round_trip(tmp_path, tiny_pairs):
    r = harness.train_task(tiny_config(), tiny_pairs[2], "soft", True)
    harness.write_reports([r], tmp_path)
    (back,) = harness.read_reports(tmp_path)
    assert back == r


def test_loss_csv(tmp_path, tiny_pairs):
    r = harness.train_task(tiny_config(iterations=4), tiny_pairs[2], "single", False)
    path = tmp_path / "loss.csv"
    harness.write_loss_csv(r, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["iteration", "L_f", "L_b", "L_0", "total"]
    assert len(rows) == 5
    assert float(rows[1][4]) == r.loss_history["total"][0]
    harness.write_loss_csv(r, path, sigma=1.0)
    assert len(list(csv.reader(path.open()))) == 5


def test_compare_writes_reports_and_aggregate(tmp_path):
    cfg = tiny_config(task_count=2, modes=("single", "hard"), iterations=2)
    reports, table = harness.compare(cfg, tmp_path)
    assert len(reports) == 2 * 3
    assert len(list(tmp_path.glob("run_*.jsonl"))) == 6
    rows = list(csv.reader((tmp_path / "aggregate.csv").open()))
    assert rows[0][:6] == ["mode", "variant", "mean_l2", "mean_boost_pct", "wins", "tasks"]
    assert [r[:2] for r in rows[1:]] == [["single", "none"], ["hard", "cos"], ["hard", "org"]]


def test_parallel_sweep_matches_serial():
    cfg = tiny_config(task_count=2, modes=("single", "mmoe"), use_cosine=(True,), iterations=2)
    serial = harness.sweep(cfg)
    parallel = harness.sweep(ExperimentConfig(**{**cfg.__dict__, "workers": 2}))
    for a, b in zip(serial, parallel):
        a.wall_time = b.wall_time = 0.0
        assert a.to_json() == b.to_json()
