import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdriftfl.data import TimestepBatch, build_schedule, build_stream
from gdriftfl.errors import ConfigurationError, EmptyInputError
from gdriftfl.federation import (
    INF,
    AlgorithmKind,
    CostCounters,
    FederationConfig,
    LossProfile,
    ModelPool,
    assign_fair,
    assign_feddrift,
    assign_oracle,
    cross_gap,
    decide_fair,
    decide_global,
    distance_matrix,
    merge_matrix,
    merge_step,
    plan_merges,
    read_counters,
    run_federation,
    spawn_model,
    train_round,
    train_seed,
)
from gdriftfl.model import Architecture, ModelParams, TrainConfig, init_params, local_train

TINY = Architecture(1, 1, 1)  # 4 parameters, handy for hand arithmetic
SMALL_TRAIN = TrainConfig(epochs=1, batch_size=16, lr=0.1)


def P(values):
    return LossProfile(sum(values.values()) / max(len(values), 1), dict(values))


def _batch(k, t, n, arch=Architecture(4, 10, 5), seed=0, groups=None):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, arch.n_inputs))
    y = rng.integers(0, arch.n_classes, n)
    g = np.asarray(groups) if groups is not None else np.arange(n) % 2
    return TimestepBatch(k, t, X, y, g, "A")


def _small_run(algorithm, scenario="4.1", seed=0, size=40, alpha=0.5, **kw):
    schedule = build_schedule(scenario)
    streams = build_stream("synthetic", schedule, alpha, size, seed)
    cfg = FederationConfig(rounds=2, train=SMALL_TRAIN, algorithm=algorithm, seed=seed, **kw)
    return run_federation(cfg, streams, schedule), schedule


# --- assignment decisions ------------------------------------------------------------


def test_fair_hand_table_picks_admissible_model():
    table = {0: P({0: 0.9, 1: 0.2}), 1: P({0: 0.3, 1: 0.3})}
    assert decide_fair(table, {0: 0.4, 1: 0.4}, 0.1) == 1


def test_fair_infinite_delta_never_new():
    table = {0: P({0: 50.0, 1: 1.0}), 1: P({0: 9.0, 1: 9.0}), 2: P({0: 40.0, 1: 2.0})}
    assert decide_fair(table, {0: 0.0, 1: 0.0}, math.inf) == 1  # sums 51, 18, 42


def test_fair_all_violate_returns_new():
    table = {0: P({0: 0.9, 1: 0.2}), 1: P({0: 0.3, 1: 0.8})}
    assert decide_fair(table, {0: 0.4, 1: 0.4}, 0.1) is None


def test_fair_tie_breaks_on_lowest_id():
    table = {3: P({0: 0.2, 1: 0.3}), 1: P({0: 0.3, 1: 0.2})}
    assert decide_fair(table, {0: 1.0, 1: 1.0}, 1.0) == 1


def test_absent_group_imposes_no_constraint():
    # group 0 missing from the batch: only group 1 is checked and summed
    table = {0: P({1: 0.45})}
    assert decide_fair(table, {0: 0.0, 1: 0.4}, 0.1) == 0


def test_per_group_delta_mapping():
    table = {0: P({0: 0.9, 1: 0.2})}
    assert decide_fair(table, {0: 0.4, 1: 0.4}, {0: 0.6, 1: 0.1}) == 0
    assert decide_fair(table, {0: 0.4, 1: 0.4}, {0: 0.4, 1: 0.1}) is None


def test_feddrift_masks_group_drift_that_fair_detects():
    # group 0 is 10% of the batch: its loss jumps by 0.8, the mean by only 0.08
    ref_groups = {0: 0.3, 1: 0.3}
    table = {0: LossProfile(0.3 + 0.08, {0: 1.1, 1: 0.3})}
    assert decide_global(table, 0.3, 0.5) == 0
    assert decide_fair(table, ref_groups, 0.5) is None


def test_feddrift_cases():
    assert decide_global({0: LossProfile(0.4, {})}, 0.3, 0.5) == 0
    table = {0: LossProfile(1.6, {}), 1: LossProfile(1.7, {})}
    assert decide_global(table, 0.4, 0.5) is None


@settings(max_examples=80, deadline=None)
@given(
    losses=st.lists(st.tuples(st.floats(0, 5), st.floats(0, 5)), min_size=1, max_size=5),
    refs=st.tuples(st.floats(0, 5), st.floats(0, 5)),
    delta=st.floats(0.01, 3),
    exp=st.integers(-3, 3),
)
def test_assignment_scale_invariance(losses, refs, delta, exp):
    # powers of two keep the scaling exact in floating point
    c = 2.0**exp
    table = {m: P({0: a, 1: b}) for m, (a, b) in enumerate(losses)}
    scaled = {m: P({0: a * c, 1: b * c}) for m, (a, b) in enumerate(losses)}
    r = {0: refs[0], 1: refs[1]}
    rs = {0: refs[0] * c, 1: refs[1] * c}
    assert decide_fair(table, r, delta) == decide_fair(scaled, rs, delta * c)


def test_assign_fair_on_pool_and_empty_batch():
    pool = ModelPool(Architecture(4, 10, 5))
    pool.add(init_params(pool.arch, 0))
    pool.ref_group[0] = {0: 100.0, 1: 100.0}
    choice, table = assign_fair(pool, 0, _batch(0, 1, 20), 1.0)
    assert choice == 0 and set(table[0].by_group) == {0, 1}
    empty = TimestepBatch(0, 1, np.zeros((0, 4)), np.zeros(0, int), np.zeros(0, int), "A")
    with pytest.raises(EmptyInputError):
        assign_fair(pool, 0, empty, 1.0)
    with pytest.raises(EmptyInputError):
        assign_feddrift(pool, 0, empty, 1.0)


def test_oracle_assignment():
    s = build_schedule("4.1")
    assert assign_oracle(s, 0, 0) == 0
    # client 0 is in B at t=2, client 5 at t=3
    assert assign_oracle(s, 0, 2) == assign_oracle(s, 5, 3) == 1


# --- spawning ----------------------------------------------------------------


def test_spawn_sets_min_reference_losses():
    pool = ModelPool(TINY)
    pool.add(init_params(TINY, 0))
    pool.add(init_params(TINY, 1))
    table = {0: LossProfile(0.6, {0: 0.9, 1: 0.2}), 1: LossProfile(0.7, {0: 0.5, 1: 0.8})}
    new = spawn_model(pool, 3, 4, table, seed=0)
    assert new == 2 and pool.history[3][4] == 2 and len(pool.models) == 3
    assert pool.ref_group[3] == {0: 0.5, 1: 0.2}
    assert pool.ref_overall[3] == 0.6


def test_two_spawns_in_one_timestep_are_distinct():
    pool = ModelPool(TINY)
    pool.add(init_params(TINY, 0))
    table = {0: LossProfile(1.0, {0: 1.0, 1: 1.0})}
    a = spawn_model(pool, 0, 1, table, seed=0)
    b = spawn_model(pool, 1, 1, table, seed=0)
    assert a != b and len(pool.models) == 3


def test_model_ids_never_reused():
    pool = ModelPool(TINY)
    pool.add(init_params(TINY, 0))
    pool.aliases[5] = 0
    with pytest.raises(ConfigurationError):
        pool.add(init_params(TINY, 0), 5)


# --- merge matrix --------------------------------------------------------------------


def test_distance_matrix_hand_case():
    evals = {
        (0, 0): [P({0: 0.2, 1: 0.2})],
        (0, 1): [P({0: 0.35, 1: 0.35})],  # L_01 - L_00 = 0.3
        (1, 1): [P({0: 0.1, 1: 0.1})],
        (1, 0): [P({0: 0.15, 1: 0.15})],  # L_10 - L_11 = 0.1
    }
    Z = distance_matrix([0, 1], evals, 0.5)
    assert Z[0, 1] == Z[1, 0] == pytest.approx(0.3)
    assert Z[0, 0] == INF


def test_distance_matrix_group_threshold_forces_inf():
    evals = {
        (0, 0): [P({0: 0.1, 1: 0.1})],
        (0, 1): [P({0: 1.0, 1: 0.0})],  # group 0 rises by 0.9 > 0.5, sum is still 0.8
        (1, 1): [P({0: 0.1, 1: 0.1})],
        (1, 0): [P({0: 0.1, 1: 0.1})],
    }
    assert distance_matrix([0, 1], evals, 0.5)[0, 1] == INF
    # the global variant only sees the mean change
    assert distance_matrix([0, 1], evals, 0.5, fairness_aware=False)[0, 1] == pytest.approx(0.4)


def test_cross_gap_is_max_over_client_pairs_and_floored():
    cross = [P({0: 0.5, 1: 0.5}), P({0: 0.2, 1: 0.2})]
    own = [P({0: 0.3, 1: 0.3}), P({0: 0.4, 1: 0.4})]
    # pairs: 0.4, 0.2, -0.2, -0.4
    assert cross_gap(cross, own, 1.0) == pytest.approx(0.4)
    assert cross_gap([], own, 1.0) == INF
    evals = {(0, 0): [P({0: 1.0})], (0, 1): [P({0: 0.5})], (1, 1): [P({0: 1.0})], (1, 0): [P({0: 0.5})]}
    assert distance_matrix([0, 1], evals, 1.0)[0, 1] == 0.0


def _pool_with_history(arch, specs):
    """specs: list of (client, t, model id, batch size)."""
    pool = ModelPool(arch)
    for k, t, m, n in specs:
        if m not in pool.models:
            pool.add(init_params(arch, m), m)
        pool.history.setdefault(k, {})[t] = m
        pool.windows.setdefault(k, {})[t] = _batch(k, t, n, arch, seed=10 * k + t)
    return pool


def test_identical_models_on_shared_distribution_have_zero_distance():
    arch = Architecture(4, 10, 5)
    pool = _pool_with_history(arch, [(0, 0, 0, 50), (1, 0, 1, 50)])
    pool.models[1] = pool.models[0].copy()
    pool.windows[1][0] = pool.windows[0][0]
    ids, Z = merge_matrix(pool, 1, 0.5)
    assert Z[0, 1] == pytest.approx(0.0, abs=1e-12)


def test_fresh_model_without_history_is_inf():
    arch = Architecture(4, 10, 5)
    pool = _pool_with_history(arch, [(0, 0, 0, 30), (1, 1, 1, 30)])
    # at t=1 model 1 only has data from the current timestep
    ids, Z = merge_matrix(pool, 1, 10.0)
    assert Z[0, 1] == INF
    ids, Z = merge_matrix(pool, 2, 10.0)
    assert Z[0, 1] < INF


def test_merge_counter_counts_group_evaluations():
    arch = Architecture(4, 10, 5)
    pool = _pool_with_history(arch, [(0, 0, 0, 30), (1, 0, 1, 30), (2, 0, 1, 30)])
    counters = CostCounters()
    merge_matrix(pool, 1, 1.0, True, counters)
    # 2 models x 3 client datasets x 2 groups
    assert counters.merge_loss_evaluations == 12


# --- merge loop ---------------------------------------------------------------


def _brute_force_merges(ids, Z):
    """Independent complete-linkage trace over clusters of original ids."""
    index = {m: a for a, m in enumerate(ids)}
    clusters = {m: [m] for m in ids}
    next_id = max(ids) + 1
    trace = []
    while len(clusters) >= 2:
        best = None
        names = sorted(clusters, key=lambda c: list(clusters).index(c))
        for a, ca in enumerate(names):
            for cb in names[a + 1 :]:
                d = max(Z[index[x], index[y]] for x in clusters[ca] for y in clusters[cb])
                if best is None or d < best[0]:
                    best = (d, ca, cb)
        if best[0] == INF:
            break
        d, ca, cb = best
        members = clusters.pop(ca) + clusters.pop(cb)
        clusters[next_id] = members
        trace.append((ca, cb, next_id, d))
        next_id += 1
    return trace


def _sym(n, entries):
    Z = np.full((n, n), INF)
    for (a, b), v in entries.items():
        Z[a, b] = Z[b, a] = v
    return Z


def test_plan_merges_single_finite_pair():
    Z = _sym(3, {(0, 1): 0.1})
    plan = plan_merges([0, 1, 2], Z, 3)
    assert [(m.left, m.right, m.new) for m in plan] == [(0, 1, 3)]


def test_plan_merges_all_inf_is_noop():
    assert plan_merges([0, 1, 2], _sym(3, {}), 3) == []


def test_plan_merges_three_model_hand_trace():
    Z = _sym(3, {(0, 1): 0.1, (0, 2): 0.4, (1, 2): 0.2})
    plan = plan_merges([0, 1, 2], Z, 3)
    # (0,1) -> 3 at 0.1; distance(3, 2) = max(0.4, 0.2) = 0.4 -> 4
    assert [(m.left, m.right, m.new, m.distance) for m in plan] == [(0, 1, 3, 0.1), (2, 3, 4, 0.4)]
    assert [(m.left, m.right, m.new, m.distance) for m in plan] == _brute_force_merges([0, 1, 2], Z)


def test_plan_merges_complete_linkage_blocks_inf():
    # 0-1 close, 1-2 close, but 0-2 incompatible: only one merge happens
    Z = _sym(3, {(0, 1): 0.1, (1, 2): 0.2})
    plan = plan_merges([0, 1, 2], Z, 3)
    assert len(plan) == 1


@settings(max_examples=100, deadline=None)
@given(
    n=st.integers(2, 5),
    data=st.data(),
)
def test_plan_merges_matches_brute_force(n, data):
    values = st.one_of(st.just(INF), st.sampled_from([0.0, 0.1, 0.2, 0.3, 0.5, 0.7]))
    entries = {(a, b): data.draw(values) for a in range(n) for b in range(a + 1, n)}
    Z = _sym(n, entries)
    ids = list(range(n))
    plan = plan_merges(ids, Z, n)
    assert [(m.left, m.right, m.new, m.distance) for m in plan] == _brute_force_merges(ids, Z)
    # every consumed distance is finite and no merged cluster contains an INF pair
    assert all(m.distance < INF for m in plan)


def test_merge_step_weights_by_history():
    pool = _pool_with_history(TINY, [(0, 0, 0, 100), (1, 0, 1, 300)])
    pool.models[0] = ModelParams(TINY, np.full(4, 2.0))
    pool.models[1] = ModelParams(TINY, np.full(4, 6.0))
    Z = _sym(2, {(0, 1): 0.05})
    plan = merge_step(pool, [0, 1], Z, t=1)
    assert [(m.left, m.right, m.new) for m in plan] == [(0, 1, 2)]
    assert pool.ids() == [2]
    np.testing.assert_allclose(pool.models[2].values, 5.0)
    assert pool.history[0][0] == pool.history[1][0] == 2
    assert pool.resolve(0) == pool.resolve(1) == 2


# --- training rounds -------------------------------------------------------------


def test_train_round_weights_by_dataset_size():
    arch = Architecture(4, 10, 5)
    pool = _pool_with_history(arch, [(0, 0, 0, 100), (1, 0, 0, 300)])
    pool.add(init_params(arch, 7), 1)  # no participants
    untouched = pool.models[1].values.copy()
    start = pool.models[0].copy()
    cfg = FederationConfig(n_clients=2, rounds=1, train=SMALL_TRAIN, seed=3)
    counters = CostCounters()
    train_round(pool, 0, 0, cfg, counters)

    trained = []
    for k in (0, 1):
        b = pool.windows[k][0]
        tc = replace(SMALL_TRAIN, seed=train_seed(3, k, 0, 0, 0))
        trained.append(local_train(start, b.X, b.y, tc).values)
    np.testing.assert_allclose(pool.models[0].values, 0.25 * trained[0] + 0.75 * trained[1], atol=1e-15)
    assert np.array_equal(pool.models[1].values, untouched)
    assert counters.models_sent_to_clients == 2 * 2
    assert counters.models_sent_to_server == counters.training_passes == 2


def test_train_round_equal_sizes_is_plain_average():
    arch = Architecture(4, 10, 5)
    pool = _pool_with_history(arch, [(k, 0, 0, 40) for k in range(3)])
    start = pool.models[0].copy()
    cfg = FederationConfig(n_clients=3, rounds=1, train=SMALL_TRAIN, seed=1)
    train_round(pool, 0, 0, cfg)
    trained = [
        local_train(start, pool.windows[k][0].X, pool.windows[k][0].y,
                    replace(SMALL_TRAIN, seed=train_seed(1, k, 0, 0, 0))).values
        for k in range(3)
    ]
    np.testing.assert_allclose(pool.models[0].values, np.mean(trained, axis=0), atol=1e-15)


# --- counters ------------------------------------------------------------------------


def test_fedavg_send_count():
    schedule = build_schedule("none", 10, 2)
    streams = build_stream("synthetic", schedule, 0.5, 20, 0)
    cfg = FederationConfig(n_timesteps=2, rounds=10, train=SMALL_TRAIN, algorithm="fedavg")
    result = run_federation(cfg, streams, schedule)
    assert result.counters.models_sent_to_clients == 200
    assert result.counters.group_loss_evaluations == 0


def test_two_model_round_sends():
    arch = Architecture(4, 10, 5)
    pool = _pool_with_history(arch, [(k, 0, k % 2, 20) for k in range(10)])
    counters = CostCounters()
    train_round(pool, 0, 0, FederationConfig(n_clients=10, rounds=1, train=SMALL_TRAIN), counters)
    assert counters.models_sent_to_clients == 20


def test_assignment_evaluation_count():
    arch = Architecture(4, 10, 5)
    pool = ModelPool(arch)
    for m in range(3):
        pool.add(init_params(arch, m))
    counters = CostCounters()
    for k in range(10):
        assign_fair(pool, k, _batch(k, 1, 20, seed=k), 1.0, counters=counters)
    assert counters.group_loss_evaluations == 60
    report = read_counters(counters)
    assert report["group_loss_evaluations"] == 60
    assert set(CostCounters.FIELDS) <= set(report)


# --- whole runs ----------------------------------------------------------------------


def test_fedavg_no_drift_single_model():
    schedule = build_schedule("none", 10, 3)
    streams = build_stream("synthetic", schedule, 0.5, 30, 0)
    cfg = FederationConfig(n_timesteps=3, rounds=2, train=SMALL_TRAIN, algorithm="fedavg")
    result = run_federation(cfg, streams, schedule)
    assert len(result.records) == 30
    assert {r.model_id for r in result.records} == {0}
    assert result.pool.ids() == [0]


def test_infinite_delta_matches_fedavg_bitwise():
    fair, _ = _small_run("fairfeddrift", delta=math.inf)
    avg, _ = _small_run("fedavg")
    assert fair.records == avg.records
    assert np.array_equal(fair.pool.models[0].values, avg.pool.models[0].values)


def test_oracle_uses_one_model_per_concept():
    result, schedule = _small_run("oracle")
    assert len(result.pool.models) == len(schedule.concepts()) == 3
    for k in range(10):
        for t in range(10):
            assert result.assignments[k][t] == "ABCDE".index(schedule.grid[k][t])


def test_worker_count_does_not_change_results():
    a, _ = _small_run("fairfeddrift", delta=0.5, workers=1)
    b, _ = _small_run("fairfeddrift", delta=0.5, workers=4)
    assert a.records == b.records
    assert a.assignments == b.assignments
    assert all(np.array_equal(a.pool.models[m].values, b.pool.models[m].values) for m in a.pool.ids())


def test_full_window_equals_window_t():
    a, _ = _small_run("fairfeddrift", delta=0.5, window=None)
    b, _ = _small_run("fairfeddrift", delta=0.5, window=10)
    assert a.records == b.records
    assert a.counters.as_dict() == b.counters.as_dict()


def test_window_limits_retained_history():
    result, _ = _small_run("fairfeddrift", delta=0.5, window=3)
    for k in range(10):
        assert sorted(result.pool.windows[k]) == [7, 8, 9]


def test_merges_only_consume_finite_distances():
    result, _ = _small_run("fairfeddrift", delta=1.0)
    assert all(mg.distance < INF for _, mg in result.merges)
    live = set(result.pool.ids())
    assert all(m in live for row in result.assignments for m in row)


def test_counters_monotone_and_round_sends_equal_m_times_k():
    result, _ = _small_run("fairfeddrift", delta=0.5)
    for t, r, m, sent in result.counters.round_log:
        assert sent == m * 10
    for t, m, k, evals in result.counters.assignment_log:
        assert evals == m * 2 * k


def test_config_validation():
    with pytest.raises(ConfigurationError):
        FederationConfig(algorithm="fairfeddrift", delta=0.0)
    with pytest.raises(ConfigurationError):
        FederationConfig(rounds=0)
    with pytest.raises(ConfigurationError):
        FederationConfig(algorithm="feddrift", delta={0: 1.0, 1: 1.0})
    assert FederationConfig(algorithm="fedavg", delta=0.0).algorithm is AlgorithmKind.FEDAVG


def test_stream_shape_checked():
    schedule = build_schedule("none", 10, 2)
    streams = build_stream("synthetic", schedule, 0.5, 20, 0)
    with pytest.raises(ConfigurationError):
        run_federation(FederationConfig(n_timesteps=3), streams, schedule)
