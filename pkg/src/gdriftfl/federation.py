"""Multi-model federation engine: FedAvg, FedDrift, FairFedDrift and Oracle.

One coordinator owns the :class:`ModelPool`. Each timestep runs, in order:
evaluation of every client's current model on its incoming batch, model
assignment (with drift detection), model merging, ``rounds`` rounds of local
training plus weighted averaging, the reference-loss update, and window
trimming. Local training jobs within a round are independent and may run on a
thread pool; their results are consumed in fixed (model, client) order.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from .data import CONCEPTS, DriftSchedule, TimestepBatch, cell_seed
from .errors import ConfigurationError, EmptyInputError, EngineError, SimulatorError
from .model import (
    Architecture,
    ModelParams,
    TrainConfig,
    evaluate,
    init_params,
    local_train,
    weighted_average,
)

INF = math.inf
GROUPS = (0, 1)


class AlgorithmKind(str, enum.Enum):
    FEDAVG = "fedavg"
    FEDDRIFT = "feddrift"
    FAIRFEDDRIFT = "fairfeddrift"
    ORACLE = "oracle"

    @property
    def detects_drift(self) -> bool:
        return self in (AlgorithmKind.FEDDRIFT, AlgorithmKind.FAIRFEDDRIFT)


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 10
    n_timesteps: int = 10
    rounds: int = 10
    train: TrainConfig = TrainConfig()
    algorithm: AlgorithmKind = AlgorithmKind.FAIRFEDDRIFT
    # scalar threshold, or {group: threshold} for FairFedDrift
    delta: float | Mapping = 1.0
    window: int | None = None  # None keeps the full history
    arch: Architecture = Architecture(4, 10, 5)
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "algorithm", AlgorithmKind(self.algorithm))
        if min(self.n_clients, self.n_timesteps, self.rounds) < 1:
            raise ConfigurationError("n_clients, n_timesteps and rounds must be >= 1")
        if self.window is not None and self.window < 1:
            raise ConfigurationError(f"window must be >= 1 or None, got {self.window}")
        if self.algorithm.detects_drift:
            values = self.delta.values() if isinstance(self.delta, Mapping) else [self.delta]
            if any(not v > 0 for v in values):
                raise ConfigurationError(f"delta must be > 0, got {self.delta}")
            if isinstance(self.delta, Mapping) and self.algorithm is AlgorithmKind.FEDDRIFT:
                raise ConfigurationError("FedDrift takes a single scalar delta")


@dataclass(frozen=True)
class LossProfile:
    overall: float
    by_group: dict  # group -> loss, present groups only


@dataclass
class CostCounters:
    models_sent_to_clients: int = 0
    models_sent_to_server: int = 0
    group_loss_evaluations: int = 0
    merge_loss_evaluations: int = 0
    training_passes: int = 0
    # (timestep, models evaluated per client, clients, evaluations) per assignment phase
    assignment_log: list = field(default_factory=list)
    # (timestep, round, live models, models sent to clients) per round
    round_log: list = field(default_factory=list)

    FIELDS = (
        "models_sent_to_clients",
        "models_sent_to_server",
        "group_loss_evaluations",
        "merge_loss_evaluations",
        "training_passes",
    )

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}


def read_counters(counters: CostCounters) -> dict:
    """Cumulative counts plus per-round and per-assignment breakdowns."""
    report = counters.as_dict()
    report["rounds"] = [
        {"timestep": t, "round": r, "models": m, "sent_to_clients": sent}
        for t, r, m, sent in counters.round_log
    ]
    report["assignments"] = [
        {"timestep": t, "models": m, "clients": k, "evaluations": n}
        for t, m, k, n in counters.assignment_log
    ]
    return report


@dataclass
class ModelPool:
    arch: Architecture
    models: dict = field(default_factory=dict)  # id -> ModelParams
    next_id: int = 0
    history: dict = field(default_factory=dict)  # client -> {t: model id}
    windows: dict = field(default_factory=dict)  # client -> {t: TimestepBatch}
    ref_group: dict = field(default_factory=dict)  # client -> {group: loss}
    ref_overall: dict = field(default_factory=dict)  # client -> loss
    aliases: dict = field(default_factory=dict)  # merged-away id -> replacement id

    def ids(self) -> list[int]:
        return sorted(self.models)

    def add(self, params: ModelParams, model_id: int | None = None) -> int:
        if model_id is None:
            model_id = self.next_id
        if model_id in self.models or model_id in self.aliases:
            raise ConfigurationError(f"model id {model_id} already used")
        self.models[model_id] = params
        self.next_id = max(self.next_id, model_id + 1)
        return model_id

    def current(self, k: int) -> int:
        h = self.history[k]
        return h[max(h)]

    def resolve(self, model_id: int) -> int:
        while model_id in self.aliases:
            model_id = self.aliases[model_id]
        return model_id

    def clients_of(self, m: int, before: int | None = None) -> list[int]:
        """Clients with retained history on ``m`` (restricted to t' < before if given)."""
        return [
            k
            for k in sorted(self.history)
            if any(mid == m and (before is None or t < before) for t, mid in self.history[k].items())
        ]

    def batches_for(self, k: int, m: int, before: int | None = None) -> list[TimestepBatch]:
        return [
            self.windows[k][t]
            for t in sorted(self.history[k])
            if self.history[k][t] == m and (before is None or t < before) and t in self.windows[k]
        ]

    def weight(self, m: int, before: int | None = None) -> int:
        return sum(len(b) for k in sorted(self.history) for b in self.batches_for(k, m, before))


def _concat(batches: list[TimestepBatch]):
    return (
        np.concatenate([b.X for b in batches]),
        np.concatenate([b.y for b in batches]),
        np.concatenate([b.groups for b in batches]),
    )


def loss_profile(params: ModelParams, X, y, groups) -> LossProfile:
    _, overall, by_group = evaluate(params, X, y, groups)
    return LossProfile(overall, by_group)


def _delta_for(delta, s) -> float:
    return float(delta[s]) if isinstance(delta, Mapping) else float(delta)


# --- assignment ---------------------------------------------------------------


def decide_fair(table: Mapping, refs: Mapping, delta) -> int | None:
    """Model id with the lowest summed group loss among admissible models, or None.

    A model is admissible when every group present in its profile stays within
    ``refs[s] + delta_s``. Groups with no reference impose no constraint.
    """
    best, best_score = None, INF
    for m in sorted(table):
        prof = table[m]
        if all(loss <= refs[s] + _delta_for(delta, s) for s, loss in prof.by_group.items() if s in refs):
            score = sum(prof.by_group.values())
            if score < best_score or best is None:
                best, best_score = m, score
    return best


def decide_global(table: Mapping, ref: float | None, delta: float) -> int | None:
    """Lowest-overall-loss model within ``ref + delta``, or None."""
    best, best_score = None, INF
    for m in sorted(table):
        loss = table[m].overall
        if ref is None or loss <= ref + delta:
            if loss < best_score or best is None:
                best, best_score = m, loss
    return best


def _profile_table(pool, batch, model_ids):
    if len(batch) == 0:
        raise EmptyInputError(f"empty batch for client {batch.client} at t={batch.timestep}")
    ids = pool.ids() if model_ids is None else model_ids
    return {m: loss_profile(pool.models[m], batch.X, batch.y, batch.groups) for m in ids}


def assign_fair(pool: ModelPool, k: int, batch: TimestepBatch, delta, model_ids=None, counters=None):
    """(chosen id or None for a new model, per-model loss table)."""
    table = _profile_table(pool, batch, model_ids)
    if counters is not None:
        counters.group_loss_evaluations += sum(len(p.by_group) for p in table.values())
    return decide_fair(table, pool.ref_group.get(k, {}), delta), table


def assign_feddrift(pool: ModelPool, k: int, batch: TimestepBatch, delta, model_ids=None, counters=None):
    table = _profile_table(pool, batch, model_ids)
    if counters is not None:
        counters.group_loss_evaluations += len(table)
    return decide_global(table, pool.ref_overall.get(k), float(delta)), table


def assign_oracle(schedule: DriftSchedule, k: int, t: int) -> int:
    return CONCEPTS.index(schedule.grid[k][t])


def model_init_seed(seed: int, model_id: int) -> int:
    return cell_seed(seed, 1, model_id)


def spawn_model(pool: ModelPool, k: int, t: int, table: Mapping, seed: int) -> int:
    """Add a freshly initialised model, assign client ``k`` to it at ``t``.

    The client's reference losses become the per-group (and overall) minimum
    over the models in ``table``.
    """
    new_id = pool.next_id
    pool.add(init_params(pool.arch, model_init_seed(seed, new_id)), new_id)
    pool.history.setdefault(k, {})[t] = new_id
    if table:
        groups = {s for p in table.values() for s in p.by_group}
        refs = pool.ref_group.setdefault(k, {})
        for s in groups:
            refs[s] = min(p.by_group[s] for p in table.values() if s in p.by_group)
        pool.ref_overall[k] = min(p.overall for p in table.values())
    return new_id


# --- merging ------------------------------------------------------------------


def merge_evaluations(pool: ModelPool, t: int, fairness_aware: bool = True, counters=None) -> dict:
    """evals[(i, j)] -> loss profiles of model i on each client's j-data (t' < t)."""
    ids = pool.ids()
    data = {}
    for j in ids:
        data[j] = [_concat(pool.batches_for(k, j, before=t)) for k in pool.clients_of(j, before=t)]
    evals = {}
    for i in ids:
        for j in ids:
            profs = [loss_profile(pool.models[i], *d) for d in data[j]]
            if counters is not None:
                counters.merge_loss_evaluations += (
                    sum(len(p.by_group) for p in profs) if fairness_aware else len(profs)
                )
            evals[(i, j)] = profs
    return evals


def _loss_gap(cross: LossProfile, own: LossProfile, delta, fairness_aware: bool) -> float:
    if not fairness_aware:
        gap = cross.overall - own.overall
        return INF if gap > _delta_for(delta, None) else gap
    total = 0.0
    for s in sorted(set(cross.by_group) & set(own.by_group)):
        gap = cross.by_group[s] - own.by_group[s]
        if gap > _delta_for(delta, s):
            return INF
        total += gap
    return total


def cross_gap(cross: list, own: list, delta, fairness_aware: bool = True) -> float:
    """Worst loss increase of a model moving from its own clients' data to another model's."""
    if not cross or not own:
        return INF
    return max(_loss_gap(c, o, delta, fairness_aware) for c in cross for o in own)


def distance_matrix(ids: list[int], evals: Mapping, delta, fairness_aware: bool = True) -> np.ndarray:
    """Symmetric merge distances; the diagonal is INF."""
    n = len(ids)
    Z = np.full((n, n), INF)
    for a in range(n):
        for b in range(a + 1, n):
            i, j = ids[a], ids[b]
            d = max(
                cross_gap(evals[(i, j)], evals[(i, i)], delta, fairness_aware),
                cross_gap(evals[(j, i)], evals[(j, j)], delta, fairness_aware),
                0.0,
            )
            Z[a, b] = Z[b, a] = d
    return Z


def merge_matrix(pool: ModelPool, t: int, delta, fairness_aware: bool = True, counters=None):
    """(model ids, Z) for the live pool at timestep ``t``."""
    ids = pool.ids()
    evals = merge_evaluations(pool, t, fairness_aware, counters)
    return ids, distance_matrix(ids, evals, delta, fairness_aware)


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    new: int
    distance: float


def plan_merges(ids: list[int], Z: np.ndarray, next_id: int) -> list[Merge]:
    """Agglomerative merge sequence with complete linkage, stopping at INF."""
    live = list(ids)
    dist = {}
    for a, i in enumerate(ids):
        for b, j in enumerate(ids):
            if a != b:
                dist[(i, j)] = float(Z[a, b])
    plan = []
    while len(live) >= 2:
        best = None
        for a, i in enumerate(live):
            for j in live[a + 1 :]:
                if best is None or dist[(i, j)] < best[0]:
                    best = (dist[(i, j)], i, j)
        d, i, j = best
        if d == INF:
            break
        new = next_id
        next_id += 1
        live.remove(i)
        live.remove(j)
        for other in live:
            dist[(new, other)] = dist[(other, new)] = max(dist[(i, other)], dist[(j, other)])
        live.append(new)
        plan.append(Merge(i, j, new, d))
    return plan


def merge_step(pool: ModelPool, ids: list[int], Z: np.ndarray, t: int) -> list[Merge]:
    """Apply the merge plan to ``pool``; returns the merges performed."""
    plan = plan_merges(ids, Z, pool.next_id)
    for mg in plan:
        w_left, w_right = pool.weight(mg.left, before=t), pool.weight(mg.right, before=t)
        merged = weighted_average([pool.models[mg.left], pool.models[mg.right]], [w_left, w_right])
        pool.add(merged, mg.new)
        for hist in pool.history.values():
            for tt, mid in hist.items():
                if mid in (mg.left, mg.right):
                    hist[tt] = mg.new
        for old in (mg.left, mg.right):
            del pool.models[old]
            pool.aliases[old] = mg.new
    return plan


# --- training -----------------------------------------------------------------


def train_seed(seed: int, k: int, m: int, t: int, r: int) -> int:
    return cell_seed(seed, 2, k, m, t, r)


def _training_jobs(pool: ModelPool):
    """(model id, client, X, y) for every client with retained data on each model."""
    jobs = []
    for m in pool.ids():
        for k in pool.clients_of(m):
            batches = pool.batches_for(k, m)
            if batches:
                X, y, _ = _concat(batches)
                jobs.append((m, k, X, y))
    return jobs


def train_round(
    pool: ModelPool,
    t: int,
    r: int,
    cfg: FederationConfig,
    counters: CostCounters | None = None,
    executor=None,
    jobs=None,
) -> None:
    """One communication round: local SGD on every (model, client) pair, then averaging."""
    if jobs is None:
        jobs = _training_jobs(pool)

    def run(job):
        m, k, X, y = job
        tc = replace(cfg.train, seed=train_seed(cfg.seed, k, m, t, r))
        try:
            return local_train(pool.models[m], X, y, tc)
        except SimulatorError as exc:
            raise EngineError(str(exc), timestep=t, client=k, model=m) from exc

    results = list(executor.map(run, jobs)) if executor is not None else [run(j) for j in jobs]

    by_model: dict[int, tuple[list, list]] = {}
    for (m, _, X, _), trained in zip(jobs, results):
        params, weights = by_model.setdefault(m, ([], []))
        params.append(trained)
        weights.append(len(X))
    n_models = len(pool.models)
    for m, (params, weights) in by_model.items():
        pool.models[m] = weighted_average(params, weights)
    if counters is not None:
        sent = n_models * cfg.n_clients
        counters.models_sent_to_clients += sent
        counters.models_sent_to_server += len(jobs)
        counters.training_passes += len(jobs)
        counters.round_log.append((t, r, n_models, sent))


# --- driver -------------------------------------------------------------------


@dataclass
class FederationResult:
    records: list
    counters: CostCounters
    pool: ModelPool
    assignments: list  # [k][t] -> final (post-merge) model id
    merges: list  # (timestep, Merge)


def _metrics_record(pool: ModelPool, k: int, batch: TimestepBatch, m: int) -> metrics.MetricsRecord:
    preds, overall, by_group = evaluate(pool.models[m], batch.X, batch.y, batch.groups)
    recs = metrics.EvalBatch(batch.y, preds, batch.groups)
    return metrics.MetricsRecord(
        client=k,
        timestep=batch.timestep,
        model_id=m,
        true_concept=batch.concept,
        n_models=len(pool.models),
        acc=metrics.accuracy(recs),
        aeq=metrics.aeq(recs),
        oeq=metrics.oeq(recs, overlap=True),
        opp=metrics.opp(recs, overlap=True),
        loss=overall,
        loss_g0=by_group.get(0),
        loss_g1=by_group.get(1),
        disparity=metrics.disparity(by_group),
    )


def run_federation(
    cfg: FederationConfig, streams: list[list[TimestepBatch]], schedule: DriftSchedule
) -> FederationResult:
    K, T = cfg.n_clients, cfg.n_timesteps
    if len(streams) != K or any(len(row) != T for row in streams):
        raise ConfigurationError(f"streams must be a {K} x {T} grid")
    if schedule.n_clients != K or schedule.n_timesteps != T:
        raise ConfigurationError("schedule dimensions do not match the configuration")

    algo = cfg.algorithm
    pool = ModelPool(cfg.arch)
    pool.add(init_params(cfg.arch, model_init_seed(cfg.seed, 0)), 0)
    for k in range(K):
        pool.history[k] = {}
        pool.windows[k] = {}
    counters = CostCounters()
    records = []
    raw_assign = [[None] * T for _ in range(K)]
    merges = []
    executor = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    try:
        for t in range(T):
            batches = [streams[k][t] for k in range(K)]

            # 1. test-then-train: score the model each client held at t-1
            for k in range(K):
                m = pool.current(k) if t > 0 else 0
                try:
                    records.append(_metrics_record(pool, k, batches[k], m))
                except SimulatorError as exc:
                    raise EngineError(str(exc), timestep=t, client=k, model=m) from exc

            # 2. assignment
            snapshot = pool.ids()
            evaluations_before = counters.group_loss_evaluations
            for k in range(K):
                batch = batches[k]
                pool.windows[k][t] = batch
                if t == 0 or algo is AlgorithmKind.FEDAVG:
                    pool.history[k][t] = 0
                elif algo is AlgorithmKind.ORACLE:
                    m = assign_oracle(schedule, k, t)
                    if m not in pool.models:
                        pool.add(init_params(cfg.arch, model_init_seed(cfg.seed, m)), m)
                    pool.history[k][t] = m
                else:
                    assign = assign_fair if algo is AlgorithmKind.FAIRFEDDRIFT else assign_feddrift
                    try:
                        choice, table = assign(pool, k, batch, cfg.delta, snapshot, counters)
                    except SimulatorError as exc:
                        raise EngineError(str(exc), timestep=t, client=k) from exc
                    if choice is None:
                        spawn_model(pool, k, t, table, cfg.seed)
                    else:
                        pool.history[k][t] = choice
            if t > 0 and algo.detects_drift:
                counters.assignment_log.append(
                    (t, len(snapshot), K, counters.group_loss_evaluations - evaluations_before)
                )

            # 3. merging
            if algo.detects_drift and len(pool.models) >= 2:
                fair = algo is AlgorithmKind.FAIRFEDDRIFT
                ids, Z = merge_matrix(pool, t, cfg.delta, fair, counters)
                merges.extend((t, mg) for mg in merge_step(pool, ids, Z, t))

            for k in range(K):
                raw_assign[k][t] = pool.history[k][t]

            # 4. training rounds
            jobs = _training_jobs(pool)
            for r in range(cfg.rounds):
                train_round(pool, t, r, cfg, counters, executor, jobs)

            # 5. reference losses under the final assignment
            if algo.detects_drift:
                for k in range(K):
                    b = batches[k]
                    prof = loss_profile(pool.models[pool.current(k)], b.X, b.y, b.groups)
                    pool.ref_group.setdefault(k, {}).update(prof.by_group)
                    pool.ref_overall[k] = prof.overall

            # 6. sliding window: keep t' >= t + 1 - w for the next timestep
            if cfg.window is not None:
                cutoff = t + 1 - cfg.window
                for k in range(K):
                    for tt in [tt for tt in pool.history[k] if tt < cutoff]:
                        del pool.history[k][tt]
                        pool.windows[k].pop(tt, None)
    finally:
        if executor is not None:
            executor.shutdown()

    assignments = [[pool.resolve(raw_assign[k][t]) for t in range(T)] for k in range(K)]
    return FederationResult(records, counters, pool, assignments, merges)
