"""Command-line experiment runner: config parsing, sweeps, CSV/JSON outputs."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SCENARIOS, SYNTHETIC_CLASSES, SYNTHETIC_FEATURES, build_schedule, build_stream, load_idx
from .errors import ConfigurationError, SimulatorError
from .federation import AlgorithmKind, FederationConfig, run_federation
from .model import Architecture, TrainConfig

log = logging.getLogger(__name__)

RECORD_COLUMNS = (
    "seed", "algorithm", "delta", "window", "timestep", "client", "model_id", "true_concept",
    "n_models", "acc", "aeq", "oeq", "opp", "loss", "loss_g0", "loss_g1", "disparity",
)
ASSIGNMENT_COLUMNS = ("seed", "algorithm", "delta", "window", "client", "timestep", "model_id", "true_concept")
METRIC_COLUMNS = ("acc", "aeq", "oeq", "opp")
SUMMARY_COLUMNS = (
    "algorithm", "alpha", "delta", "window", "seed", "seed_count",
    *(f"{m}_{stat}" for m in METRIC_COLUMNS for stat in ("mean", "std", "defined_cells")),
    "final_models_mean", "cumulative_disparity",
)
SUMMARY_HEADER_COMMENT = (
    "# std = population standard deviation over (client, timestep) cells; "
    "undefined cells are skipped and counted in *_defined_cells"
)


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    scenario: str = "4.1"
    algorithm: str = "fairfeddrift"
    alpha: float = 0.1
    delta: list = field(default_factory=lambda: [1.0])
    window: list = field(default_factory=lambda: [None])  # None = full history
    clients: int = 10
    timesteps: int = 10
    rounds: int = 10
    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.1
    seeds: list = field(default_factory=lambda: list(range(5)))
    size: int = 200  # examples per client per timestep
    hidden: int = 10
    workers: int = 1
    out: str = "results"
    idx_images: str | None = None
    idx_labels: str | None = None
    pool_seeds: bool = False

    def validate(self) -> RunConfig:
        if self.dataset not in ("synthetic", "idx"):
            raise ConfigurationError(f"dataset: unknown value {self.dataset!r}")
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"scenario: unknown value {self.scenario!r}")
        try:
            AlgorithmKind(self.algorithm)
        except ValueError:
            raise ConfigurationError(f"algorithm: unknown value {self.algorithm!r}") from None
        if not 0 < self.alpha <= 1:
            raise ConfigurationError(f"alpha: must lie in (0, 1], got {self.alpha}")
        for name in ("clients", "timesteps", "rounds", "epochs", "batch_size", "size", "hidden", "workers"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name}: must be a positive count, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr: must be > 0, got {self.lr}")
        for name in ("delta", "window", "seeds"):
            if not getattr(self, name):
                raise ConfigurationError(f"{name}: sweep list is empty")
        if any(not d > 0 for d in self.delta):
            raise ConfigurationError(f"delta: values must be > 0, got {self.delta}")
        if any(w is not None and w < 1 for w in self.window):
            raise ConfigurationError(f"window: values must be 'full' or >= 1, got {self.window}")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigurationError("idx_images/idx_labels: required for the idx dataset")
        return self


# --- parsing ------------------------------------------------------------------


def _float_list(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _window_list(text: str) -> list[int | None]:
    out = []
    for v in str(text).split(","):
        v = v.strip().lower()
        if v:
            out.append(None if v == "full" else int(v))
    return out


def _seed_list(text: str) -> list[int]:
    text = str(text)
    if "," in text:
        return [int(v) for v in text.split(",") if v.strip()]
    return list(range(int(text)))


def _bool(text: str) -> bool:
    return str(text).strip().lower() in ("1", "true", "yes", "on")


CONVERTERS = {
    "dataset": str, "scenario": str, "algorithm": str, "alpha": float, "delta": _float_list,
    "window": _window_list, "clients": int, "timesteps": int, "rounds": int, "epochs": int,
    "batch_size": int, "lr": float, "seeds": _seed_list, "size": int, "hidden": int,
    "workers": int, "out": str, "idx_images": str, "idx_labels": str, "pool_seeds": _bool,
}


def _convert(key: str, value: str):
    try:
        return CONVERTERS[key](value)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{key}: cannot parse {value!r} ({exc})") from None


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; blank lines and ``#`` comments are ignored."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONVERTERS:
            raise ConfigurationError(f"{key}: unknown configuration key ({path}:{lineno})")
        values[key] = _convert(key, value)
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gdriftfl",
        description="Federated learning under group-specific distributed concept drift.",
    )
    p.add_argument("--config", help="key=value file; flags override its values")
    p.add_argument("--dataset", choices=["synthetic", "idx"])
    p.add_argument("--scenario", choices=list(SCENARIOS))
    p.add_argument("--algorithm", choices=[a.value for a in AlgorithmKind])
    p.add_argument("--alpha", type=str)
    p.add_argument("--delta", help="threshold or comma-separated sweep, e.g. 0.5,1.0,inf")
    p.add_argument("--window", help="'full', N, or a comma-separated sweep")
    p.add_argument("--seeds", help="count N (seeds 0..N-1) or an explicit comma list")
    p.add_argument("--clients", type=str)
    p.add_argument("--timesteps", type=str)
    p.add_argument("--rounds", type=str)
    p.add_argument("--epochs", type=str)
    p.add_argument("--batch-size", dest="batch_size", type=str)
    p.add_argument("--lr", type=str)
    p.add_argument("--size", type=str, help="examples per client per timestep")
    p.add_argument("--hidden", type=str, help="hidden units of the MLP")
    p.add_argument("--workers", type=str, help="threads for local training")
    p.add_argument("--out", help="output directory")
    p.add_argument("--idx-images", dest="idx_images")
    p.add_argument("--idx-labels", dest="idx_labels")
    p.add_argument("--pool-seeds", dest="pool_seeds", action="store_const", const="true",
                   help="one summary row per sweep point across seeds instead of per run")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_config(argv=None) -> RunConfig:
    args = build_parser().parse_args(argv)
    values = read_config_file(args.config) if args.config else {}
    for key in CONVERTERS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = _convert(key, flag)
    return RunConfig(**values).validate()


# --- running ------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _fmt_window(window) -> str:
    return "full" if window is None else str(window)


def _sweep_points(cfg: RunConfig):
    for seed in cfg.seeds:
        for delta in cfg.delta:
            for window in cfg.window:
                yield seed, delta, window


def run_experiment(cfg: RunConfig) -> dict[str, Path]:
    """Run every (seed, delta, window) point and write the output file set."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.dataset == "idx":
        images, labels = load_idx(cfg.idx_images, cfg.idx_labels)
        idx_data = (images, labels)
        arch = Architecture(int(np.prod(images.shape[1:])), cfg.hidden, 10)
    else:
        idx_data = None
        arch = Architecture(SYNTHETIC_FEATURES, cfg.hidden, SYNTHETIC_CLASSES)
    schedule = build_schedule(cfg.scenario, cfg.clients, cfg.timesteps)

    paths = {name: out / name for name in ("records.csv", "assignments.csv", "counters.json", "summary.csv")}
    counters_out = []
    streams = {}
    with open(paths["records.csv"], "w", newline="", encoding="utf-8") as rf, open(
        paths["assignments.csv"], "w", newline="", encoding="utf-8"
    ) as af:
        rec_writer, asg_writer = csv.writer(rf), csv.writer(af)
        rec_writer.writerow(RECORD_COLUMNS)
        asg_writer.writerow(ASSIGNMENT_COLUMNS)
        for seed, delta, window in _sweep_points(cfg):
            if seed not in streams:
                streams = {seed: build_stream(cfg.dataset, schedule, cfg.alpha, cfg.size, seed, idx_data)}
            fed_cfg = FederationConfig(
                n_clients=cfg.clients,
                n_timesteps=cfg.timesteps,
                rounds=cfg.rounds,
                train=TrainConfig(cfg.epochs, cfg.batch_size, cfg.lr),
                algorithm=AlgorithmKind(cfg.algorithm),
                delta=delta,
                window=window,
                arch=arch,
                seed=seed,
                workers=cfg.workers,
            )
            log.info("running %s seed=%d delta=%s window=%s", cfg.algorithm, seed, delta, _fmt_window(window))
            result = run_federation(fed_cfg, streams[seed], schedule)
            prefix = [seed, cfg.algorithm, _fmt(float(delta)), _fmt_window(window)]
            for r in result.records:
                rec_writer.writerow(
                    prefix
                    + [r.timestep, r.client, r.model_id, r.true_concept, r.n_models]
                    + [_fmt(getattr(r, c)) for c in RECORD_COLUMNS[9:]]
                )
            for k, row in enumerate(result.assignments):
                for t, m in enumerate(row):
                    asg_writer.writerow(prefix + [k, t, m, schedule.grid[k][t]])
            counters_out.append(
                {"seed": seed, "algorithm": cfg.algorithm, "delta": float(delta), "window": _fmt_window(window),
                 "final_models": len(result.pool.models), **result.counters.as_dict()}
            )
    paths["counters.json"].write_text(json.dumps(counters_out, indent=2, allow_nan=True) + "\n")
    rows = summarize(paths["records.csv"], alpha=cfg.alpha, counters_path=paths["counters.json"],
                     pool_seeds=cfg.pool_seeds)
    write_summary(rows, paths["summary.csv"])
    return paths


# --- reading back and summarising ------------------------------------------------


def _opt_float(text: str) -> float | None:
    return None if text == "" else float(text)


def read_records(path) -> list[dict]:
    """Parse records.csv back into typed rows (UNDEFINED cells become None)."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != RECORD_COLUMNS:
            raise ConfigurationError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for raw in reader:
            window = raw["window"]
            rows.append({
                "seed": int(raw["seed"]),
                "algorithm": raw["algorithm"],
                "delta": float(raw["delta"]),
                "window": None if window == "full" else int(window),
                "timestep": int(raw["timestep"]),
                "client": int(raw["client"]),
                "model_id": int(raw["model_id"]),
                "true_concept": raw["true_concept"],
                "n_models": int(raw["n_models"]),
                **{c: _opt_float(raw[c]) for c in RECORD_COLUMNS[9:]},
            })
        return rows


@dataclass
class SummaryRow:
    algorithm: str
    alpha: float | None
    delta: float
    window: int | None
    seed: int | None  # None when pooled across seeds
    seed_count: int
    stats: dict  # metric -> (mean, std, defined cells)
    final_models_mean: float | None
    cumulative_disparity: float

    def as_csv_row(self) -> list[str]:
        row = [self.algorithm, _fmt(self.alpha), _fmt(self.delta), _fmt_window(self.window),
               "all" if self.seed is None else str(self.seed), str(self.seed_count)]
        for m in METRIC_COLUMNS:
            mean, std, n = self.stats[m]
            row += [_fmt(mean), _fmt(std), str(n)]
        return row + [_fmt(self.final_models_mean), _fmt(self.cumulative_disparity)]


def _mean_std(values: list[float]) -> tuple[float | None, float | None, int]:
    if not values:
        return None, None, 0
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0)), len(arr)


def summarize(records_path, alpha: float | None = None, counters_path=None,
              pool_seeds: bool = False) -> list[SummaryRow]:
    """Mean/std over all (client, timestep) cells for each run or sweep point.

    Cumulative disparity is the sum of per-cell disparities of a run,
    averaged over seeds when pooling.
    """
    rows = read_records(records_path)
    final_models = {}
    if counters_path is not None and Path(counters_path).exists():
        for entry in json.loads(Path(counters_path).read_text()):
            window = None if entry["window"] == "full" else int(entry["window"])
            final_models[(entry["algorithm"], float(entry["delta"]), window, entry["seed"])] = entry["final_models"]

    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        key = (r["algorithm"], r["delta"], r["window"], None if pool_seeds else r["seed"])
        groups.setdefault(key, []).append(r)

    summary = []
    for (algo, delta, window, seed), cells in groups.items():
        seeds = sorted({c["seed"] for c in cells})
        stats = {m: _mean_std([c[m] for c in cells if c[m] is not None]) for m in METRIC_COLUMNS}
        per_seed_disparity = [sum(c["disparity"] for c in cells if c["seed"] == s) for s in seeds]
        finals = [final_models[(algo, delta, window, s)] for s in seeds if (algo, delta, window, s) in final_models]
        summary.append(SummaryRow(
            algorithm=algo, alpha=alpha, delta=delta, window=window, seed=seed, seed_count=len(seeds),
            stats=stats,
            final_models_mean=float(np.mean(finals)) if finals else None,
            cumulative_disparity=float(np.mean(per_seed_disparity)),
        ))
    return summary


def write_summary(rows: list[SummaryRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(SUMMARY_HEADER_COMMENT + "\n")
        writer = csv.writer(f)
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv_row())


def read_summary(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    verbose = "-v" in (argv or sys.argv[1:]) or "--verbose" in (argv or sys.argv[1:])
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    try:
        paths = run_experiment(cfg)
    except (SimulatorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for name, path in paths.items():
        print(f"wrote {path}")
    return 0
