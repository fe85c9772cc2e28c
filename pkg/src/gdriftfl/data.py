"""Per-client, per-timestep data streams with group-specific label-swap drift.

Two sources are supported: a synthetic Gaussian-blob task (5 classes,
4 features) and IDX image files (MNIST / Fashion-MNIST layout). Group 1 is
the privileged group and never drifts; group 0 examples have a label pair
swapped depending on the active concept.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, ConfigurationError, IDXParseError, ShapeError

CONCEPTS = ("A", "B", "C", "D", "E")

# 1-indexed digit pairs as used for the image datasets
IMAGE_SWAPS = {"A": None, "B": (1, 2), "C": (2, 3), "D": (3, 4), "E": (4, 5)}
# same pairs shifted down by one for 0-indexed 5-class synthetic data
SYNTHETIC_SWAPS = {"A": None, "B": (0, 1), "C": (1, 2), "D": (2, 3), "E": (3, 4)}

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SYNTHETIC_FEATURES = 4
SYNTHETIC_CLASSES = 5
BLOB_STD = 1.0


def _blob_means() -> np.ndarray:
    """Fixed (group, class, feature) centres.

    Classes sit on a pentagon of radius 5 in the first two features; group 0
    uses a pentagon rotated by 36 degrees and shifted by 6 along features 2-3,
    a stand-in for the inverted/rotated images. The closest pair of centres is
    about 5.9 standard deviations apart.
    """
    means = np.zeros((2, SYNTHETIC_CLASSES, SYNTHETIC_FEATURES))
    for c in range(SYNTHETIC_CLASSES):
        for g, (phase, shift) in enumerate([(math.pi / 5, 6.0), (0.0, 0.0)]):
            angle = 2 * math.pi * c / SYNTHETIC_CLASSES + phase
            means[g, c] = [5 * math.cos(angle), 5 * math.sin(angle), shift, shift]
    return means


BLOB_MEANS = _blob_means()


@dataclass(frozen=True)
class Example:
    features: tuple
    label: int
    group: int


@dataclass(frozen=True)
class DriftSchedule:
    scenario: str
    grid: tuple  # grid[k][t] -> concept symbol

    @property
    def n_clients(self) -> int:
        return len(self.grid)

    @property
    def n_timesteps(self) -> int:
        return len(self.grid[0]) if self.grid else 0

    @property
    def drift_events(self) -> int:
        return count_drifts(self.grid)[0]

    @property
    def drift_timesteps(self) -> int:
        return count_drifts(self.grid)[1]

    def concepts(self) -> set[str]:
        return {c for row in self.grid for c in row}


@dataclass(eq=False)
class TimestepBatch:
    client: int
    timestep: int
    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray
    concept: str

    def __len__(self):
        return len(self.y)

    @property
    def examples(self) -> list[Example]:
        return [
            Example(tuple(float(v) for v in x), int(lab), int(g))
            for x, lab, g in zip(self.X, self.y, self.groups)
        ]

    def same_as(self, other: TimestepBatch) -> bool:
        return (
            self.client == other.client
            and self.timestep == other.timestep
            and self.concept == other.concept
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.groups, other.groups)
        )


def count_drifts(grid) -> tuple[int, int]:
    """(number of drift events, number of timesteps containing at least one)."""
    events = 0
    columns = set()
    for row in grid:
        for t in range(1, len(row)):
            if row[t] != row[t - 1]:
                events += 1
                columns.add(t)
    return events, len(columns)


def _rows(*layout: tuple[int, str]) -> tuple:
    out = []
    for repeat, row in layout:
        out.extend([tuple(row.replace(" ", ""))] * repeat)
    return tuple(out)


# Rows are clients, columns timesteps. Laid out to reproduce the benchmark's
# concept, event and drift-timestep counts for each scenario.
SCENARIO_GRIDS = {
    "4.1": _rows(
        (5, "AA BBBB CCCC"),
        (5, "AAA BBBBBBB"),
    ),
    "4.2": _rows(
        (5, "AA BBBB CCCC"),
        (3, "AAA BBB AAAA"),
        (2, "AAA BBBBBBB"),
    ),
    "4.3": _rows(
        (3, "AA BBB AA CCC"),
        (3, "AA CCC BBBBB"),
        (4, "AAA BBBB AAA"),
    ),
    "4.4": _rows(
        (2, "AA BB DDD EEE"),
        (2, "AA CCCC BB AA"),
        (2, "AAA BBB DD AA"),
        (2, "AAA C EEE BBB"),
        (2, "AAAA DD CC EE"),
    ),
    "4.5": _rows(
        (1, "AA BB CC DDDD"),
        (1, "AA CC BB EE AA"),
        (1, "AA DD AA BB CC"),
        (1, "AAA EE BB CCC"),
        (1, "AAA B CC EE DD"),
        (1, "AAA CC DD A BB"),
        (1, "AA B AA EE CCC"),
        (1, "AA EE AA CC BB"),
        (1, "AAA D BBB E AA"),
        (1, "AA CC E DDD BB"),
    ),
}

SCENARIOS = ("none",) + tuple(SCENARIO_GRIDS)


def build_schedule(scenario: str, n_clients: int = 10, n_timesteps: int = 10) -> DriftSchedule:
    if scenario == "none":
        if n_clients < 1 or n_timesteps < 1:
            raise ConfigurationError("n_clients and n_timesteps must be positive")
        return DriftSchedule("none", tuple(("A",) * n_timesteps for _ in range(n_clients)))
    if scenario not in SCENARIO_GRIDS:
        raise ConfigurationError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    if (n_clients, n_timesteps) != (10, 10):
        raise ConfigurationError(f"scenario {scenario} is defined for 10 clients x 10 timesteps only")
    return DriftSchedule(scenario, SCENARIO_GRIDS[scenario])


def swap_labels(labels: np.ndarray, groups: np.ndarray, concept: str, swap_table: dict) -> np.ndarray:
    """Vectorised label swap for the group-0 rows of a batch."""
    pair = swap_table[concept]
    out = np.array(labels, copy=True)
    if pair is None:
        return out
    a, b = pair
    g0 = np.asarray(groups) == 0
    out[g0 & (labels == a)] = b
    out[g0 & (labels == b)] = a
    return out


def apply_concept(e: Example, concept: str, swap_table: dict = SYNTHETIC_SWAPS) -> Example:
    pair = swap_table[concept]
    if pair is None or e.group != 0 or e.label not in pair:
        return e
    a, b = pair
    return Example(e.features, b if e.label == a else a, e.group)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def group_sizes(total: int, alpha: float) -> tuple[int, int]:
    """Split ``total`` into (n_priv, n_unpriv) with n_unpriv = round(alpha * n_priv).

    Picks the largest n_priv whose implied total does not exceed ``total``.
    """
    if not 0 < alpha <= 1:
        raise ConfigurationError(f"alpha must lie in (0, 1], got {alpha}")
    for n_priv in range(total, 0, -1):
        if n_priv + _round_half_up(alpha * n_priv) <= total:
            return n_priv, _round_half_up(alpha * n_priv)
    raise ConfigurationError(f"cannot split {total} examples with alpha={alpha}")


def _balanced_labels(n: int, n_classes: int) -> np.ndarray:
    return np.arange(n) % n_classes


def generate_synthetic(
    concept: str,
    n_priv: int,
    alpha: float,
    n_classes: int = SYNTHETIC_CLASSES,
    seed: int = 0,
    swap_table: dict = SYNTHETIC_SWAPS,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian-blob examples as (X, y, groups) arrays.

    The random draws depend only on (n_priv, alpha, seed), never on the
    concept, so group-1 examples are identical across concepts.
    """
    if not 0 < alpha <= 1:
        raise ConfigurationError(f"alpha must lie in (0, 1], got {alpha}")
    if n_classes != SYNTHETIC_CLASSES:
        raise ConfigurationError(f"synthetic data has {SYNTHETIC_CLASSES} classes")
    if n_priv < n_classes:
        raise ConfigurationError("n_priv must be at least the number of classes")
    n_unpriv = _round_half_up(alpha * n_priv)
    rng = np.random.default_rng(seed)
    y = np.concatenate([_balanced_labels(n_priv, n_classes), _balanced_labels(n_unpriv, n_classes)])
    groups = np.concatenate([np.ones(n_priv, dtype=np.int64), np.zeros(n_unpriv, dtype=np.int64)])
    X = BLOB_MEANS[groups, y] + rng.normal(0.0, BLOB_STD, size=(len(y), SYNTHETIC_FEATURES))
    return X, swap_labels(y, groups, concept, swap_table), groups


# --- IDX ingestion -----------------------------------------------------------


def _read_idx(path, expected_magic: int, kind: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IDXParseError("header", f"{kind} file {path} is shorter than its header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IDXParseError("magic", f"{kind} file has magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXParseError("dimensions", f"{kind} file truncated inside dimension sizes")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    body = raw[header:]
    if len(body) < size:
        raise IDXParseError("data", f"{kind} file truncated: expected {size} bytes, found {len(body)}")
    return np.frombuffer(body[:size], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Parse an IDX image/label file pair.

    Returns ``(images, labels)`` with images as float64 in [0, 1] shaped
    (count, rows, cols) and labels as int64.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IDXParseError(
            "count", f"image count {images.shape[0]} does not match label count {labels.shape[0]}"
        )
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def rotate_ccw(img: np.ndarray) -> np.ndarray:
    return np.rot90(img, 1)


def transform_group0_image(img: np.ndarray) -> np.ndarray:
    """Invert intensities, then rotate 90 degrees counter-clockwise."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ShapeError(f"expected a square image, got shape {img.shape}")
    return rotate_ccw(1.0 - img)


# --- streams ------------------------------------------------------------------


def cell_seed(seed: int, *path: int) -> int:
    """Independent 63-bit seed for a (seed, k, t, ...) cell."""
    return int(np.random.SeedSequence([seed, *path]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def build_stream(
    dataset: str,
    schedule: DriftSchedule,
    alpha: float,
    per_timestep_size: int,
    seed: int,
    idx_data: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[list[TimestepBatch]]:
    """K x T grid of batches; ``grid[k][t]`` follows ``schedule.grid[k][t]``."""
    n_priv, n_unpriv = group_sizes(per_timestep_size, alpha)
    K, T = schedule.n_clients, schedule.n_timesteps
    if dataset == "synthetic":
        grid = []
        for k in range(K):
            row = []
            for t in range(T):
                concept = schedule.grid[k][t]
                X, y, g = generate_synthetic(concept, n_priv, alpha, seed=cell_seed(seed, k, t))
                row.append(TimestepBatch(k, t, X, y, g, concept))
            grid.append(row)
        return grid
    if dataset == "idx":
        if idx_data is None:
            raise ConfigurationError("idx dataset requires loaded images and labels")
        return _idx_stream(schedule, n_priv, n_unpriv, seed, *idx_data)
    raise ConfigurationError(f"unknown dataset {dataset!r}")


def _idx_stream(schedule, n_priv, n_unpriv, seed, images, labels):
    K, T = schedule.n_clients, schedule.n_timesteps
    per_cell = n_priv + n_unpriv
    required = K * T * per_cell
    if required > len(images):
        raise CapacityError(required, len(images))
    flat = images.reshape(len(images), -1)
    perm = np.random.default_rng(seed).permutation(len(images))
    grid = []
    cursor = 0
    for k in range(K):
        row = []
        for t in range(T):
            idx = perm[cursor : cursor + per_cell]
            cursor += per_cell
            priv, unpriv = idx[:n_priv], idx[n_priv:]
            X0 = np.stack([transform_group0_image(images[i]).ravel() for i in unpriv]) if n_unpriv else flat[:0]
            X = np.concatenate([flat[priv], X0])
            groups = np.concatenate([np.ones(n_priv, dtype=np.int64), np.zeros(n_unpriv, dtype=np.int64)])
            y = swap_labels(labels[idx], groups, schedule.grid[k][t], IMAGE_SWAPS)
            row.append(TimestepBatch(k, t, X, y, groups, schedule.grid[k][t]))
        grid.append(row)
    return grid
