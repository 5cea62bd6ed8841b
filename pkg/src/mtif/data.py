"""Multitask datasets: synthetic generation, CSV ingestion, PCA, splitting, corruption."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import (
    InvalidConfig,
    InvalidRatios,
    MissingInput,
    NotClassification,
    ParseError,
    RankDeficientWarning,
    SchemaError,
)
from .models import Sample

SPLITS = ("train", "val", "test")


def _as_xy(X, y, d: int | None = None):
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return X.reshape(len(y), d if d is not None else (X.shape[-1] if X.ndim == 2 else 0)), y
    X = X.reshape(len(y), -1)
    return X, y


@dataclass(frozen=True, eq=False)
class TaskData:
    X_train: NDArray
    y_train: NDArray
    X_val: NDArray
    y_val: NDArray
    X_test: NDArray
    y_test: NDArray

    def __post_init__(self):
        d = None
        for name in SPLITS:
            X, y = getattr(self, f"X_{name}"), getattr(self, f"y_{name}")
            X = np.asarray(X, dtype=float)
            if X.ndim == 2 and X.size:
                d = X.shape[1]
        for name in SPLITS:
            X, y = _as_xy(getattr(self, f"X_{name}"), getattr(self, f"y_{name}"), d)
            if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
                raise ValueError(f"{name} split contains NaN or Inf")
            X.setflags(write=False)
            y.setflags(write=False)
            object.__setattr__(self, f"X_{name}", X)
            object.__setattr__(self, f"y_{name}", y)
        dims = {getattr(self, f"X_{s}").shape[1] for s in SPLITS if len(getattr(self, f"y_{s}"))}
        if len(dims) > 1:
            raise SchemaError(f"splits disagree on feature dimension: {sorted(dims)}")

    @property
    def d(self) -> int:
        return self.X_train.shape[1]

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    def xy(self, split: str):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return getattr(self, f"X_{split}"), getattr(self, f"y_{split}")

    def samples(self, split: str = "train") -> list[Sample]:
        X, y = self.xy(split)
        return [Sample(x, v) for x, v in zip(X, y)]

    def pooled(self):
        """All samples stacked in train, val, test order."""
        return (
            np.vstack([self.X_train, self.X_val, self.X_test]),
            np.concatenate([self.y_train, self.y_val, self.y_test]),
        )

    def with_split(self, split: str, X, y) -> "TaskData":
        return replace(self, **{f"X_{split}": X, f"y_{split}": y})


@dataclass(frozen=True, eq=False)
class MtlDataset:
    tasks: tuple
    names: tuple = ()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise SchemaError("dataset has no tasks")
        dims = {t.d for t in tasks}
        if len(dims) != 1:
            raise SchemaError(f"tasks disagree on feature dimension: {sorted(dims)}")
        names = tuple(self.names) or tuple(f"task{k}" for k in range(len(tasks)))
        object.__setattr__(self, "tasks", tasks)
        object.__setattr__(self, "names", names)

    @property
    def K(self) -> int:
        return len(self.tasks)

    @property
    def d(self) -> int:
        return self.tasks[0].d

    def n_train(self) -> list[int]:
        return [t.n_train for t in self.tasks]

    def ones(self) -> list[NDArray]:
        """All-ones per-sample weights for the training splits."""
        return [np.ones(n) for n in self.n_train()]

    def iter_train(self) -> Iterator[tuple[int, int]]:
        for l, n in enumerate(self.n_train()):
            for i in range(n):
                yield l, i

    def replace_task(self, k: int, task: TaskData) -> "MtlDataset":
        tasks = list(self.tasks)
        tasks[k] = task
        return replace(self, tasks=tuple(tasks))

    def without_train(self, removed: Sequence[tuple[int, int]]) -> "MtlDataset":
        """Copy with the given ``(task, index)`` training samples deleted."""
        drop: dict[int, set] = {}
        for l, i in removed:
            drop.setdefault(int(l), set()).add(int(i))
        tasks = []
        for l, t in enumerate(self.tasks):
            keep = np.array([i for i in range(t.n_train) if i not in drop.get(l, ())], dtype=int)
            tasks.append(replace(t, X_train=t.X_train[keep], y_train=t.y_train[keep]))
        return replace(self, tasks=tuple(tasks))

    def without_task(self, l: int) -> "MtlDataset":
        keep = [k for k in range(self.K) if k != l]
        return replace(
            self, tasks=tuple(self.tasks[k] for k in keep), names=tuple(self.names[k] for k in keep)
        )


@dataclass(frozen=True)
class SyntheticConfig:
    """Generator settings; ``labels`` switches between regression and binary targets."""

    K: int = 10
    n: int = 200
    d: int = 50
    delta: float = 1.0
    alpha: float = 0.0
    noise_sd: float = 1.0
    seed: int = 0
    labels: str = "regression"

    def validate(self) -> None:
        if self.K < 1 or self.n < 1 or self.d < 1:
            raise InvalidConfig("K, n and d must be positive")
        if not 0 <= self.alpha <= 1:
            raise InvalidConfig(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.delta < 0 or self.noise_sd < 0:
            raise InvalidConfig("delta and noise_sd must be nonnegative")
        if self.labels not in ("regression", "binary"):
            raise InvalidConfig(f"labels must be 'regression' or 'binary', got {self.labels!r}")


def _split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    if n_val + n_test > n:
        n_test = n - n_val
    return n - n_val - n_test, n_val, n_test


def _check_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise InvalidRatios(f"ratios must be three nonnegative numbers summing to 1, got {tuple(ratios)}")
    return tuple(float(r) for r in ratios)


def split_arrays(X: NDArray, y: NDArray, ratios: Sequence[float], rng: np.random.Generator) -> TaskData:
    """Shuffle one task's samples and slice them into train/val/test.

    Validation and test sizes are ``round(ratio * n)``; train takes the rest.
    """
    ratios = _check_ratios(ratios)
    n = len(y)
    n_train, n_val, _ = _split_sizes(n, ratios)
    perm = rng.permutation(n)
    X, y = X[perm], y[perm]
    a, b = n_train, n_train + n_val
    return TaskData(X[:a], y[:a], X[a:b], y[a:b], X[b:], y[b:])


def split(ds: MtlDataset, ratios: Sequence[float], seed: int) -> MtlDataset:
    """Re-split every task from its pooled samples with a per-task seeded shuffle."""
    ratios = _check_ratios(ratios)
    streams = np.random.SeedSequence(seed).spawn(ds.K)
    tasks = []
    for task, ss in zip(ds.tasks, streams):
        X, y = task.pooled()
        tasks.append(split_arrays(X, y, ratios, np.random.default_rng(ss)))
    return replace(ds, tasks=tuple(tasks))


def _unit(v: NDArray) -> NDArray:
    return v / np.linalg.norm(v)


def generate_synthetic(cfg: SyntheticConfig) -> MtlDataset:
    """Multitask regression (or binary) data around the common vector ``2 e_1``.

    Each task's coefficient is ``2 e_1 + delta * u_k`` with ``u_k`` uniform on
    the unit sphere. ``round(alpha * K)`` tasks, picked by a seeded shuffle, get
    an unrelated coefficient instead: a standard normal vector rescaled to
    norm 2. Samples are split 1:1:1 per task.
    """
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    coef_ss, pick_ss, *task_ss = root.spawn(cfg.K + 2)
    coef_rng = np.random.default_rng(coef_ss)
    beta = np.zeros(cfg.d)
    beta[0] = 2.0
    thetas = [beta + cfg.delta * _unit(coef_rng.standard_normal(cfg.d)) for _ in range(cfg.K)]
    n_replaced = int(round(cfg.alpha * cfg.K))
    replaced = sorted(int(k) for k in np.random.default_rng(pick_ss).permutation(cfg.K)[:n_replaced])
    for k in replaced:
        thetas[k] = np.linalg.norm(beta) * _unit(coef_rng.standard_normal(cfg.d))

    tasks = []
    for k, ss in enumerate(task_ss):
        data_rng, split_rng = (np.random.default_rng(s) for s in ss.spawn(2))
        X = data_rng.standard_normal((cfg.n, cfg.d))
        signal = X @ thetas[k] + cfg.noise_sd * data_rng.standard_normal(cfg.n)
        y = signal if cfg.labels == "regression" else (signal > 0).astype(float)
        tasks.append(split_arrays(X, y, (1 / 3, 1 / 3, 1 / 3), split_rng))

    provenance = {
        "generator": "synthetic",
        "config": asdict(cfg),
        "replaced_tasks": replaced,
        "true_thetas": [t.tolist() for t in thetas],
    }
    return MtlDataset(tuple(tasks), tuple(f"task{k}" for k in range(cfg.K)), provenance)


def corrupt_labels(ds: MtlDataset, fraction: float, seed: int):
    """Flip a seeded uniform sample of binary training labels.

    Draws ``round(fraction * N)`` samples from the pooled training sets of all
    tasks. Returns the corrupted dataset and the set of ``(task, index)`` pairs.
    """
    if not 0 <= fraction <= 1:
        raise InvalidConfig(f"fraction must lie in [0, 1], got {fraction}")
    for t in ds.tasks:
        for split_name in SPLITS:
            labels = t.xy(split_name)[1]
            if labels.size and not np.all((labels == 0) | (labels == 1)):
                raise NotClassification("label corruption needs {0, 1} labels")
    pool = list(ds.iter_train())
    n_flip = int(round(fraction * len(pool)))
    chosen = np.random.default_rng(seed).choice(len(pool), size=n_flip, replace=False)
    corrupted = {pool[j] for j in chosen}
    tasks = []
    for l, t in enumerate(ds.tasks):
        y = t.y_train.copy()
        for i in range(len(y)):
            if (l, i) in corrupted:
                y[i] = 1.0 - y[i]
        tasks.append(replace(t, y_train=y))
    prov = dict(ds.provenance)
    prov["corruption"] = {"fraction": fraction, "seed": seed, "indices": sorted([list(p) for p in corrupted])}
    return replace(ds, tasks=tuple(tasks), provenance=prov), corrupted


def pca_reduce(ds: MtlDataset, target_dim: int) -> MtlDataset:
    """Project every split onto the top principal directions of the pooled training features."""
    if not 1 <= target_dim <= ds.d:
        raise InvalidConfig(f"target_dim must lie in [1, {ds.d}], got {target_dim}")
    X = np.vstack([t.X_train for t in ds.tasks])
    if len(X) == 0:
        raise InvalidConfig("PCA needs a nonempty training split")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    tol = s.max(initial=0.0) * max(X.shape) * np.finfo(float).eps
    rank = int(np.sum(s > tol))
    k = target_dim
    if rank < target_dim:
        warnings.warn(
            f"training features have rank {rank} < {target_dim}; projecting onto {rank} directions",
            RankDeficientWarning,
            stacklevel=2,
        )
        k = rank
    components = vt[:k]
    tasks = []
    for t in ds.tasks:
        tasks.append(
            TaskData(
                *(
                    arr
                    for split_name in SPLITS
                    for arr in ((t.xy(split_name)[0] - mean) @ components.T, t.xy(split_name)[1])
                )
            )
        )
    prov = dict(ds.provenance)
    prov["pca"] = {"mean": mean.tolist(), "components": components.tolist(), "target_dim": target_dim}
    return replace(ds, tasks=tuple(tasks), provenance=prov)


# CSV schema: task_id, split, label, f0..f{d-1}


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_csv(ds: MtlDataset, path, meta: dict | None = None) -> Path:
    """Write the dataset and, when ``meta`` is given, a ``<name>.meta.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task_id", "split", "label", *(f"f{j}" for j in range(ds.d))])
        for k, t in enumerate(ds.tasks):
            for split_name in SPLITS:
                X, y = t.xy(split_name)
                for x, label in zip(X, y):
                    writer.writerow([k, split_name, _fmt(label), *map(_fmt, x)])
    if meta is not None:
        meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_csv(path) -> MtlDataset:
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"dataset file not found: {path}")
    rows: dict[int, dict[str, tuple[list, list]]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["task_id", "split", "label"]:
            raise SchemaError(f"{path}: header must start with task_id,split,label")
        d = len(header) - 3
        if d < 1 or header[3:] != [f"f{j}" for j in range(d)]:
            raise SchemaError(f"{path}: feature columns must be named f0..f{{d-1}}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 3:
                raise SchemaError(f"{path}: line {line_no} has {len(row)} fields, expected {d + 3}")
            try:
                task_id = int(row[0])
            except ValueError:
                raise ParseError(line_no, f"task_id {row[0]!r} is not an integer") from None
            if row[1] not in SPLITS:
                raise ParseError(line_no, f"split {row[1]!r} is not one of {SPLITS}")
            try:
                values = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(line_no, str(exc)) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError(line_no, "non-finite value")
            xs, ys = rows.setdefault(task_id, {s: ([], []) for s in SPLITS})[row[1]]
            xs.append(values[1:])
            ys.append(values[0])
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    ids = sorted(rows)
    tasks = []
    for tid in ids:
        parts = []
        for split_name in SPLITS:
            xs, ys = rows[tid][split_name]
            parts += [np.asarray(xs, dtype=float).reshape(len(ys), d), np.asarray(ys, dtype=float)]
        tasks.append(TaskData(*parts))
    prov = {"source": str(path), "sha256": file_sha256(path), "task_ids": ids}
    mp = meta_path(path)
    if mp.exists():
        prov["meta"] = json.loads(mp.read_text(encoding="utf-8"))
    return MtlDataset(tuple(tasks), tuple(f"task{tid}" for tid in ids), prov)
