"""Correlation statistics and the evaluation protocols built on them.

Signs: an influence score and an oracle delta both estimate how much a
target's validation loss drops when the source is removed, so they are
compared directly. Cosine affinity measures how much a source helps, so the
baseline is ranked by ``-cos``.
"""

from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.stats import rankdata

from .data import MtlDataset, SyntheticConfig, generate_synthetic, split_arrays
from .errors import IndexMismatch, LengthMismatch, UndefinedCorrelationWarning
from .influence import InfluenceMatrix, MultitaskInfluence
from .models import ModelSpec
from .oracle import LooRecord, loo_all, loto_delta
from .selection import cosine_task_affinity
from .trainer import SolverConfig, fit


@dataclass(frozen=True)
class CorrelationReport:
    target_task: int
    method: str
    rho: float  # Spearman
    r: float  # Pearson
    n_points: int
    seed: int


def _pair(xs, ys, min_len: int):
    x = np.asarray(xs, dtype=float).ravel()
    y = np.asarray(ys, dtype=float).ravel()
    if x.size != y.size:
        raise LengthMismatch(f"inputs have lengths {x.size} and {y.size}")
    if x.size < min_len:
        raise LengthMismatch(f"need at least {min_len} points, got {x.size}")
    return x, y


def _corr(x: NDArray, y: NDArray) -> float:
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        warnings.warn("correlation undefined for a constant input", UndefinedCorrelationWarning, stacklevel=3)
        return float("nan")
    xc, yc = x - x.mean(), y - y.mean()
    r = float(xc @ yc / np.sqrt((xc @ xc) * (yc @ yc)))
    return min(1.0, max(-1.0, r))


def pearson(xs, ys) -> float:
    """Product-moment correlation; NaN with a warning when either input is constant."""
    x, y = _pair(xs, ys, 2)
    return _corr(x, y)


def spearman(xs, ys) -> float:
    """Pearson correlation of average ranks; NaN with a warning when either input is constant."""
    x, y = _pair(xs, ys, 1)
    return _corr(rankdata(x), rankdata(y))


def mean_sem(values: Sequence[float]) -> tuple[float, float, int]:
    """Mean and standard error over the finite entries."""
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return float("nan"), float("nan"), 0
    sem = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), sem, int(v.size)


def resplit_target(dataset: MtlDataset, k: int, val_fraction: float, seed: int) -> MtlDataset:
    """Re-split task ``k``'s train+val pool so ``val_fraction`` of it is validation; test is untouched."""
    t = dataset.tasks[k]
    X = np.vstack([t.X_train, t.X_val])
    y = np.concatenate([t.y_train, t.y_val])
    rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
    pooled = split_arrays(X, y, (1 - val_fraction, val_fraction, 0.0), rng)
    new = pooled.with_split("test", t.X_test, t.y_test)
    return dataset.replace_task(k, new)


def loto_correlations(
    spec: ModelSpec,
    dataset: MtlDataset,
    k: int,
    cfg: SolverConfig | None = None,
    seed: int = 0,
) -> tuple[CorrelationReport, CorrelationReport, dict]:
    """MTIF_task and cosine against LOTO for one target on an already-split dataset."""
    cfg = cfg or SolverConfig()
    base = fit(spec, dataset, cfg=cfg)
    model = MultitaskInfluence(spec, dataset, base)
    sources = [l for l in range(dataset.K) if l != k]
    mtif = np.array([model.task_score(l, k) for l in sources])
    loto = np.array([loto_delta(l, [k], spec, dataset, cfg, base)[0].delta for l in sources])
    cos = cosine_task_affinity(spec, model, dataset).scores[sources, k]
    n = len(sources)
    reports = (
        CorrelationReport(k, "mtif", spearman(mtif, loto), pearson(mtif, loto), n, seed),
        CorrelationReport(k, "cosine", spearman(-cos, loto), pearson(-cos, loto), n, seed),
    )
    raw = {"sources": sources, "mtif": mtif.tolist(), "loto": loto.tolist(), "cosine": cos.tolist()}
    return (*reports, raw)


@dataclass(frozen=True, eq=False)
class ProtocolResult:
    reports: tuple
    summary: dict  # method -> {target: (mean, sem, n)}
    raw: tuple = ()

    def mean_rho(self, method: str) -> NDArray:
        return np.array([self.summary[method][k][0] for k in sorted(self.summary[method])])

    def to_json(self) -> dict:
        return {
            "reports": [asdict(r) for r in self.reports],
            "summary": {
                m: {str(k): {"mean": v[0], "sem": v[1], "n": v[2]} for k, v in sorted(s.items())}
                for m, s in self.summary.items()
            },
        }


def loto_protocol(
    spec: ModelSpec,
    data: SyntheticConfig | MtlDataset,
    cfg: SolverConfig | None = None,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    reseed_data: bool = True,
    val_fraction: float = 0.2,
    targets: Sequence[int] | None = None,
    jobs: int = 1,
) -> ProtocolResult:
    """Per-target Spearman of MTIF_task (and the cosine baseline) against LOTO, over seeds.

    For every seed and target, the target's train+val pool is re-split with
    ``val_fraction`` held out for validation. With a synthetic config,
    ``reseed_data`` regenerates the data from each seed; with a fixed
    dataset, or ``reseed_data=False``, only the re-split changes.
    """
    if data.K < 3:
        raise ValueError("the protocol needs at least three tasks")
    cfg = cfg or SolverConfig()
    targets = list(range(data.K)) if targets is None else list(targets)
    if isinstance(data, MtlDataset):
        datasets = {s: data for s in seeds}
    else:
        datasets = {s: generate_synthetic(replace(data, seed=s if reseed_data else data.seed)) for s in seeds}

    def job(item):
        s, k = item
        ds = resplit_target(datasets[s], k, val_fraction, s)
        return loto_correlations(spec, ds, k, cfg, s)

    items = [(s, k) for s in seeds for k in targets]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(job, items))
    else:
        results = [job(it) for it in items]
    reports = tuple(r for m, c, _ in results for r in (m, c))
    summary = {
        method: {k: mean_sem([r.rho for r in reports if r.method == method and r.target_task == k]) for k in targets}
        for method in ("mtif", "cosine")
    }
    return ProtocolResult(reports, summary, tuple(raw for *_, raw in results))


@dataclass(frozen=True)
class InstanceReport:
    target_task: int
    within_r: float
    between_r: float
    n_within: int
    n_between: int


def matched_pairs(im: InfluenceMatrix, records: Sequence[LooRecord]):
    """``(mtif, loo)`` arrays aligned on the oracle records."""
    mtif, loo = [], []
    for rec in records:
        if rec.target not in im.targets or not 0 <= rec.source_task < len(im.scores):
            raise IndexMismatch(f"oracle record {rec} has no matching influence score")
        if not 0 <= rec.source_index < im.n_sources[rec.source_task]:
            raise IndexMismatch(f"oracle record {rec} has no matching influence score")
        mtif.append(im.score(rec.source_index, rec.source_task, rec.target))
        loo.append(rec.delta)
    return np.array(mtif), np.array(loo)


def instance_protocol(
    spec: ModelSpec,
    dataset: MtlDataset,
    cfg: SolverConfig | None = None,
    targets: Sequence[int] | None = None,
    jobs: int = 1,
):
    """Pearson between instance scores and LOO deltas, split into within- and between-task pairs.

    Returns ``(reports, influence_matrix, loo_records)``.
    """
    cfg = cfg or SolverConfig()
    base = fit(spec, dataset, cfg=cfg)
    targets = list(range(dataset.K)) if targets is None else list(targets)
    im = MultitaskInfluence(spec, dataset, base).scores(targets)
    records = loo_all(spec, dataset, cfg, targets, base=base, jobs=jobs)
    reports = []
    for k in targets:
        within = [r for r in records if r.target == k and r.source_task == k]
        between = [r for r in records if r.target == k and r.source_task != k]
        rw = pearson(*matched_pairs(im, within)) if len(within) >= 2 else float("nan")
        rb = pearson(*matched_pairs(im, between)) if len(between) >= 2 else float("nan")
        reports.append(InstanceReport(k, rw, rb, len(within), len(between)))
    return reports, im, records


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def scatter_export(im: InfluenceMatrix, records: Sequence[LooRecord], path, meta: dict | None = None) -> Path:
    """Write matched (LOO delta, score) pairs as CSV plus a ``.meta.json`` sidecar with slope and Pearson."""
    path = Path(path)
    mtif, loo = matched_pairs(im, records)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["source_task", "source_index", "target_task", "loo_delta", "mtif_score"])
        for rec, s in zip(records, mtif):
            writer.writerow([rec.source_task, rec.source_index, rec.target, _fmt(rec.delta), _fmt(s)])
    slope = r = None
    if len(loo) >= 2 and np.ptp(loo) > 0:
        slope = float(np.polyfit(loo, mtif, 1)[0])
        r = pearson(loo, mtif)
    sidecar = {"n_points": len(loo), "slope": slope, "pearson": r, **(meta or {})}
    path.with_name(path.stem + ".meta.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path
