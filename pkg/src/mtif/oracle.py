"""Brute-force references: leave-one-out and leave-one-task-out retraining, and
finite differences along a single sample weight.

LOO removal zeroes the sample's weight and keeps the task's 1/n_k
denominator, which is the path the influence derivative linearizes. Passing
``renormalize=True`` deletes the sample outright so the denominator drops to
n_k - 1 instead.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import MtlDataset
from .errors import InvalidConfig, NotConverged
from .influence import validation_loss
from .models import ModelSpec
from .trainer import FitResult, SolverConfig, fit, fit_task_weighted


@dataclass(frozen=True)
class LooRecord:
    source_task: int
    source_index: int
    target: int
    delta: float  # V_k(full fit) - V_k(fit without the sample)
    retrain_iters: int


@dataclass(frozen=True)
class LotoRecord:
    source_task: int
    target: int
    delta: float


def _targets(dataset: MtlDataset, targets) -> list[int]:
    return list(range(dataset.K)) if targets is None else [int(k) for k in targets]


def _vloss(spec, params, dataset, k, split) -> float:
    return validation_loss(spec, params, k, dataset, split).value


def loo_delta(
    i: int,
    l: int,
    targets: Iterable[int] | None,
    spec: ModelSpec,
    dataset: MtlDataset,
    cfg: SolverConfig | None = None,
    base: FitResult | None = None,
    warm_start: bool = True,
    renormalize: bool = False,
    split: str = "val",
) -> list[LooRecord]:
    """Retrain without training sample ``(l, i)`` and report each target's validation-loss change."""
    cfg = cfg or SolverConfig()
    if not 0 <= i < dataset.tasks[l].n_train:
        raise IndexError(f"sample {i} is not in task {l}'s training split")
    base = base or fit(spec, dataset, cfg=cfg)
    init = base.params if warm_start else None
    try:
        if renormalize:
            reduced = dataset.without_train([(l, i)])
            res = fit(spec, reduced, cfg=cfg, init=init)
        else:
            sigma = dataset.ones()
            sigma[l][i] = 0.0
            res = fit(spec, dataset, sigma, cfg, init)
    except NotConverged as exc:
        raise NotConverged(exc.final_grad_norm, exc.iterations, f"LOO retrain of sample ({l}, {i})") from exc
    out = []
    for k in _targets(dataset, targets):
        delta = _vloss(spec, base.params, dataset, k, split) - _vloss(spec, res.params, dataset, k, split)
        out.append(LooRecord(l, i, k, float(delta), res.iterations))
    return out


def loo_all(
    spec: ModelSpec,
    dataset: MtlDataset,
    cfg: SolverConfig | None = None,
    targets: Iterable[int] | None = None,
    sources: Sequence[tuple[int, int]] | None = None,
    base: FitResult | None = None,
    jobs: int = 1,
    **kwargs,
) -> list[LooRecord]:
    """LOO deltas for every requested source sample, ordered by (source task, index, target)."""
    cfg = cfg or SolverConfig()
    base = base or fit(spec, dataset, cfg=cfg)
    targets = _targets(dataset, targets)
    sources = list(dataset.iter_train()) if sources is None else [tuple(s) for s in sources]

    def job(src):
        l, i = src
        return loo_delta(i, l, targets, spec, dataset, cfg, base, **kwargs)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(job, sources))
    else:
        results = [job(s) for s in sources]
    records = [r for batch in results for r in batch]
    return sorted(records, key=lambda r: (r.source_task, r.source_index, r.target))


def loto_delta(
    l: int,
    targets: Iterable[int] | None,
    spec: ModelSpec,
    dataset: MtlDataset,
    cfg: SolverConfig | None = None,
    base: FitResult | None = None,
    split: str = "val",
) -> list[LotoRecord]:
    """Retrain with task ``l``'s weight set to zero.

    The ``k == l`` entry is never emitted: task ``l``'s own parameters are not
    identified once its terms leave the objective.
    """
    if dataset.K < 2:
        raise InvalidConfig("leave-one-task-out needs at least two tasks")
    if not 0 <= l < dataset.K:
        raise IndexError(f"task index {l} out of range")
    cfg = cfg or SolverConfig()
    base = base or fit(spec, dataset, cfg=cfg)
    weights = np.ones(dataset.K)
    weights[l] = 0.0
    try:
        res = fit_task_weighted(spec, dataset, weights, cfg, init=base.params)
    except NotConverged as exc:
        raise NotConverged(exc.final_grad_norm, exc.iterations, f"LOTO retrain without task {l}") from exc
    out = []
    for k in _targets(dataset, targets):
        if k == l:
            continue
        delta = _vloss(spec, base.params, dataset, k, split) - _vloss(spec, res.params, dataset, k, split)
        out.append(LotoRecord(l, k, float(delta)))
    return out


def loto_all(
    spec: ModelSpec,
    dataset: MtlDataset,
    cfg: SolverConfig | None = None,
    targets: Iterable[int] | None = None,
    base: FitResult | None = None,
    jobs: int = 1,
    split: str = "val",
) -> list[LotoRecord]:
    cfg = cfg or SolverConfig()
    base = base or fit(spec, dataset, cfg=cfg)
    targets = _targets(dataset, targets)

    def job(l):
        return loto_delta(l, targets, spec, dataset, cfg, base, split)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(job, range(dataset.K)))
    else:
        results = [job(l) for l in range(dataset.K)]
    records = [r for batch in results for r in batch]
    return sorted(records, key=lambda r: (r.source_task, r.target))


def fd_sigma_derivative(
    i: int,
    l: int,
    k: int,
    step: float,
    spec: ModelSpec,
    dataset: MtlDataset,
    cfg: SolverConfig | None = None,
    base: FitResult | None = None,
    split: str = "val",
) -> float:
    """Central difference of ``V_k`` along ``sigma_li`` around 1."""
    if not 0 < step <= 0.1:
        raise InvalidConfig(f"step must lie in (0, 0.1], got {step}")
    cfg = cfg or SolverConfig()
    base = base or fit(spec, dataset, cfg=cfg)
    values = []
    for s in (1 + step, 1 - step):
        sigma = dataset.ones()
        sigma[l][i] = s
        res = fit(spec, dataset, sigma, cfg, base.params)
        values.append(_vloss(spec, res.params, dataset, k, split))
    return (values[0] - values[1]) / (2 * step)


def fd_task_derivative(
    l: int,
    k: int,
    step: float,
    spec: ModelSpec,
    dataset: MtlDataset,
    cfg: SolverConfig | None = None,
    base: FitResult | None = None,
    split: str = "val",
) -> float:
    """Central difference of ``V_k`` along the task weight of task ``l``."""
    if not 0 < step <= 0.1:
        raise InvalidConfig(f"step must lie in (0, 0.1], got {step}")
    cfg = cfg or SolverConfig()
    base = base or fit(spec, dataset, cfg=cfg)
    values = []
    for s in (1 + step, 1 - step):
        weights = np.ones(dataset.K)
        weights[l] = s
        res = fit_task_weighted(spec, dataset, weights, cfg, init=base.params)
        values.append(_vloss(spec, res.params, dataset, k, split))
    return (values[0] - values[1]) / (2 * step)
