"""Influence-guided data selection and the cosine task-affinity baseline."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .data import MtlDataset
from .errors import (
    IncompleteMatrix,
    InvalidConfig,
    NotClassification,
    NotConverged,
    ZeroGradientWarning,
)
from .influence import InfluenceMatrix, MultitaskInfluence, TaskAffinity
from .models import ModelSpec, MtlParams, per_sample_grads, per_sample_losses, sigmoid
from .trainer import FitResult, SolverConfig, fit

logger = logging.getLogger(__name__)

DEFAULT_GRID = (0.0, 0.05, 0.1, 0.2)


@dataclass(frozen=True)
class SelectionPlan:
    ranked: tuple  # (l, i, total_score), removal candidates first
    removal_fraction: float
    removed: frozenset
    tuning_grid: tuple
    chosen_by: str


@dataclass(frozen=True, eq=False)
class SelectionReport:
    plan: SelectionPlan
    fractions: dict  # fraction -> mean validation metric, skipped fractions absent
    skipped: dict  # fraction -> reason
    val_metric: dict
    test_accuracy: float | None
    baseline_test_accuracy: float | None
    corruption: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "chosen_fraction": self.plan.removal_fraction,
            "chosen_by": self.plan.chosen_by,
            "tuning_grid": list(self.plan.tuning_grid),
            "per_fraction": {repr(f): v for f, v in self.fractions.items()},
            "skipped": {repr(f): v for f, v in self.skipped.items()},
            "removed": sorted([l, i] for l, i in self.plan.removed),
            "test_accuracy": self.test_accuracy,
            "baseline_test_accuracy": self.baseline_test_accuracy,
            "corruption": self.corruption,
        }


def rank_total_influence(im: InfluenceMatrix, flip_sign: bool = False, n_targets: int | None = None) -> list:
    """Order training samples by ``sum_k MTIF(i, l; k)``, largest first.

    A positive derivative means dropping the sample is predicted to lower
    validation loss, so the head of the list holds the samples whose removal
    helps most. ``flip_sign`` reverses the convention. Ties fall back to
    ``(task, sample)`` order.
    """
    if n_targets is not None and len(im.targets) != n_targets:
        raise IncompleteMatrix(f"matrix covers {len(im.targets)} of {n_targets} targets")
    sign = -1.0 if flip_sign else 1.0
    entries = [(l, i, float(t)) for l, tot in enumerate(im.totals()) for i, t in enumerate(tot)]
    return sorted(entries, key=lambda e: (-sign * e[2], e[0], e[1]))


def removal_set(ranked: Sequence, fraction: float) -> frozenset:
    count = int(np.floor(fraction * len(ranked) + 1e-12))
    return frozenset((l, i) for l, i, _ in ranked[:count])


def accuracy(spec: ModelSpec, params: MtlParams, dataset: MtlDataset, split: str = "test"):
    """Per-task accuracy at a 0.5 probability threshold, and their unweighted mean."""
    if not spec.is_classifier:
        raise NotClassification(f"{spec.kind} is not a classifier")
    per_task = []
    for k, task in enumerate(dataset.tasks):
        X, y = task.xy(split)
        pred = (sigmoid(X @ params.thetas[k]) > 0.5).astype(float)
        per_task.append(float(np.mean(pred == y)) if len(y) else float("nan"))
    return np.array(per_task), float(np.nanmean(per_task))


def _val_metric(spec, params, dataset, split="val") -> float:
    if spec.is_classifier:
        return accuracy(spec, params, dataset, split)[1]
    mses = [np.mean(per_sample_losses(spec, params, k, *t.xy(split))) for k, t in enumerate(dataset.tasks)]
    return -float(np.mean(mses))


def select_and_retrain(
    spec: ModelSpec,
    dataset: MtlDataset,
    im: InfluenceMatrix,
    grid: Sequence[float] = DEFAULT_GRID,
    cfg: SolverConfig | None = None,
    corrupted: set | None = None,
    flip_sign: bool = False,
    base: FitResult | None = None,
):
    """Drop the top of the influence ranking at each grid fraction, retrain, keep the best.

    Fractions are scored by mean validation accuracy (classification) or
    negative mean validation squared error (regression); ties go to the
    smaller fraction. Returns ``(best_fraction, FitResult, SelectionReport)``.
    """
    grid = tuple(sorted({float(f) for f in grid}))
    if not grid or any(not 0 <= f <= 0.5 for f in grid):
        raise InvalidConfig("selection grid must be nonempty with values in [0, 0.5]")
    if im.n_sources != tuple(dataset.n_train()):
        raise IncompleteMatrix("influence matrix does not cover the training set")
    cfg = cfg or SolverConfig()
    ranked = rank_total_influence(im, flip_sign, n_targets=dataset.K)

    metrics, skipped, fits = {}, {}, {}
    for f in grid:
        removed = removal_set(ranked, f)
        try:
            if not removed and base is not None:
                res = base
            else:
                res = fit(spec, dataset.without_train(sorted(removed)), cfg=cfg)
        except NotConverged as exc:
            logger.warning("fraction %s skipped: %s", f, exc)
            skipped[f] = str(exc)
            continue
        fits[f] = res
        metrics[f] = _val_metric(spec, res.params, dataset)
    if not metrics:
        raise NotConverged(float("nan"), 0, "every selection fraction failed to converge")

    best = max(metrics, key=lambda f: (metrics[f], -f))
    removed = removal_set(ranked, best)
    metric_name = "mean_val_accuracy" if spec.is_classifier else "neg_mean_val_mse"
    plan = SelectionPlan(tuple(ranked), best, removed, grid, metric_name)

    test_acc = baseline_acc = None
    if spec.is_classifier:
        test_acc = accuracy(spec, fits[best].params, dataset, "test")[1]
        if 0.0 in fits:
            baseline_acc = accuracy(spec, fits[0.0].params, dataset, "test")[1]
    corruption = {}
    if corrupted is not None:
        hits = len(removed & set(corrupted))
        corruption = {
            "precision": hits / len(removed) if removed else float("nan"),
            "recall": hits / len(corrupted) if corrupted else float("nan"),
            "base_rate": len(corrupted) / len(ranked) if ranked else float("nan"),
        }
    report = SelectionReport(plan, metrics, skipped, metrics, test_acc, baseline_acc, corruption)
    return best, fits[best], report


def corruption_rate(ranked: Sequence, fraction: float, corrupted: set) -> float:
    removed = removal_set(ranked, fraction)
    return len(removed & set(corrupted)) / len(removed) if removed else float("nan")


def _cosine(u: NDArray, v: NDArray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    return float(u @ v / (nu * nv))


def cosine_task_affinity(spec: ModelSpec, fitted, dataset: MtlDataset) -> TaskAffinity:
    """Cosine between the shared-parameter loads of every task pair.

    The loss never touches gamma, so each task's gradient is carried to the
    shared block through the coupling, ``H_sl H_ll^{-1} mean_i dl/dtheta_l``,
    plus any direct gamma gradient.
    """
    model = fitted if isinstance(fitted, MultitaskInfluence) else MultitaskInfluence(spec, dataset, fitted)
    loads = []
    for l, task in enumerate(dataset.tasks):
        g_theta, g_gamma = per_sample_grads(spec, model.params, l, task.X_train, task.y_train)
        loads.append(model.fac.coupling[l].T @ g_theta.mean(axis=0) + g_gamma.mean(axis=0))
    K = dataset.K
    out = np.zeros((K, K))
    scale = max(np.linalg.norm(g) for g in loads)
    zero = [np.linalg.norm(g) <= 1e-300 or np.linalg.norm(g) <= 1e-14 * scale for g in loads]
    for l in range(K):
        if zero[l]:
            warnings.warn(f"task {l} has a zero shared-parameter gradient", ZeroGradientWarning, stacklevel=2)
    for l in range(K):
        for k in range(K):
            if not (zero[l] or zero[k]):
                out[l, k] = _cosine(loads[l], loads[k])
    return TaskAffinity(out, "cosine", {"model": model.params.fingerprint()})
