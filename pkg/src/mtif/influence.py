"""Instance- and task-level multitask influence scores.

A score is the derivative of target task ``k``'s validation loss with respect
to a training weight at the all-ones point: ``d V_k / d sigma_li`` for one
sample, ``d V_k / d st_l`` for a whole task. Removing a sample moves its
weight from 1 to 0, so a positive score predicts that removal lowers the
target's validation loss.

The parameter derivatives are assembled from the block factorization of the
joint Hessian. With ``C_k = H_kk^{-1} H_ks`` and per-sample load
``(a, b) = (1/n_l)(dl/dtheta_l, dl/dgamma)``:

* shared:   d gamma   = N^{-1} (C_l^T a - b)
* within:   d theta_l = -H_ll^{-1} a - C_l d gamma
* between:  d theta_k = -C_k d gamma          (k != l)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from numpy.typing import NDArray

from .data import MtlDataset
from .errors import DampedHessian, EmptySplit, IndexMismatch, SameTask
from .linalg import BlockFactorization
from .models import ModelSpec, MtlParams, per_sample_grads, per_sample_losses, reg_value_grad_hess
from .trainer import FitResult, full_hessian

__all__ = [
    "ValidationLoss",
    "InfluenceMatrix",
    "TaskAffinity",
    "MultitaskInfluence",
    "validation_loss",
    "mtif_instance",
    "mtif_all",
    "mtif_task",
]

NORMALIZATION_NOTE = "per-sample loads scaled by 1/n_l; n_l fixed when a weight is zeroed"


@dataclass(frozen=True, eq=False)
class ValidationLoss:
    task: int
    value: float
    grad_theta: NDArray
    grad_gamma: NDArray
    n: int
    split: str = "val"


def validation_loss(
    spec: ModelSpec, params: MtlParams, k: int, dataset: MtlDataset, split: str = "val"
) -> ValidationLoss:
    """Mean loss of task ``k`` on one split and its analytic gradient."""
    X, y = dataset.tasks[k].xy(split)
    if len(y) == 0:
        raise EmptySplit(f"task {k} has an empty {split} split")
    losses = per_sample_losses(spec, params, k, X, y)
    g_theta, g_gamma = per_sample_grads(spec, params, k, X, y)
    return ValidationLoss(k, float(losses.mean()), g_theta.mean(axis=0), g_gamma.mean(axis=0), len(y), split)


@dataclass(frozen=True, eq=False)
class InfluenceMatrix:
    """``scores[l][i, j]`` is the influence of training sample ``(l, i)`` on target ``targets[j]``."""

    scores: tuple
    targets: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        scores = tuple(np.asarray(s, dtype=float).reshape(-1, len(self.targets)) for s in self.scores)
        if not all(np.all(np.isfinite(s)) for s in scores):
            raise ValueError("influence scores must be finite")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))

    @property
    def n_sources(self) -> tuple:
        return tuple(len(s) for s in self.scores)

    def score(self, i: int, l: int, k: int) -> float:
        return float(self.scores[l][i, self.targets.index(k)])

    def totals(self) -> list[NDArray]:
        """Per source task, the sum of every sample's scores over targets."""
        return [s.sum(axis=1) for s in self.scores]

    def rows(self) -> Iterator[tuple[int, int, int, float]]:
        for l, s in enumerate(self.scores):
            for i in range(len(s)):
                for j, k in enumerate(self.targets):
                    yield l, i, k, float(s[i, j])

    def same_index(self, other: "InfluenceMatrix") -> bool:
        return self.targets == other.targets and self.n_sources == other.n_sources

    def with_scores(self, scores, **meta) -> "InfluenceMatrix":
        return InfluenceMatrix(tuple(scores), self.targets, {**self.meta, **meta})


@dataclass(frozen=True, eq=False)
class TaskAffinity:
    """``scores[l, k]``: influence (or affinity) of source task ``l`` on target ``k``."""

    scores: NDArray
    method: str = "mtif"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.scores, dtype=float))
        if s.shape[0] != s.shape[1] or not np.all(np.isfinite(s)):
            raise ValueError("task affinity must be a finite square matrix")
        object.__setattr__(self, "scores", s)


class MultitaskInfluence:
    """Influence machinery for one fitted model.

    The Hessian of the unweighted objective is factorized once at
    construction; every score afterwards costs a gradient and a few
    triangular solves. Instances are read-only after construction.
    """

    def __init__(
        self,
        spec: ModelSpec,
        dataset: MtlDataset,
        fitted: FitResult | MtlParams,
        split: str = "val",
        allow_damped: bool = False,
    ):
        if isinstance(fitted, FitResult):
            if fitted.damping > 0 and not allow_damped:
                raise DampedHessian(
                    f"fit needed damping {fitted.damping:g}; influence assumes a strictly convex objective"
                )
            params = fitted.params
        else:
            params = fitted
        params.check(spec)
        self.spec = spec
        self.dataset = dataset
        self.params = params
        self.split = split
        self.hessian = full_hessian(spec, params, dataset)
        self.fac = BlockFactorization(self.hessian)
        self._vloss: dict[int, ValidationLoss] = {}

    @property
    def K(self) -> int:
        return self.spec.K

    @property
    def schur(self) -> NDArray:
        return self.fac.schur

    def validation_loss(self, k: int) -> ValidationLoss:
        if k not in self._vloss:
            self._vloss[k] = validation_loss(self.spec, self.params, k, self.dataset, self.split)
        return self._vloss[k]

    def _check_task(self, k: int) -> None:
        if not 0 <= k < self.K:
            raise IndexError(f"task index {k} out of range for K={self.K}")

    def sample_loads(self, l: int, idx=None, X=None, y=None):
        """Per-sample loads ``(a (d, m), b (p, m))`` for training samples of task ``l``.

        ``X, y`` score arbitrary points of task ``l`` instead; the 1/n_l
        factor always uses the model's training-set size.
        """
        self._check_task(l)
        task = self.dataset.tasks[l]
        if X is None:
            X, y = task.X_train, task.y_train
            if idx is not None:
                idx = np.atleast_1d(idx)
                X, y = X[idx], y[idx]
        X = np.atleast_2d(X)
        g_theta, g_gamma = per_sample_grads(self.spec, self.params, l, X, np.atleast_1d(y))
        n_l = task.n_train
        return g_theta.T / n_l, g_gamma.T / n_l

    def _shared(self, l, a, b):
        return self.fac.solve_schur(self.fac.coupling[l].T @ a - b)

    def shared_param_influence(self, l: int, i=None) -> NDArray:
        """``d gamma_hat / d sigma_li``; ``i=None`` gives all samples as columns."""
        a, b = self.sample_loads(l, i)
        out = self._shared(l, a, b)
        return out[:, 0] if np.isscalar(i) else out

    def within_task_influence(self, k: int, i=None) -> NDArray:
        """``d theta_hat_k / d sigma_ki``."""
        a, b = self.sample_loads(k, i)
        d_gamma = self._shared(k, a, b)
        out = -self.fac.solve_task(k, a) - self.fac.coupling[k] @ d_gamma
        return out[:, 0] if np.isscalar(i) else out

    def between_task_influence(self, l: int, i, k: int) -> NDArray:
        """``d theta_hat_k / d sigma_li`` for a source task ``l != k``."""
        self._check_task(k)
        if l == k:
            raise SameTask(f"source and target are both task {k}; use within_task_influence")
        out = -self.fac.coupling[k] @ self.shared_param_influence(l, i)
        return out

    def parameter_derivatives(self, l: int, idx=None, X=None, y=None) -> NDArray:
        """Stacked ``d w_hat / d sigma_li`` as columns of a ``(sum(dims), m)`` array."""
        a, b = self.sample_loads(l, idx, X, y)
        d_gamma = self._shared(l, a, b)
        blocks = []
        for k in range(self.K):
            d = -self.fac.coupling[k] @ d_gamma
            if k == l:
                d -= self.fac.solve_task(l, a)
            blocks.append(d)
        return np.vstack([*blocks, d_gamma])

    def validation_gradient(self, k: int) -> NDArray:
        """Gradient of ``V_k`` over the flat parameter vector."""
        v = self.validation_loss(k)
        out = [np.zeros(self.spec.d) for _ in range(self.K)]
        out[k] = v.grad_theta
        return np.concatenate([*out, v.grad_gamma])

    def instance_score(self, i: int, l: int, k: int) -> float:
        v = self.validation_loss(k)
        d_gamma = self.shared_param_influence(l, i)
        if l == k:
            d_theta = self.within_task_influence(k, i)
        else:
            d_theta = self.between_task_influence(l, i, k)
        return float(v.grad_theta @ d_theta + v.grad_gamma @ d_gamma)

    def _target_vectors(self, targets):
        vt, vg = [], []
        for k in targets:
            v = self.validation_loss(k)
            vt.append(v.grad_theta)
            vg.append(v.grad_gamma)
        return vt, vg

    def scores(self, targets: Sequence[int] | None = None, sources=None) -> InfluenceMatrix:
        """Scores for every training sample (or the given ``sources``) against every target.

        ``sources`` is an optional per-task list of ``(X, y)`` points to score
        under this model.
        """
        targets = tuple(range(self.K)) if targets is None else tuple(targets)
        for k in targets:
            self._check_task(k)
        vt, vg = self._target_vectors(targets)
        # project the validation gradient through the coupling once per target
        through_shared = [vg[j] - self.fac.coupling[k].T @ vt[j] for j, k in enumerate(targets)]
        within = {k: self.fac.solve_task(k, vt[j]) for j, k in enumerate(targets)}
        blocks = []
        for l in range(self.K):
            if sources is None:
                a, b = self.sample_loads(l)
            else:
                X, y = sources[l]
                a, b = self.sample_loads(l, X=X, y=y)
            d_gamma = self._shared(l, a, b)
            s = np.empty((a.shape[1], len(targets)))
            for j, k in enumerate(targets):
                s[:, j] = through_shared[j] @ d_gamma
                if k == l:
                    s[:, j] -= within[k] @ a
            blocks.append(s)
        return InfluenceMatrix(
            tuple(blocks),
            targets,
            {"model": self.params.fingerprint(), "split": self.split, "normalization": NORMALIZATION_NOTE},
        )

    def task_load(self, l: int):
        """Load of the task-weighted objective: gradient of task ``l``'s bracketed terms.

        At a stationary point the theta block is the full gradient block of
        task ``l`` and vanishes up to the solver tolerance.
        """
        self._check_task(l)
        task = self.dataset.tasks[l]
        g_theta, g_gamma = per_sample_grads(self.spec, self.params, l, task.X_train, task.y_train)
        reg = reg_value_grad_hess(self.spec, self.params, l)
        return g_theta.mean(axis=0) + reg.g_theta, g_gamma.mean(axis=0) + reg.g_gamma

    def task_parameter_derivative(self, l: int):
        """``(d theta_hat_k / d st_l for all k, d gamma_hat / d st_l)``.

        Only the ``l != k`` case has a closed display in the derivation; the
        ``l == k`` entry follows from the same ``-H^{-1} load`` with both the
        theta_l and gamma blocks of the load nonzero, which adds the
        ``-H_ll^{-1} a_l`` term exactly as in the instance-level within-task case.
        """
        a, b = self.task_load(l)
        d_gamma = self._shared(l, a, b)
        d_thetas = []
        for k in range(self.K):
            d = -self.fac.coupling[k] @ d_gamma
            if k == l:
                d = d - self.fac.solve_task(l, a)
            d_thetas.append(d)
        return d_thetas, d_gamma

    def task_score(self, l: int, k: int) -> float:
        self._check_task(k)
        v = self.validation_loss(k)
        d_thetas, d_gamma = self.task_parameter_derivative(l)
        return float(v.grad_theta @ d_thetas[k] + v.grad_gamma @ d_gamma)

    def task_scores(self, targets: Sequence[int] | None = None) -> TaskAffinity:
        """Full ``K x K`` matrix; entries for targets not requested are zero."""
        targets = range(self.K) if targets is None else targets
        out = np.zeros((self.K, self.K))
        derivs = [self.task_parameter_derivative(l) for l in range(self.K)]
        for k in targets:
            v = self.validation_loss(k)
            for l, (d_thetas, d_gamma) in enumerate(derivs):
                out[l, k] = v.grad_theta @ d_thetas[k] + v.grad_gamma @ d_gamma
        return TaskAffinity(out, "mtif", {"model": self.params.fingerprint()})


def mtif_instance(i: int, l: int, k: int, model: MultitaskInfluence) -> float:
    return model.instance_score(i, l, k)


def mtif_all(model: MultitaskInfluence, targets: Sequence[int] | None = None) -> InfluenceMatrix:
    return model.scores(targets)


def mtif_task(l: int, k: int, model: MultitaskInfluence) -> float:
    return model.task_score(l, k)


def check_same_index(mats: Sequence[InfluenceMatrix]) -> None:
    if not mats:
        raise IndexMismatch("no influence matrices given")
    for m in mats[1:]:
        if not m.same_index(mats[0]):
            raise IndexMismatch("influence matrices cover different (source, target) index sets")

