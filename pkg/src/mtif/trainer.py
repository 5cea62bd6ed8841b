"""Fitting the weighted soft-sharing objective with block-structured Newton steps."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .data import MtlDataset
from .errors import (
    DimMismatch,
    EmptySplit,
    InvalidConfig,
    NotConverged,
    NotPD,
    SingularSystem,
)
from .linalg import BlockFactorization, BlockHessian
from .models import ModelSpec, MtlParams, objective, reg_value_grad_hess, task_loss_terms

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    grad_tol: float = 1e-10
    max_iter: int = 200
    damping: float = 0.0
    damping_steps: int = 10  # retry ladder 1e-8 * 10**j, j < damping_steps
    shrink: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 60

    def __post_init__(self):
        if not self.grad_tol > 0 or self.max_iter < 1:
            raise InvalidConfig("grad_tol must be positive and max_iter at least 1")
        if self.damping < 0 or not 0 < self.shrink < 1 or not 0 < self.armijo < 0.5:
            raise InvalidConfig("invalid damping or line-search parameters")


@dataclass(frozen=True, eq=False)
class FitResult:
    params: MtlParams
    iterations: int
    final_grad_norm: float
    converged: bool
    damping: float = 0.0
    history: tuple = ()  # objective value before each step and at the end

    @property
    def objective(self) -> float:
        return self.history[-1] if self.history else float("nan")


def _task_weights(dataset: MtlDataset, task_weights) -> NDArray:
    if task_weights is None:
        return np.ones(dataset.K)
    tw = np.asarray(task_weights, dtype=float)
    if tw.shape != (dataset.K,):
        raise DimMismatch(f"{tw.size} task weights for {dataset.K} tasks")
    if np.any(tw < 0) or not np.any(tw > 0):
        raise InvalidConfig("task weights must be nonnegative with at least one positive entry")
    return tw


def _check(spec: ModelSpec, dataset: MtlDataset, sigma) -> None:
    if dataset.K != spec.K or dataset.d != spec.d:
        raise DimMismatch(f"dataset is {dataset.K} tasks x d={dataset.d}, model is {spec.K} x d={spec.d}")
    if sigma is not None:
        if len(sigma) != dataset.K or any(len(s) != n for s, n in zip(sigma, dataset.n_train())):
            raise DimMismatch("sigma must hold one weight per training sample of every task")


def _block_terms(spec, params, dataset, sigma, tw, norms, with_hessian=True):
    """Per-task gradient/Hessian blocks of the weighted objective (scaled by task weight)."""
    g_tasks, h_diag, h_cross = [], [], []
    g_shared = np.zeros(spec.p)
    h_shared = np.zeros((spec.p, spec.p))
    for k, task in enumerate(dataset.tasks):
        if tw[k] == 0:
            g_tasks.append(np.zeros(spec.d))
            h_diag.append(np.zeros((spec.d, spec.d)))
            h_cross.append(np.zeros((spec.d, spec.p)))
            continue
        w = None if sigma is None else sigma[k]
        norm = None if norms is None else norms[k]
        lt = task_loss_terms(spec, params, k, task.X_train, task.y_train, w, norm)
        rt = reg_value_grad_hess(spec, params, k)
        g_tasks.append(tw[k] * (lt.g_theta + rt.g_theta))
        g_shared += tw[k] * (lt.g_gamma + rt.g_gamma)
        if with_hessian:
            h_diag.append(tw[k] * (lt.h_tt + rt.h_tt))
            h_cross.append(tw[k] * (lt.h_tg + rt.h_tg))
            h_shared += tw[k] * (lt.h_gg + rt.h_gg)
    return g_tasks, g_shared, h_diag, h_cross, h_shared


def joint_gradient(
    spec: ModelSpec,
    params: MtlParams,
    dataset: MtlDataset,
    sigma: Sequence[NDArray] | None = None,
    task_weights: Sequence[float] | None = None,
    norms: Sequence[float] | None = None,
) -> NDArray:
    """Flat gradient ``(theta_1, ..., theta_K, gamma)`` of the weighted objective."""
    _check(spec, dataset, sigma)
    params.check(spec)
    tw = _task_weights(dataset, task_weights)
    g_tasks, g_shared, *_ = _block_terms(spec, params, dataset, sigma, tw, norms, with_hessian=False)
    return np.concatenate([*g_tasks, g_shared])


def full_hessian(
    spec: ModelSpec,
    params: MtlParams,
    dataset: MtlDataset,
    sigma: Sequence[NDArray] | None = None,
    task_weights: Sequence[float] | None = None,
    norms: Sequence[float] | None = None,
) -> BlockHessian:
    """Block Hessian of the weighted objective; every loss term carries its 1/n_k."""
    _check(spec, dataset, sigma)
    params.check(spec)
    tw = _task_weights(dataset, task_weights)
    _, _, h_diag, h_cross, h_shared = _block_terms(spec, params, dataset, sigma, tw, norms)
    return BlockHessian(h_diag, h_cross, h_shared)


def _factorize(bh: BlockHessian, cfg: SolverConfig):
    ladder = [cfg.damping] + [max(cfg.damping, 1e-8 * 10**j) for j in range(cfg.damping_steps)]
    last = None
    for damping in ladder:
        try:
            return BlockFactorization(bh.damped(damping)), damping
        except NotPD as exc:
            last = exc
            logger.warning("Hessian factorization failed (%s); retrying with damping", exc)
    raise last


def _minimize(spec, dataset, sigma, tw, cfg, init, norms, context=""):
    _check(spec, dataset, sigma)
    active = [k for k in range(spec.K) if tw[k] != 0]
    for k in active:
        if dataset.tasks[k].n_train == 0:
            raise EmptySplit(f"task {k} has an empty training split")
        if spec.lambdas[k] == 0:
            raise SingularSystem(f"lambda_{k} = 0 leaves the shared parameters unidentified")
    params = MtlParams.zeros(spec) if init is None else init
    params.check(spec)

    def f(p):
        return objective(spec, p, dataset, sigma, tw, norms)

    value = f(params)
    history = [value]
    max_damping = 0.0
    gnorm = np.inf
    it = 0
    while True:
        g_tasks, g_shared, h_diag, h_cross, h_shared = _block_terms(spec, params, dataset, sigma, tw, norms)
        gnorm = max(max(np.max(np.abs(g_tasks[k])) for k in active), np.max(np.abs(g_shared), initial=0.0))
        if gnorm <= cfg.grad_tol or it >= cfg.max_iter:
            break
        bh = BlockHessian([h_diag[k] for k in active], [h_cross[k] for k in active], h_shared)
        fac, damping = _factorize(bh, cfg)
        max_damping = max(max_damping, damping)
        steps, step_shared = fac.solve([-g_tasks[k] for k in active], -g_shared)
        slope = sum(g_tasks[k] @ s for k, s in zip(active, steps)) + g_shared @ step_shared

        t = 1.0
        for _ in range(cfg.max_backtracks):
            thetas = list(params.thetas)
            for k, s in zip(active, steps):
                thetas[k] = params.thetas[k] + t * s
            trial = MtlParams(thetas, params.gamma + t * step_shared)
            trial_value = f(trial)
            # slack at rounding level so converged Newton steps are not rejected
            if trial_value <= value + cfg.armijo * t * slope + 1e-13 * abs(value):
                break
            t *= cfg.shrink
        params, value = trial, trial_value
        history.append(value)
        it += 1

    result = FitResult(params, it, float(gnorm), bool(gnorm <= cfg.grad_tol), max_damping, tuple(history))
    if not result.converged:
        raise NotConverged(result.final_grad_norm, it, context)
    return result


def fit(
    spec: ModelSpec,
    dataset: MtlDataset,
    sigma: Sequence[NDArray] | None = None,
    cfg: SolverConfig | None = None,
    init: MtlParams | None = None,
    norms: Sequence[float] | None = None,
) -> FitResult:
    """Minimize the sample-weighted objective.

    ``sigma`` holds per-task arrays of sample weights (default all ones);
    ``norms`` overrides the per-task 1/n_k denominators. For the ridge model
    a single Newton step from any start is the exact joint solve.
    """
    cfg = cfg or SolverConfig()
    return _minimize(spec, dataset, sigma, np.ones(dataset.K), cfg, init, norms)


def fit_task_weighted(
    spec: ModelSpec,
    dataset: MtlDataset,
    sigma_tilde: Sequence[float],
    cfg: SolverConfig | None = None,
    init: MtlParams | None = None,
) -> FitResult:
    """Minimize ``sum_j st_j [ mean loss_j + Omega_j ]``.

    Tasks with zero weight have no terms left in the objective; their
    parameters stay frozen at ``init`` (or zero) and are excluded from the
    Newton system.
    """
    cfg = cfg or SolverConfig()
    _check(spec, dataset, None)
    tw = _task_weights(dataset, sigma_tilde)
    return _minimize(spec, dataset, None, tw, cfg, init, None)
