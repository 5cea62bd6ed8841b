"""Soft-sharing multitask models: per-sample losses, derivatives and the coupling penalty.

Both concrete models are generalized linear in the task parameters, so the
per-sample loss is a scalar function of the margin ``x @ theta_k`` and the
shared vector ``gamma`` only enters through ``lam_k * ||theta_k - gamma||^2``.
The derivative API still returns gamma blocks so that a model whose loss
touches ``gamma`` can be slotted in.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import TYPE_CHECKING, NamedTuple, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import DimMismatch, InvalidConfig

if TYPE_CHECKING:
    from .data import MtlDataset

KINDS = ("ridge_linear", "soft_logistic")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    lambdas: tuple
    d: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfig(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        lambdas = tuple(float(v) for v in self.lambdas)
        if not lambdas:
            raise InvalidConfig("need at least one task")
        if any(not np.isfinite(v) or v < 0 for v in lambdas):
            raise InvalidConfig(f"lambdas must be finite and nonnegative, got {lambdas}")
        if int(self.d) < 1:
            raise InvalidConfig("feature dimension must be positive")
        object.__setattr__(self, "lambdas", lambdas)
        object.__setattr__(self, "d", int(self.d))

    @classmethod
    def uniform(cls, kind: str, K: int, d: int, lam: float = 1.0) -> "ModelSpec":
        return cls(kind, (lam,) * K, d)

    @property
    def K(self) -> int:
        return len(self.lambdas)

    @property
    def p(self) -> int:
        return self.d

    @property
    def dims(self) -> tuple:
        return (self.d,) * self.K + (self.p,)

    @property
    def is_classifier(self) -> bool:
        return self.kind == "soft_logistic"


@dataclass(frozen=True, eq=False)
class MtlParams:
    """Task-specific vectors ``thetas[k]`` plus the shared vector ``gamma``."""

    thetas: tuple
    gamma: NDArray

    def __post_init__(self):
        object.__setattr__(self, "thetas", tuple(np.asarray(t, dtype=float).ravel() for t in self.thetas))
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float).ravel())
        if not self.thetas:
            raise DimMismatch("need at least one task vector")

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "MtlParams":
        return cls([np.zeros(spec.d) for _ in range(spec.K)], np.zeros(spec.p))

    @classmethod
    def from_flat(cls, w: NDArray, dims: Sequence[int]) -> "MtlParams":
        w = np.asarray(w, dtype=float)
        offsets = np.concatenate([[0], np.cumsum(dims)])
        if offsets[-1] != w.size:
            raise DimMismatch(f"flat vector has {w.size} entries, dims sum to {offsets[-1]}")
        blocks = [w[offsets[i] : offsets[i + 1]].copy() for i in range(len(dims))]
        return cls(blocks[:-1], blocks[-1])

    @property
    def K(self) -> int:
        return len(self.thetas)

    def flat(self) -> NDArray:
        return np.concatenate([*self.thetas, self.gamma])

    def check(self, spec: ModelSpec) -> None:
        if self.K != spec.K or any(t.size != spec.d for t in self.thetas) or self.gamma.size != spec.p:
            raise DimMismatch(
                f"params have dims {[t.size for t in self.thetas]}+{self.gamma.size}, "
                f"model expects {spec.K} x {spec.d} + {spec.p}"
            )

    def fingerprint(self) -> str:
        return hashlib.sha256(self.flat().tobytes()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Sample:
    x: NDArray
    y: float

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        if not np.all(np.isfinite(x)) or not np.isfinite(self.y):
            raise ValueError("sample contains NaN or Inf")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", float(self.y))


# Margin-space loss and its first two derivatives, vectorized over samples.


def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def margin_loss(kind: str, z, y):
    if kind == "ridge_linear":
        return (y - z) ** 2
    # -[y log s + (1 - y) log(1 - s)] written without log(0)
    return np.logaddexp(0.0, z) - y * z


def margin_dloss(kind: str, z, y):
    if kind == "ridge_linear":
        return 2.0 * (z - y)
    return sigmoid(z) - y


def margin_d2loss(kind: str, z, y):
    if kind == "ridge_linear":
        return np.full_like(np.asarray(z, dtype=float), 2.0)
    s = sigmoid(z)
    return s * (1.0 - s)


def _check_sample(spec: ModelSpec, params: MtlParams, k: int, x: NDArray) -> None:
    params.check(spec)
    if not 0 <= k < spec.K:
        raise DimMismatch(f"task index {k} out of range for K={spec.K}")
    if x.shape[-1] != spec.d:
        raise DimMismatch(f"feature vector has length {x.shape[-1]}, model expects {spec.d}")


def sample_loss(spec: ModelSpec, params: MtlParams, k: int, z: Sample) -> float:
    _check_sample(spec, params, k, z.x)
    return float(margin_loss(spec.kind, z.x @ params.thetas[k], z.y))


def sample_grad(spec: ModelSpec, params: MtlParams, k: int, z: Sample):
    """Gradient of one sample's loss as ``(g_theta, g_gamma)``."""
    _check_sample(spec, params, k, z.x)
    g = margin_dloss(spec.kind, z.x @ params.thetas[k], z.y)
    return g * z.x, np.zeros(spec.p)


def sample_hessian_blocks(spec: ModelSpec, params: MtlParams, k: int, z: Sample):
    _check_sample(spec, params, k, z.x)
    c = float(margin_d2loss(spec.kind, z.x @ params.thetas[k], z.y))
    return c * np.outer(z.x, z.x), np.zeros((spec.d, spec.p)), np.zeros((spec.p, spec.p))


class RegTerms(NamedTuple):
    value: float
    g_theta: NDArray
    g_gamma: NDArray
    h_tt: NDArray
    h_tg: NDArray
    h_gg: NDArray


def reg_value_grad_hess(spec: ModelSpec, params: MtlParams, k: int) -> RegTerms:
    """Coupling penalty ``lam_k ||theta_k - gamma||^2`` with its derivatives."""
    lam = spec.lambdas[k]
    diff = params.thetas[k] - params.gamma
    eye = np.eye(spec.d)
    return RegTerms(
        float(lam * diff @ diff),
        2 * lam * diff,
        -2 * lam * diff,
        2 * lam * eye,
        -2 * lam * eye,
        2 * lam * eye,
    )


class TaskTerms(NamedTuple):
    value: float
    g_theta: NDArray
    g_gamma: NDArray
    h_tt: NDArray
    h_tg: NDArray
    h_gg: NDArray


def per_sample_losses(spec: ModelSpec, params: MtlParams, k: int, X: NDArray, y: NDArray) -> NDArray:
    return margin_loss(spec.kind, X @ params.thetas[k], y)


def per_sample_grads(spec: ModelSpec, params: MtlParams, k: int, X: NDArray, y: NDArray):
    """Row-stacked per-sample gradients ``(G_theta (n, d), G_gamma (n, p))``."""
    g = margin_dloss(spec.kind, X @ params.thetas[k], y)
    return g[:, None] * X, np.zeros((len(y), spec.p))


def task_loss_terms(
    spec: ModelSpec,
    params: MtlParams,
    k: int,
    X: NDArray,
    y: NDArray,
    weights: NDArray | None = None,
    norm: float | None = None,
) -> TaskTerms:
    """Weighted empirical loss ``(1/norm) sum_i w_i l_ki`` and its derivatives.

    ``norm`` defaults to the number of rows; zeroing a weight does not change it.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = len(y)
    if X.shape != (n, spec.d):
        raise DimMismatch(f"task {k}: features {X.shape}, labels {n}, d={spec.d}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise DimMismatch(f"task {k}: {w.shape[0]} weights for {n} samples")
    scale = 1.0 / (n if norm is None else norm)
    z = X @ params.thetas[k]
    value = scale * float(w @ margin_loss(spec.kind, z, y))
    g_theta = scale * X.T @ (w * margin_dloss(spec.kind, z, y))
    h_tt = scale * (X.T * (w * margin_d2loss(spec.kind, z, y))) @ X
    return TaskTerms(
        value,
        g_theta,
        np.zeros(spec.p),
        h_tt,
        np.zeros((spec.d, spec.p)),
        np.zeros((spec.p, spec.p)),
    )


def objective(
    spec: ModelSpec,
    params: MtlParams,
    dataset: "MtlDataset",
    sigma: Sequence[NDArray] | None = None,
    task_weights: Sequence[float] | None = None,
    norms: Sequence[float] | None = None,
) -> float:
    """Sample- and task-weighted training objective.

    ``sum_k tw_k [ (1/n_k) sum_i sigma_ki l_ki + Omega_k ]`` where ``sigma``
    is a list of per-task weight arrays and ``tw`` the task weights (the
    penalty is scaled by the task weight but not by sigma).
    """
    params.check(spec)
    if dataset.K != spec.K:
        raise DimMismatch(f"dataset has {dataset.K} tasks, model expects {spec.K}")
    total = 0.0
    for k, task in enumerate(dataset.tasks):
        tw = 1.0 if task_weights is None else float(task_weights[k])
        if tw == 0:
            continue
        w = None if sigma is None else sigma[k]
        norm = None if norms is None else norms[k]
        loss = task_loss_terms(spec, params, k, task.X_train, task.y_train, w, norm).value
        total += tw * (loss + reg_value_grad_hess(spec, params, k).value)
    return total
