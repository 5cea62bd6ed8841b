"""Scaling tricks for influence scores: gradient sketching, bootstrap ensembles
and soft-thresholding.

Convex fits are deterministic, so the ensemble axis is bootstrap resampling
of each task's training split rather than optimizer randomness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .data import MtlDataset, TaskData
from .errors import DimMismatch, InvalidConfig
from .influence import InfluenceMatrix, MultitaskInfluence, check_same_index
from .models import ModelSpec
from .trainer import SolverConfig, fit


@dataclass(frozen=True)
class SketchConfig:
    sketch_dim: int = 64
    seed: int = 0
    ensembles: int = 1
    tau: float | None = None  # None: median absolute score

    def __post_init__(self):
        if self.sketch_dim < 1 or self.ensembles < 1:
            raise InvalidConfig("sketch_dim and ensembles must be at least 1")
        if self.tau is not None and self.tau < 0:
            raise InvalidConfig("tau must be nonnegative")


def projection_matrix(D: int, cfg: SketchConfig) -> NDArray:
    """``(m, D)`` Gaussian matrix with N(0, 1/m) entries, fixed by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    return rng.standard_normal((cfg.sketch_dim, D)) / np.sqrt(cfg.sketch_dim)


def project_gradients(grads: Sequence[NDArray], cfg: SketchConfig, identity: bool = False) -> list[NDArray]:
    """Sketch every vector with the same projection.

    ``identity=True`` substitutes the identity for the random matrix and
    requires ``sketch_dim`` to equal the input length.
    """
    vecs = [np.asarray(g, dtype=float).ravel() for g in grads]
    if not vecs:
        return []
    D = vecs[0].size
    if any(v.size != D for v in vecs):
        raise DimMismatch("all gradients must have the same length")
    if identity:
        if cfg.sketch_dim != D:
            raise DimMismatch(f"identity projection needs sketch_dim == {D}")
        return [v.copy() for v in vecs]
    P = projection_matrix(D, cfg)
    return [P @ v for v in vecs]


def ensemble_scores(mats: Sequence[InfluenceMatrix]) -> InfluenceMatrix:
    """Entrywise mean of matrices over the same (source, target) index set."""
    check_same_index(mats)
    blocks = [np.mean([m.scores[l] for m in mats], axis=0) for l in range(len(mats[0].scores))]
    return mats[0].with_scores(blocks, ensemble=len(mats))


def soft_threshold(im: InfluenceMatrix, tau: float | None = None) -> InfluenceMatrix:
    """``s -> sign(s) max(|s| - tau, 0)``; ``tau`` defaults to the median absolute score."""
    if tau is None:
        flat = np.concatenate([s.ravel() for s in im.scores]) if im.scores else np.zeros(0)
        tau = float(np.median(np.abs(flat))) if flat.size else 0.0
    if tau < 0:
        raise InvalidConfig("tau must be nonnegative")
    blocks = [np.sign(s) * np.maximum(np.abs(s) - tau, 0.0) for s in im.scores]
    return im.with_scores(blocks, tau=tau)


def sketched_scores(
    model: MultitaskInfluence,
    cfg: SketchConfig,
    targets: Sequence[int] | None = None,
    identity: bool = False,
) -> InfluenceMatrix:
    """Scores with the final contraction taken in sketch space.

    Parameter derivatives come from the exact factorized solves; only the
    inner product with the validation gradient is replaced by
    ``(P v_k) . (P dw)``.
    """
    targets = tuple(range(model.K)) if targets is None else tuple(targets)
    D = sum(model.spec.dims)
    if identity:
        if cfg.sketch_dim != D:
            raise DimMismatch(f"identity projection needs sketch_dim == {D}")
        P = np.eye(D)
    else:
        P = projection_matrix(D, cfg)
    pv = np.stack([P @ model.validation_gradient(k) for k in targets], axis=1)
    blocks = [(P @ model.parameter_derivatives(l)).T @ pv for l in range(model.K)]
    return InfluenceMatrix(tuple(blocks), targets, {"sketch_dim": cfg.sketch_dim, "seed": cfg.seed})


def bootstrap_dataset(dataset: MtlDataset, rng: np.random.Generator) -> MtlDataset:
    """Resample each task's training rows with replacement; val/test stay fixed."""
    tasks = []
    for t in dataset.tasks:
        idx = rng.integers(0, t.n_train, size=t.n_train)
        tasks.append(TaskData(t.X_train[idx], t.y_train[idx], t.X_val, t.y_val, t.X_test, t.y_test))
    return MtlDataset(tuple(tasks), dataset.names, {**dataset.provenance, "bootstrap": True})


def bootstrap_ensemble(
    spec: ModelSpec,
    dataset: MtlDataset,
    cfg: SketchConfig,
    solver: SolverConfig | None = None,
    targets: Sequence[int] | None = None,
) -> InfluenceMatrix:
    """Average the original training points' scores over ``cfg.ensembles`` bootstrap fits."""
    solver = solver or SolverConfig()
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.ensembles)
    sources = [(t.X_train, t.y_train) for t in dataset.tasks]
    mats = []
    for ss in seeds:
        boot = bootstrap_dataset(dataset, np.random.default_rng(ss))
        model = MultitaskInfluence(spec, boot, fit(spec, boot, cfg=solver))
        mats.append(model.scores(targets, sources=sources))
    return ensemble_scores(mats)
