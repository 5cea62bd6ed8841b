"""Block-structured symmetric linear algebra for soft-sharing multitask Hessians.

The joint Hessian of a soft-sharing objective has an arrowhead layout::

    [ H_11            H_1s ]
    [       ...       ...  ]
    [            H_KK H_Ks ]
    [ H_s1  ...  H_sK H_ss ]

with zero task-task blocks. Everything here works on the stored blocks
through Cholesky factors; dense matrices are only built by
:func:`assemble_dense`, which exists for tests and small instances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import BlockNotPD, DimMismatch, NotPD, SchurNotPD

__all__ = [
    "BlockHessian",
    "BlockInverse",
    "BlockFactorization",
    "assemble_dense",
    "schur_complement",
    "solve_spd",
    "block_inverse",
    "symmetrize",
]


def symmetrize(m: NDArray) -> NDArray:
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def _cholesky(m: NDArray):
    c, lower = cho_factor(m, lower=True, check_finite=True)
    # potrf only rejects non-positive pivots; a rounding-level pivot on a
    # singular PSD matrix must fail too
    diag = np.diag(c)
    if diag.min() <= 1e-15 * diag.max():
        raise LinAlgError("matrix is numerically singular")
    return c, lower


@dataclass(frozen=True, eq=False)
class BlockHessian:
    """Stored blocks of an arrowhead-structured symmetric matrix.

    ``diag[k]`` is ``H_kk`` (d_k x d_k), ``cross[k]`` is ``H_{k,s}`` (d_k x p)
    and ``shared`` is ``H_ss`` (p x p). Diagonal blocks are symmetrized on
    construction.
    """

    diag: tuple
    cross: tuple
    shared: NDArray

    def __init__(self, diag: Sequence[NDArray], cross: Sequence[NDArray], shared: NDArray):
        diag = tuple(symmetrize(np.atleast_2d(h)) for h in diag)
        cross = tuple(np.asarray(c, dtype=float).reshape(len(h), -1) for h, c in zip(diag, cross))
        shared = symmetrize(np.atleast_2d(shared))
        if len(diag) == 0 or len(diag) != len(cross):
            raise DimMismatch("need one cross block per diagonal block and at least one task")
        p = shared.shape[0]
        for k, (h, c) in enumerate(zip(diag, cross)):
            if h.shape[0] != h.shape[1] or c.shape != (h.shape[0], p):
                raise DimMismatch(f"block {k}: H_kk {h.shape}, H_ks {c.shape}, p={p}")
        object.__setattr__(self, "diag", diag)
        object.__setattr__(self, "cross", cross)
        object.__setattr__(self, "shared", shared)

    @property
    def K(self) -> int:
        return len(self.diag)

    @property
    def dims(self) -> tuple:
        return tuple(h.shape[0] for h in self.diag) + (self.shared.shape[0],)

    def damped(self, damping: float) -> "BlockHessian":
        """Copy with ``damping`` added to every diagonal entry."""
        if damping == 0:
            return self
        return BlockHessian(
            [h + damping * np.eye(len(h)) for h in self.diag],
            self.cross,
            self.shared + damping * np.eye(len(self.shared)),
        )


def assemble_dense(bh: BlockHessian) -> NDArray:
    dims = bh.dims
    offsets = np.concatenate([[0], np.cumsum(dims)])
    full = np.zeros((offsets[-1], offsets[-1]))
    s = slice(offsets[-2], offsets[-1])
    for k in range(bh.K):
        b = slice(offsets[k], offsets[k + 1])
        full[b, b] = bh.diag[k]
        full[b, s] = bh.cross[k]
        full[s, b] = bh.cross[k].T
    full[s, s] = bh.shared
    return symmetrize(full)


def solve_spd(m: NDArray, rhs: NDArray) -> NDArray:
    """Solve ``m @ x = rhs`` for symmetric positive definite ``m``."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != m.shape[0]:
        raise DimMismatch(f"matrix is {m.shape}, rhs has {rhs.shape[0]} rows")
    try:
        factor = _cholesky(symmetrize(m))
    except LinAlgError as exc:
        raise NotPD(str(exc)) from exc
    return cho_solve(factor, rhs)


class BlockFactorization:
    """Cholesky factors of every ``H_kk`` and of the Schur complement ``N``.

    Built once per Hessian and then shared read-only; all solves with the
    full matrix go through block elimination.
    """

    def __init__(self, bh: BlockHessian):
        self.bh = bh
        self._diag_factors = []
        self.coupling = []  # H_kk^{-1} H_ks
        for k, (h, c) in enumerate(zip(bh.diag, bh.cross)):
            try:
                f = _cholesky(h)
            except LinAlgError:
                raise BlockNotPD(k) from None
            self._diag_factors.append(f)
            self.coupling.append(cho_solve(f, c))
        n = bh.shared.copy()
        for c, hc in zip(bh.cross, self.coupling):
            n -= c.T @ hc
        self.schur = symmetrize(n)
        try:
            self._schur_factor = _cholesky(self.schur)
        except LinAlgError:
            raise SchurNotPD() from None

    @property
    def K(self) -> int:
        return self.bh.K

    def solve_task(self, k: int, rhs: NDArray) -> NDArray:
        return cho_solve(self._diag_factors[k], rhs)

    def solve_schur(self, rhs: NDArray) -> NDArray:
        return cho_solve(self._schur_factor, rhs)

    def solve(self, task_rhs: Sequence[NDArray], shared_rhs: NDArray):
        """Apply the full inverse to a block right-hand side.

        Returns ``(task_solutions, shared_solution)``. Each block may be a
        vector or a matrix with matching column count.
        """
        reduced = np.array(shared_rhs, dtype=float)
        for c, b in zip(self.coupling, task_rhs):
            reduced = reduced - c.T @ b
        x_shared = self.solve_schur(reduced)
        x_tasks = [self.solve_task(k, b) - self.coupling[k] @ x_shared for k, b in enumerate(task_rhs)]
        return x_tasks, x_shared


def schur_complement(bh: BlockHessian) -> NDArray:
    """``N = H_ss - sum_k H_sk H_kk^{-1} H_ks``; raises if it is not PD."""
    return BlockFactorization(bh).schur


@dataclass(frozen=True, eq=False)
class BlockInverse:
    tasks: tuple  # tasks[k][l] is [H^{-1}]_{k,l}
    task_shared: tuple  # [H^{-1}]_{k,s}
    shared: NDArray  # [H^{-1}]_{s,s} = N^{-1}


def block_inverse(bh: BlockHessian) -> BlockInverse:
    """Analytical inverse blocks of an arrowhead Hessian.

    [H^-1]_{kl} = 1(k=l) H_kk^-1 + C_k N^-1 C_l^T,  [H^-1]_{ks} = -C_k N^-1,
    [H^-1]_{ss} = N^-1, with C_k = H_kk^-1 H_ks.
    """
    fac = BlockFactorization(bh)
    p = bh.shared.shape[0]
    n_inv = fac.solve_schur(np.eye(p))
    task_shared = tuple(-c @ n_inv for c in fac.coupling)
    tasks = []
    for k in range(bh.K):
        row = []
        for l in range(bh.K):
            blk = -task_shared[k] @ fac.coupling[l].T
            if k == l:
                blk = blk + fac.solve_task(k, np.eye(bh.dims[k]))
            row.append(blk)
        tasks.append(tuple(row))
    return BlockInverse(tuple(tasks), task_shared, n_inv)
