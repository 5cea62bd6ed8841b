import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtif.errors import BlockNotPD, DimMismatch, NotPD, SchurNotPD
from mtif.linalg import (
    BlockFactorization,
    BlockHessian,
    assemble_dense,
    block_inverse,
    schur_complement,
    solve_spd,
)

from conftest import random_block_hessian


def rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


instances = st.tuples(
    st.integers(1, 4),
    st.lists(st.integers(1, 6), min_size=4, max_size=4),
    st.integers(1, 5),
    st.integers(0, 2**32 - 1),
)


class TestBlockHessian:
    def test_assembly_is_symmetric(self):
        bh = random_block_hessian(np.random.default_rng(0), 3, [2, 3, 4], 2)
        full = assemble_dense(bh)
        assert np.abs(full - full.T).max() <= 1e-12

    def test_diagonal_blocks_symmetrized(self):
        h = np.array([[2.0, 1.0], [0.0, 2.0]])
        bh = BlockHessian([h], [np.zeros((2, 1))], np.eye(1))
        np.testing.assert_allclose(bh.diag[0], [[2.0, 0.5], [0.5, 2.0]])

    def test_task_task_blocks_are_zero(self):
        bh = random_block_hessian(np.random.default_rng(1), 2, [2, 3], 2)
        full = assemble_dense(bh)
        assert np.all(full[:2, 2:5] == 0)

    def test_cross_shape_mismatch(self):
        with pytest.raises(DimMismatch):
            BlockHessian([np.eye(2)], [np.zeros((2, 3))], np.eye(2))

    def test_cross_count_mismatch(self):
        with pytest.raises(DimMismatch):
            BlockHessian([np.eye(2), np.eye(2)], [np.zeros((2, 2))], np.eye(2))

    def test_damped_adds_to_diagonal(self):
        bh = random_block_hessian(np.random.default_rng(2), 2, [2, 2], 2)
        np.testing.assert_allclose(assemble_dense(bh.damped(0.5)), assemble_dense(bh) + 0.5 * np.eye(6))


class TestSolveSpd:
    def test_residual(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((6, 6))
        m = a @ a.T + np.eye(6)
        rhs = rng.standard_normal((6, 3))
        x = solve_spd(m, rhs)
        assert np.linalg.norm(m @ x - rhs) <= 1e-9 * np.linalg.norm(rhs)

    def test_double_solve_round_trip(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((5, 5))
        m = a @ a.T + np.eye(5)
        rhs = rng.standard_normal(5)
        back = m @ (m @ solve_spd(m, solve_spd(m, rhs)))
        assert np.linalg.norm(back - rhs) <= 1e-8 * np.linalg.norm(rhs)

    def test_indefinite_raises(self):
        with pytest.raises(NotPD):
            solve_spd(np.diag([1.0, -1.0]), np.ones(2))

    def test_singular_psd_raises(self):
        with pytest.raises(NotPD):
            solve_spd(np.ones((3, 3)), np.ones(3))

    def test_rhs_mismatch(self):
        with pytest.raises(DimMismatch):
            solve_spd(np.eye(3), np.ones(2))


class TestSchur:
    def test_matches_dense_formula(self):
        bh = random_block_hessian(np.random.default_rng(5), 3, [2, 3, 4], 3)
        expected = bh.shared - sum(c.T @ np.linalg.inv(h) @ c for h, c in zip(bh.diag, bh.cross))
        n = schur_complement(bh)
        assert rel_fro(n, expected) <= 1e-12
        assert np.abs(n - n.T).max() <= 1e-10
        assert np.all(np.linalg.eigvalsh(n) > 0)

    def test_matches_inverse_of_dense_shared_block(self):
        bh = random_block_hessian(np.random.default_rng(6), 2, [3, 3], 2)
        inv = np.linalg.inv(assemble_dense(bh))
        assert rel_fro(np.linalg.inv(schur_complement(bh)), inv[-2:, -2:]) <= 1e-10

    def test_block_not_pd_reports_index(self):
        bh = random_block_hessian(np.random.default_rng(7), 3, [2, 2, 2], 2)
        diag = list(bh.diag)
        diag[1] = -np.eye(2)
        with pytest.raises(BlockNotPD) as info:
            BlockFactorization(BlockHessian(diag, bh.cross, bh.shared))
        assert info.value.block == 1

    def test_schur_not_pd(self):
        # H_kk = I, H_ks = I, H_ss = I gives N = 0
        bh = BlockHessian([np.eye(2)], [np.eye(2)], np.eye(2))
        with pytest.raises(SchurNotPD):
            BlockFactorization(bh)


class TestBlockInverse:
    @settings(max_examples=30, deadline=None)
    @given(instances)
    def test_matches_dense_inverse(self, inst):
        K, dims, p, seed = inst
        bh = random_block_hessian(np.random.default_rng(seed), K, dims, p)
        inv = np.linalg.inv(assemble_dense(bh))
        bi = block_inverse(bh)
        off = np.concatenate([[0], np.cumsum(bh.dims)])
        s = slice(off[-2], off[-1])
        for k in range(K):
            bk = slice(off[k], off[k + 1])
            assert rel_fro(bi.task_shared[k], inv[bk, s]) <= 1e-10
            for l in range(K):
                assert rel_fro(bi.tasks[k][l], inv[bk, off[l] : off[l + 1]]) <= 1e-10
        assert rel_fro(bi.shared, inv[s, s]) <= 1e-10

    def test_task_shared_block_sign(self):
        # one scalar task: H = [[a, c], [c, b]] so [H^-1]_ks = -c / det
        a, c, b = 2.0, 0.5, 3.0
        bi = block_inverse(BlockHessian([[[a]]], [[[c]]], [[b]]))
        assert bi.task_shared[0][0, 0] == pytest.approx(-c / (a * b - c * c), rel=1e-14)

    @settings(max_examples=25, deadline=None)
    @given(instances)
    def test_block_solve_matches_dense(self, inst):
        K, dims, p, seed = inst
        rng = np.random.default_rng(seed)
        bh = random_block_hessian(rng, K, dims, p)
        rhs = rng.standard_normal(sum(bh.dims))
        off = np.concatenate([[0], np.cumsum(bh.dims)])
        xt, xs = BlockFactorization(bh).solve([rhs[off[k] : off[k + 1]] for k in range(K)], rhs[off[-2] :])
        x = np.concatenate([*xt, xs])
        np.testing.assert_allclose(x, np.linalg.solve(assemble_dense(bh), rhs), rtol=1e-9, atol=1e-11)

    def test_matrix_rhs(self):
        rng = np.random.default_rng(8)
        bh = random_block_hessian(rng, 2, [2, 3], 2)
        fac = BlockFactorization(bh)
        cols = [rng.standard_normal((2, 4)), rng.standard_normal((3, 4))]
        shared = rng.standard_normal((2, 4))
        xt, xs = fac.solve(cols, shared)
        for j in range(4):
            vt, vs = fac.solve([c[:, j] for c in cols], shared[:, j])
            np.testing.assert_allclose(xs[:, j], vs, rtol=1e-12)
            np.testing.assert_allclose(xt[1][:, j], vt[1], rtol=1e-12)
