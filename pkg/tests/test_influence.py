import numpy as np
import pytest

from mtif.data import MtlDataset, SyntheticConfig, TaskData, generate_synthetic
from mtif.errors import DampedHessian, EmptySplit, IndexMismatch, SameTask
from mtif.influence import (
    InfluenceMatrix,
    MultitaskInfluence,
    check_same_index,
    mtif_all,
    mtif_instance,
    mtif_task,
    validation_loss,
)
from mtif.models import ModelSpec, MtlParams, reg_value_grad_hess, sample_loss
from mtif.oracle import fd_task_derivative
from mtif.trainer import FitResult, fit

from conftest import dense_influence


def perturbed_fit(spec, ds, base, l, i, s):
    sigma = ds.ones()
    sigma[l][i] = s
    return fit(spec, ds, sigma, init=base.params).params


def fd_params(spec, ds, base, l, i, h=1e-5):
    plus = perturbed_fit(spec, ds, base, l, i, 1 + h)
    minus = perturbed_fit(spec, ds, base, l, i, 1 - h)
    return [(a - b) / (2 * h) for a, b in zip(plus.thetas, minus.thetas)], (plus.gamma - minus.gamma) / (2 * h)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


@pytest.fixture(scope="module")
def k2_toy():
    ds = generate_synthetic(SyntheticConfig(K=2, n=15, d=2, seed=11))
    spec = ModelSpec.uniform("ridge_linear", 2, 2)
    res = fit(spec, ds)
    return spec, ds, res, MultitaskInfluence(spec, ds, res)


class TestValidationLoss:
    def test_mean_of_sample_losses(self, ridge_toy):
        spec, ds, res = ridge_toy
        v = validation_loss(spec, res.params, 1, ds)
        expected = np.mean([sample_loss(spec, res.params, 1, z) for z in ds.tasks[1].samples("val")])
        assert v.value == pytest.approx(expected, rel=1e-13)
        assert np.all(v.grad_gamma == 0)

    def test_gradient_matches_finite_differences(self, logistic_toy):
        spec, ds, res = logistic_toy
        v = validation_loss(spec, res.params, 2, ds)
        fd = np.zeros(spec.d)
        for j in range(spec.d):
            e = np.zeros(spec.d)
            e[j] = 1e-6
            th = list(res.params.thetas)
            th[2] = res.params.thetas[2] + e
            up = validation_loss(spec, MtlParams(th, res.params.gamma), 2, ds).value
            th[2] = res.params.thetas[2] - e
            dn = validation_loss(spec, MtlParams(th, res.params.gamma), 2, ds).value
            fd[j] = (up - dn) / 2e-6
        assert rel_err(v.grad_theta, fd) <= 1e-5

    def test_perfect_fit_is_zero(self):
        theta = np.array([1.0, 2.0])
        X = np.eye(2)
        t = TaskData(X, X @ theta, X, X @ theta, X, X @ theta)
        spec = ModelSpec.uniform("ridge_linear", 1, 2)
        v = validation_loss(spec, MtlParams([theta], theta), 0, MtlDataset((t,)))
        assert v.value == 0 and np.all(v.grad_theta == 0)

    def test_empty_split(self, ridge_toy):
        spec, ds, res = ridge_toy
        t = ds.tasks[0]
        empty = ds.replace_task(0, TaskData(t.X_train, t.y_train, np.zeros((0, 4)), [], t.X_test, t.y_test))
        with pytest.raises(EmptySplit):
            validation_loss(spec, res.params, 0, empty)


class TestParameterInfluence:
    def test_shared_matches_finite_difference(self, k2_toy):
        spec, ds, res, m = k2_toy
        for l, i in [(0, 1), (1, 3)]:
            _, fd_gamma = fd_params(spec, ds, res, l, i)
            assert rel_err(m.shared_param_influence(l, i), fd_gamma) <= 1e-3

    def test_within_matches_finite_difference(self, k2_toy):
        spec, ds, res, m = k2_toy
        fd_thetas, _ = fd_params(spec, ds, res, 1, 2)
        assert rel_err(m.within_task_influence(1, 2), fd_thetas[1]) <= 1e-3

    def test_between_matches_finite_difference(self, k2_toy):
        spec, ds, res, m = k2_toy
        fd_thetas, _ = fd_params(spec, ds, res, 0, 4)
        assert rel_err(m.between_task_influence(0, 4, 1), fd_thetas[1]) <= 1e-3

    def test_between_same_task_raises(self, k2_toy):
        *_, m = k2_toy
        with pytest.raises(SameTask):
            m.between_task_influence(1, 0, 1)

    def test_stationary_sample_has_zero_influence(self):
        # the extra point sits exactly on the fitted line, so its gradient vanishes
        ds = generate_synthetic(SyntheticConfig(K=2, n=15, d=2, seed=2))
        spec = ModelSpec.uniform("ridge_linear", 2, 2)
        theta = fit(spec, ds).params.thetas[0]
        x = np.array([0.3, -0.7])
        t = ds.tasks[0]
        model = MultitaskInfluence(spec, ds, fit(spec, ds))
        a, _ = model.sample_loads(0, X=x[None, :], y=np.array([x @ theta]))
        assert np.abs(a).max() <= 1e-14
        scores = model.scores(sources=[(x[None, :], np.array([x @ theta])), (t.X_train[:0], t.y_train[:0])])
        assert np.abs(scores.scores[0]).max() <= 1e-12

    def test_decoupled_limit_is_classical_influence(self, k2_toy):
        spec, ds, res, m = k2_toy
        a, _ = m.sample_loads(0, 3)
        classical = -np.linalg.solve(m.hessian.diag[0], a[:, 0])
        coupled = m.within_task_influence(0, 3)
        np.testing.assert_allclose(coupled + m.fac.coupling[0] @ m.shared_param_influence(0, 3), classical)

    def test_parameter_derivatives_stack_blocks(self, ridge_toy):
        spec, ds, res = ridge_toy
        m = MultitaskInfluence(spec, ds, res)
        dw = m.parameter_derivatives(1, [2])[:, 0]
        d = spec.d
        np.testing.assert_allclose(dw[d : 2 * d], m.within_task_influence(1, 2), rtol=1e-12)
        np.testing.assert_allclose(dw[:d], m.between_task_influence(1, 2, 0), rtol=1e-12)
        np.testing.assert_allclose(dw[3 * d :], m.shared_param_influence(1, 2), rtol=1e-12)


class TestInstanceScore:
    @pytest.mark.parametrize("fixture", ["ridge_toy", "logistic_toy"])
    def test_matches_dense_inverse(self, fixture, request):
        spec, ds, res = request.getfixturevalue(fixture)
        m = MultitaskInfluence(spec, ds, res)
        for l, i, k in [(0, 0, 0), (1, 3, 1), (2, 5, 0), (0, 2, 2)]:
            dense = dense_influence(m, i, l, k)
            assert m.instance_score(i, l, k) == pytest.approx(dense, rel=1e-9, abs=1e-15)

    def test_batched_scores_match_single(self, logistic_toy):
        spec, ds, res = logistic_toy
        m = MultitaskInfluence(spec, ds, res)
        im = mtif_all(m)
        for l, i, k in [(0, 0, 0), (1, 7, 2), (2, 3, 1)]:
            assert im.score(i, l, k) == pytest.approx(mtif_instance(i, l, k, m), rel=1e-10, abs=1e-15)

    def test_duplicate_samples_identical_rows(self):
        ds = generate_synthetic(SyntheticConfig(K=2, n=15, d=2, seed=4))
        t = ds.tasks[0]
        X = np.vstack([t.X_train, t.X_train[:1]])
        y = np.concatenate([t.y_train, t.y_train[:1]])
        ds = ds.replace_task(0, TaskData(X, y, t.X_val, t.y_val, t.X_test, t.y_test))
        spec = ModelSpec.uniform("ridge_linear", 2, 2)
        im = MultitaskInfluence(spec, ds, fit(spec, ds)).scores()
        np.testing.assert_array_equal(im.scores[0][0], im.scores[0][-1])

    def test_linear_in_validation_gradient(self, ridge_toy):
        spec, ds, res = ridge_toy
        m = MultitaskInfluence(spec, ds, res)
        base = m.scores([1]).scores[0][:, 0]
        v = m.validation_loss(1)
        m._vloss[1] = type(v)(v.task, 3 * v.value, 3 * v.grad_theta, 3 * v.grad_gamma, v.n, v.split)
        np.testing.assert_allclose(m.scores([1]).scores[0][:, 0], 3 * base, rtol=1e-12)

    def test_order_independent(self, ridge_toy):
        spec, ds, res = ridge_toy
        m = MultitaskInfluence(spec, ds, res)
        a = m.scores([2, 0])
        b = m.scores([0, 2])
        for l in range(3):
            np.testing.assert_array_equal(a.scores[l][:, [1, 0]], b.scores[l])

    def test_refuses_damped_fit(self, ridge_toy):
        spec, ds, res = ridge_toy
        damped = FitResult(res.params, res.iterations, res.final_grad_norm, True, damping=1e-6)
        with pytest.raises(DampedHessian):
            MultitaskInfluence(spec, ds, damped)
        MultitaskInfluence(spec, ds, damped, allow_damped=True)


class TestTaskScore:
    def test_theta_load_vanishes_at_optimum(self, logistic_toy):
        spec, ds, res = logistic_toy
        m = MultitaskInfluence(spec, ds, res)
        for l in range(3):
            a, _ = m.task_load(l)
            assert np.linalg.norm(a) <= 10 * 1e-10 * ds.tasks[l].n_train

    @pytest.mark.parametrize("fixture", ["ridge_toy", "logistic_toy"])
    def test_matches_task_weight_finite_difference(self, fixture, request):
        spec, ds, res = request.getfixturevalue(fixture)
        m = MultitaskInfluence(spec, ds, res)
        for l, k in [(0, 1), (2, 0), (1, 1)]:
            fd = fd_task_derivative(l, k, 1e-5, spec, ds, base=res)
            assert abs(mtif_task(l, k, m) - fd) <= 1e-3 * (abs(fd) + 1e-8)

    def test_additivity_up_to_regularizer(self, ridge_toy):
        spec, ds, res = ridge_toy
        m = MultitaskInfluence(spec, ds, res)
        im = m.scores()
        for l, k in [(0, 0), (1, 2)]:
            # the regularizer part of the task load, pushed through the same solves
            reg = reg_value_grad_hess(spec, res.params, l)
            d_gamma = m.fac.solve_schur(m.fac.coupling[l].T @ reg.g_theta - reg.g_gamma)
            d_theta = -m.fac.coupling[k] @ d_gamma
            if k == l:
                d_theta -= m.fac.solve_task(l, reg.g_theta)
            v = m.validation_loss(k)
            reg_part = v.grad_theta @ d_theta + v.grad_gamma @ d_gamma
            summed = im.scores[l][:, im.targets.index(k)].sum()
            assert m.task_score(l, k) == pytest.approx(summed + reg_part, rel=1e-9)

    def test_single_task_affinity_is_1x1(self):
        ds = generate_synthetic(SyntheticConfig(K=1, n=15, d=2, seed=0))
        spec = ModelSpec.uniform("ridge_linear", 1, 2)
        ta = MultitaskInfluence(spec, ds, fit(spec, ds)).task_scores()
        assert ta.scores.shape == (1, 1)

    def test_matrix_matches_pairwise(self, ridge_toy):
        spec, ds, res = ridge_toy
        m = MultitaskInfluence(spec, ds, res)
        ta = m.task_scores()
        assert ta.scores[2, 1] == pytest.approx(m.task_score(2, 1), rel=1e-12)


class TestInfluenceMatrix:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            InfluenceMatrix((np.array([[np.nan]]),), (0,))

    def test_rows_and_totals(self):
        im = InfluenceMatrix((np.array([[1.0, 2.0]]), np.array([[3.0, 4.0], [5.0, 6.0]])), (0, 1))
        assert list(im.rows())[3] == (1, 0, 1, 4.0)
        np.testing.assert_array_equal(im.totals()[1], [7.0, 11.0])

    def test_check_same_index(self):
        a = InfluenceMatrix((np.zeros((2, 1)),), (0,))
        b = InfluenceMatrix((np.zeros((3, 1)),), (0,))
        with pytest.raises(IndexMismatch):
            check_same_index([a, b])
        check_same_index([a, a])
