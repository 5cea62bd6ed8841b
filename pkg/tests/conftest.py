import numpy as np
import pytest

from mtif.data import SyntheticConfig, generate_synthetic
from mtif.linalg import BlockHessian, assemble_dense
from mtif.models import ModelSpec
from mtif.trainer import fit


def random_block_hessian(rng, K, task_dims, p, margin=1.0):
    """SPD arrowhead matrix: random SPD diagonal blocks and a shared block
    large enough that the Schur complement is SPD by construction."""
    diag, cross = [], []
    shared = np.zeros((p, p))
    for d in task_dims[:K]:
        a = rng.standard_normal((d, d))
        h = a @ a.T + margin * np.eye(d)
        c = rng.standard_normal((d, p))
        diag.append(h)
        cross.append(c)
        shared += c.T @ np.linalg.solve(h, c)
    b = rng.standard_normal((p, p))
    shared += b @ b.T + margin * np.eye(p)
    return BlockHessian(diag, cross, shared)


def dense_influence(model, i, l, k):
    """Score from the dense inverse of the assembled Hessian (independent of the block algebra)."""
    H = assemble_dense(model.hessian)
    dims = model.spec.dims
    offsets = np.concatenate([[0], np.cumsum(dims)])
    load = np.zeros(offsets[-1])
    a, b = model.sample_loads(l, i)
    load[offsets[l] : offsets[l + 1]] = a[:, 0]
    load[offsets[-2] :] = b[:, 0]
    dw = -np.linalg.solve(H, load)
    return float(model.validation_gradient(k) @ dw)


@pytest.fixture(scope="session")
def ridge_toy():
    ds = generate_synthetic(SyntheticConfig(K=3, n=24, d=4, seed=7))
    spec = ModelSpec.uniform("ridge_linear", 3, 4)
    return spec, ds, fit(spec, ds)


@pytest.fixture(scope="session")
def logistic_toy():
    ds = generate_synthetic(SyntheticConfig(K=3, n=60, d=4, seed=3, labels="binary"))
    spec = ModelSpec.uniform("soft_logistic", 3, 4)
    return spec, ds, fit(spec, ds)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
