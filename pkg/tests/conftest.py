import numpy as np
import pytest


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def random_pd(rng, m, batch=(), cond_boost=1.0):
    A = crandn(rng, *batch, m, m)
    return A @ np.swapaxes(A, -1, -2).conj() + cond_boost * np.eye(m)


def random_unitary(rng, m):
    q, r = np.linalg.qr(crandn(rng, m, m))
    return q * (np.diagonal(r) / np.abs(np.diagonal(r)))


def jd_family(rng, m, n_members):
    """PSD family sharing one congruence diagonalizer (random, non-unitary)."""
    A = crandn(rng, m, m) + 2 * np.eye(m)
    Ainv = np.linalg.inv(A)
    return [Ainv.conj().T @ np.diag(rng.uniform(0.2, 2.0, m)) @ Ainv for _ in range(n_members)]


def generic_family(rng, m, n_members):
    """Generic PSD family; not jointly diagonalizable when m >= 2 and n_members >= 3."""
    return [random_pd(rng, m, cond_boost=0.1) for _ in range(n_members)]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def record_criterion(request):
    """Record ``(passed, detail)`` for an acceptance criterion before asserting."""
    store = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(number: int, passed: bool, detail: str):
        store[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        passed, detail = store[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
