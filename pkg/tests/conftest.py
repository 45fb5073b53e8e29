import numpy as np
import pytest
import scipy.linalg as sla

from chordqp.coupled_qp import assemble_dense

_criteria: dict[int, list[str]] = {}


def dense_kkt(qp):
    """Independent oracle: one dense symmetric-indefinite KKT solve."""
    Q, q, A, b, _, _ = assemble_dense(qp)
    n, m = Q.shape[0], A.shape[0]
    K = np.block([[Q, A.T], [A, np.zeros((m, m))]])
    sol = sla.solve(K, np.concatenate([-q, b]), assume_a="sym")
    return sol[:n], sol[n:]


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max(initial=0.0) / (1.0 + np.abs(b).max(initial=0.0)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None and rep.when == "call":
        _criteria.setdefault(mark.args[0], []).append(rep.outcome)
    elif mark is not None and rep.when == "setup" and rep.outcome != "passed":
        _criteria.setdefault(mark.args[0], []).append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_criteria):
        ok = all(o == "passed" for o in _criteria[k])
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} ({len(_criteria[k])} checks)")
