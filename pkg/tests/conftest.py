import numpy as np
import pytest

from kfac_ws import kfac, net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_spd(rng, n, jitter=0.5):
    M = rng.standard_normal((n, n))
    return M @ M.T / n + jitter * np.eye(n)


def kfac_blocks(model, batch, flavour):
    """Dense ``A kron B`` per unit from exact loss-Hessian backprops."""
    _, tape = net.forward(model, batch)
    return kfac.kron_assemble(kfac.compute_factors(tape, kfac.ggn_backprops(model, tape), flavour))


ACCEPTANCE = []


def record(criterion, title, passed, detail=""):
    """Remember one acceptance line; the terminal summary prints them in order."""
    ACCEPTANCE.append((criterion, f"criterion {criterion:>2} {'PASS' if passed else 'FAIL'}  {title}"
                       + (f"  [{detail}]" if detail else "")))
    print(ACCEPTANCE[-1][1])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
