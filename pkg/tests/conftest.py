import numpy as np
import pytest

from dfclab.network import init_params


def random_net(sizes, activations=None, seed=0, weight_scale=1.0):
    activations = activations or ["linear"] * (len(sizes) - 1)
    return init_params(sizes, activations, np.random.default_rng(seed), weight_scale)


def fd_jacobian(fn, x, h=1e-6):
    """Central finite-difference Jacobian of ``fn`` at flat ``x``."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((fn(x + e) - fn(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail):
    """Remember a one-line verdict; all lines are printed in the terminal summary."""
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {number:>2} ({title}): {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
