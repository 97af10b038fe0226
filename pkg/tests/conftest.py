import numpy as np
import pytest

from mkd.channel import SystemConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running (hours) desk-scale training criteria")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_cfg():
    return SystemConfig(M=2, N=1, K=2, B=3, L=2, P_train=10.0, P=10.0)


@pytest.fixture
def ref_cfg():
    return SystemConfig(M=8, N=2, K=4, B=6, L=8, P_train=10.0, P=10.0)


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def random_semi_unitary(rng, m, n, batch=()):
    q, _ = np.linalg.qr(crandn(rng, *batch, m, n))
    return q


def random_unitary(rng, n):
    return random_semi_unitary(rng, n, n)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record a one-line PASS/FAIL verdict; printed again in the terminal summary."""
    def record(number, passed, detail):
        status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
        line = f"criterion {number:>2}: {status}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def _criterion_key(line):
    tag = line.split(":")[0].split()[1]
    digits = "".join(ch for ch in tag if ch.isdigit())
    return int(digits), tag


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=_criterion_key):
            terminalreporter.write_line(line)
