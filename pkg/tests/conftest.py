import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["python", "cython"])
def backend(request, monkeypatch):
    """Run a test against each kernel backend that is built."""
    from segaware import backend as be, patches

    if request.param not in be.available():
        pytest.skip(f"{request.param} backend not built")
    monkeypatch.setattr(patches, "kernels", be.get(request.param))
    return request.param


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """report(number, name, ok, detail) records one acceptance line and
    returns ``ok``; lines are printed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def report(number, name, ok, detail=""):
        lines.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}  {detail}".rstrip())
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
