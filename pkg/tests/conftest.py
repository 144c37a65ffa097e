import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """record(criterion, ok, detail): print and keep one verdict line per criterion."""
    def record(crit, ok, detail):
        line = "[%s] %s: %s" % ("PASS" if ok else "FAIL", crit, detail)
        _ACCEPTANCE[crit] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_ACCEPTANCE, key=lambda k: int(k.split()[0][1:])):
            terminalreporter.write_line(_ACCEPTANCE[key])
