import pytest

_CRITERIA = {}


class CriterionLog:
    """Collects one pass/fail line per acceptance criterion."""

    def __init__(self, name):
        self.name = name
        self.checks = []

    def check(self, ok, detail):
        self.checks.append((bool(ok), detail))
        return bool(ok)

    @property
    def passed(self):
        return bool(self.checks) and all(ok for ok, _ in self.checks)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name} {status}: " + "; ".join(d for _, d in self.checks)


@pytest.fixture
def criterion(request):
    name = request.node.get_closest_marker("criterion").args[0]
    log = CriterionLog(name)
    _CRITERIA[name] = log
    yield log
    print("\n" + log.line())


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion identifier")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[name].line())
