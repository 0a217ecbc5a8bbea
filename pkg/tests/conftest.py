import numpy as np
import pytest

from handrefine.template import default_template


@pytest.fixture(scope="session")
def template():
    return default_template()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one PASS/FAIL line per criterion after the run

_CRITERIA = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, title = mark.args
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        _, ok, detail = _CRITERIA.get(num, (title, True, ""))
        if call.excinfo is not None:
            ok = False
            msg = str(call.excinfo.value).strip()
            detail = detail or (msg.splitlines()[0][:120] if msg else call.excinfo.typename)
        _CRITERIA[num] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[num]
        line = f"C{num:<3}{'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
