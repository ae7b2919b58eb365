import pytest

CRITERIA = {
    1: "oracle equivalence (roram)",
    2: "merge consistency (tsengine)",
    3: "query planner worked example",
    4: "day-retention geometry and memory",
    5: "distinct paths per eviction window",
    6: "trace shape invariance and leaf uniformity",
    7: "placement/sync audit after every eviction",
    8: "roram throughput >= 1.2x pathoram",
    9: "latency monotone in range and block size",
    10: "interval speedup T=20s vs T=1s >= 10x",
    11: "encrypted end-to-end service",
}

_outcomes = {}
_notes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    n = mark.args[0]
    _outcomes[n] = _outcomes.get(n, True) and rep.passed
    for key, value in rep.user_properties:
        if key == "measured":
            _notes.setdefault(n, []).append(str(value))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        status = "PASS" if _outcomes[n] else "FAIL"
        note = "; ".join(_notes.get(n, []))
        line = f"criterion {n:2d} {status}  {CRITERIA.get(n, '')}"
        terminalreporter.write_line(f"{line}  [{note}]" if note else line)
