import numpy as np
import pytest

from decayscope.synth import Exponential, QuadraticExponent

EXP_DGP = Exponential(2.28, 0.00701)
QUAD_DGP = QuadraticExponent(2.28, 0.0075, 0.00002)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): acceptance criterion with pass/fail line")
    config._acceptance = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    item.config._acceptance.append((mark.args[0], rep.passed, detail, rep.duration))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = getattr(config, "_acceptance", [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail, secs in sorted(rows, key=lambda r: r[0]):
        terminalreporter.write_line(
            f"{'PASS' if ok else 'FAIL'}  {label}  [{secs:.1f}s]  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
