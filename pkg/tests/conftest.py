import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from support import FixtureHTTPServer, SmtpCapture  # noqa: E402

LEGACY_ENTRIES = """{
  "stringer": "local-police-stringer.js",
  "parameters": ["metropolitan", "00AGGU"]
}, {
  "stringer": "crime-stringer.js",
  "parameters": ["51.52863195218981", "-0.12342453002929688", "6", "10"]
}"""


@pytest.fixture
def http_server():
    with FixtureHTTPServer() as server:
        yield server


@pytest.fixture
def smtp_server():
    with SmtpCapture() as server:
        yield server


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch, tmp_path):
    monkeypatch.delenv("DATASTRINGER_CONFIG", raising=False)
    monkeypatch.setenv("DATASTRINGER_HOME", str(tmp_path / "default-home"))


@pytest.fixture
def legacy_file(tmp_path):
    path = tmp_path / "use_cases.json"
    path.write_text("[" + LEGACY_ENTRIES + "]\n")
    return path


_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, name = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else "FAIL"
        _CRITERIA[number] = (name, status)
        print(f"\ncriterion {number} ({name}): {status}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        name, status = _CRITERIA[number]
        terminalreporter.write_line(f"{status} criterion {number}: {name}")
