import pytest

_RESULTS: dict[int, dict] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    _RESULTS[number] = {"title": title, "ok": call.excinfo is None, "detail": detail}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        r = _RESULTS[n]
        line = f"criterion {n:>2}  {'PASS' if r['ok'] else 'FAIL'}  {r['title']}"
        if r["detail"]:
            line += f"  [{r['detail']}]"
        terminalreporter.write_line(line)


@pytest.fixture
def detail(record_property):
    """Attach a short measurement string to the criterion line."""
    return lambda text: record_property("detail", text)
