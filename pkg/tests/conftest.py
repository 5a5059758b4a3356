import pytest

_VERDICTS = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        number, title = marker.args
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        detail = dict(item.user_properties).get("detail", "")
        if rep.skipped and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2]
        _VERDICTS.append((number, f"[{status}] criterion {number}: {title}" + (f" ({detail})" if detail else "")))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS):
        terminalreporter.write_line(line)


@pytest.fixture
def detail(request):
    """Callable that attaches a one-line detail to the criterion verdict."""

    def set_detail(text):
        request.node.user_properties[:] = [p for p in request.node.user_properties if p[0] != "detail"]
        request.node.user_properties.append(("detail", text))
        print(text)

    return set_detail
