_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid, title): acceptance criterion covered by this test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call" and not (call.when == "setup" and call.excinfo is not None):
        return
    cid, title = marker.args
    passed = call.excinfo is None
    prev = _CRITERIA.get(cid)
    if prev is None or prev[0] == "PASS":
        _CRITERIA[cid] = ("PASS" if passed else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: int(c[1:])):
        status, title = _CRITERIA[cid]
        terminalreporter.write_line(f"{status} {cid} {title}")
