import pytest

_LINES: list[str] = []


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for an acceptance criterion."""

    def emit(criterion: str, checks):
        ok = all(c[1] for c in checks)
        detail = "; ".join(f"{name}: {'ok' if passed else 'FAILED'} ({info})"
                           for name, passed, info in checks)
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
        _LINES.append(line)
        tr = request.config.pluginmanager.get_plugin("terminalreporter")
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
