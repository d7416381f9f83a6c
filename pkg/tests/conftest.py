import pytest


class AcceptanceLog:
    """Collects per-criterion outcomes; one summary line per criterion."""

    def __init__(self):
        self.parts = {}

    def check(self, number: int, title: str, ok, detail: str) -> bool:
        ok = bool(ok)
        line = f"[{'PASS' if ok else 'FAIL'}] #{number:<2d} {title}: {detail}"
        print(line)
        self.parts.setdefault(number, (title, []))[1].append((ok, detail))
        return ok


_LOG = AcceptanceLog()


@pytest.fixture(scope="session")
def acceptance():
    return _LOG


def pytest_terminal_summary(terminalreporter):
    if not _LOG.parts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LOG.parts):
        title, parts = _LOG.parts[n]
        ok = all(p[0] for p in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] #{n:<2d} {title}: {detail}")
