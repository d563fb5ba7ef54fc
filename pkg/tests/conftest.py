import pytest

from livekv.server import Server


@pytest.fixture
def start_server():
    """Factory for in-process servers on an ephemeral port, stopped after the test."""
    servers = []

    def make(**kw):
        kw.setdefault("port", 0)
        srv = Server(**kw).start()
        servers.append(srv)
        return srv

    yield make
    for srv in servers:
        srv.stop()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
