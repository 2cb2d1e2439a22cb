import os

from threadpoolctl import threadpool_limits

# one BLAS thread keeps float reductions in a fixed order across runs
_limits = threadpool_limits(limits=int(os.environ.get("CAPS_THREADS", "1")))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
