import sys
from pathlib import Path

HERE = Path(__file__).parent
# oracle and fixture helpers are plain modules next to the tests
sys.path.insert(0, str(HERE))
sys.path.insert(0, str(HERE / "fixtures"))

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
