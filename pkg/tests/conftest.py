import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# One line per acceptance criterion, repeated in the terminal summary so the
# verdicts are visible even when output capture is on.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
