import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# acceptance results, filled in by test_acceptance.py and echoed at the end of the run
CRITERIA: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=lambda k: int(k.split()[0])):
        terminalreporter.write_line(CRITERIA[key])
