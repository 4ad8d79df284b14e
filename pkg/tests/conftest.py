import sys
from pathlib import Path

# make the shared oracle module importable from every test file
sys.path.insert(0, str(Path(__file__).parent))

# acceptance results, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")
