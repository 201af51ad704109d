import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion id ("1", "8a", ...) -> (passed, detail); filled by test_acceptance.py
CRITERIA: dict[str, tuple[bool, str]] = {}


def _order(key: str):
    m = re.match(r"(\d+)(.*)", key)
    return int(m.group(1)), m.group(2)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=_order):
        ok, detail = CRITERIA[key]
        terminalreporter.write_line(f"criterion {key:>3}: {'PASS' if ok else 'FAIL'}  {detail}")
