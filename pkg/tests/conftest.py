from __future__ import annotations

import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, 11):
        if n in mod.RESULTS:
            passed, detail = mod.RESULTS[n]
            tr.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
        else:
            tr.write_line(f"criterion {n:>2}: NOT RUN")
