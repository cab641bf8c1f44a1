"""Shared pytest hooks: collects acceptance outcomes and prints them at the end."""

import re
from collections import defaultdict

import pytest

# criterion number -> list of (part, passed, detail)
_ACCEPTANCE = defaultdict(list)


@pytest.fixture
def record():
    """Register an acceptance outcome such as ("10b", False, "..."); returns the flag."""

    def _record(name: str, passed: bool, detail: str) -> bool:
        num = int(re.match(r"\d+", name).group())
        _ACCEPTANCE[num].append((name, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        parts = sorted(_ACCEPTANCE[num])
        ok = all(p[1] for p in parts)
        if len(parts) == 1:
            detail = parts[0][2]
        else:
            detail = "; ".join(f"({n[len(str(num)):]}) {'ok' if p else 'FAIL'} {d}" for n, p, d in parts)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {num:2d}: {detail}")
