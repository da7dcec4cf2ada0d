"""Collects acceptance verdicts and prints them after the test session."""

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {cid:2d}. {name}: {detail}")
