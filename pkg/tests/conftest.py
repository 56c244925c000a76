import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    records = getattr(mod, "RECORDS", None)
    if not records:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(records):
        ok, title, detail = records[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}: {detail}")
