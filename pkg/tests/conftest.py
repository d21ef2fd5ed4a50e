import sys


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance PASS/FAIL lines, which pytest otherwise captures."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in results:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    skipped = [r for r in terminalreporter.stats.get("skipped", []) if "maicity" in r.nodeid]
    if skipped:
        terminalreporter.write_line("[SKIP] MaiCity completion ratio: TQ_MAICITY not set")
