import re

_CRITERION = re.compile(r"test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, after the run."""
    lines = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(getattr(rep, "nodeid", ""))
            if not m or (outcome == "passed" and rep.when != "call"):
                continue
            detail = dict(getattr(rep, "user_properties", [])).get("detail", "")
            verdict = "PASS" if outcome == "passed" else outcome.upper().replace("FAILED", "FAIL")
            lines[int(m.group(1))] = f"criterion {int(m.group(1)):2d}: {verdict:5s} {detail}"
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
