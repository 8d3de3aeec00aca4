import json
from pathlib import Path

ACCEPTANCE = []


def record(name: str, passed: bool, detail: str) -> None:
    """Log one acceptance criterion; shown in the terminal summary."""
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE.append({"criterion": name, "passed": bool(passed), "detail": detail})
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for row in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if row['passed'] else 'FAIL'}] {row['criterion']}: {row['detail']}")
    out = Path(__file__).resolve().parent.parent / "acceptance_results.json"
    out.write_text(json.dumps(ACCEPTANCE, indent=2), encoding="utf-8")
