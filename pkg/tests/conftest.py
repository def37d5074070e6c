import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    results = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when != "call" and outcome != "error":
                continue
            name = nodeid.split("::")[-1].split("[")[0]
            ok = outcome == "passed"
            results[name] = results.get(name, True) and ok
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(results):
        number = int(name.split("_")[2])
        label = "_".join(name.split("_")[3:]).replace("_", " ")
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if results[name] else 'FAIL'}  {label}")
