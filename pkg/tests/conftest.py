import pytest

# criterion number -> (passed, one-line detail); filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
CRITERIA = {
    1: "gradient correctness",
    2: "oracle fidelity and privacy",
    3: "mode enforcement",
    4: "freeze-and-thaw structure",
    5: "identity at init",
    6: "metric oracles",
    7: "ordering experiment (tinyA target)",
    8: "simulator distillation quality",
    9: "backbone robustness (tinyB target)",
    10: "determinism",
}


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name in CRITERIA.items():
        if number in ACCEPTANCE:
            passed, detail = ACCEPTANCE[number]
            terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {name}: {detail}")
        else:
            terminalreporter.write_line(f"[----] {number:>2}. {name}: not run")
