import numpy as np


def swing_up(obs):
    """Hand-written energy-pumping pendulum controller; clearly beats random."""
    c, s, w = obs[:, 0], obs[:, 1], obs[:, 2]
    balance = -(10 * np.arctan2(s, c) + 2 * w)
    pump = 2 * np.sign(w + 1e-9)
    return np.clip(np.where(c > 0.8, balance, pump), -2, 2)[:, None]


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
