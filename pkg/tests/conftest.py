import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

_CRITERION_LINES: list[str] = []


def record_criterion(line: str) -> None:
    """Collect a one-line verdict to echo at the end of the run."""
    _CRITERION_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _CRITERION_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _CRITERION_LINES:
            terminalreporter.write_line(line)
