"""Shared pytest hooks: collects acceptance verdicts and prints them at the end."""

import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
  """Records one PASS/FAIL line for an acceptance criterion.

  Usage: ``verdict(name, passed, detail)``. The line is printed immediately
  (visible with ``-s``) and repeated in the terminal summary.
  """
  def record(name: str, passed: bool, detail: str, seconds: float) -> None:
    line = f"{'PASS' if passed else 'FAIL'}  {name}  [{seconds:.3g} s]  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
  return record


def pytest_terminal_summary(terminalreporter):
  if ACCEPTANCE_LINES:
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
      terminalreporter.write_line(line)
