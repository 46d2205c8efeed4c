from __future__ import annotations

import pytest

from vidagent import kernels
from vidagent.environment import VideoHandle

# (criterion, passed or None when skipped, detail)
ACCEPTANCE_RESULTS: list[tuple[str, bool | None, str]] = []


def tool(start: int, end: int, thought: str = "look closer") -> str:
    return f"<think>{thought}</think><tool_call>frame_extraction_tool({start}, {end})</tool_call>"


def answer(text: str, thought: str = "done") -> str:
    return f"<think>{thought}</think><answer>{text}</answer>"


@pytest.fixture
def video100() -> VideoHandle:
    return VideoHandle("v100", 100)


@pytest.fixture
def video120() -> VideoHandle:
    return VideoHandle("v120", 120)


@pytest.fixture(params=kernels.available())
def backend(request) -> str:
    return request.param


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  {detail}")
