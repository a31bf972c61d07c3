from __future__ import annotations

import re
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

_LIST_MARKER = re.compile(r"^\s*(?:\d+\.|-)\s+", re.M)


def delatex(tex: str) -> str:
    """Plain text of a LaTeX prompt box (just the markup that box uses)."""
    lines = []
    for line in tex.splitlines():
        s = line.strip()
        if s.startswith(("\\begin", "\\end")) or s in ("\\medskip", "\\small"):
            continue
        lines.append(re.sub(r"^\\item\s*", "", s))
    t = "\n".join(lines)
    t = re.sub(r"\$\[x_1, y_1, x_2, y_2\]\$", "[x1, y1, x2, y2]", t)
    t = re.sub(r"\$([^$]*)\$", r"\1", t)
    t = t.replace("\\{", "\x00").replace("\\}", "\x01").replace("\\_", "_")
    for _ in range(3):
        t = re.sub(r"\\(?:textbf|texttt|textit)\{([^{}]*)\}", r"\1", t)
    t = t.replace("\x00", "{").replace("\x01", "}")
    t = t.replace("---", "\u2014").replace("--", "\u2013").replace("``", '"').replace("''", '"')
    t = t.replace("\\ldots", "...")
    return t


def normalize(text: str) -> str:
    return " ".join(_LIST_MARKER.sub("", text).split())


@pytest.fixture
def fixture_text():
    def read(name: str) -> str:
        return (FIXTURES / name).read_text(encoding="utf-8")

    return read


_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; printed in the terminal summary."""

    def report(name: str, ok: bool, detail: str = "") -> bool:
        _CRITERIA.append((name, bool(ok), detail))
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
