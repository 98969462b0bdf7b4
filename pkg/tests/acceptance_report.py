"""Collects one result line per acceptance criterion for the terminal summary."""

CRITERIA = range(1, 12)
LINES: dict[int, str] = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}"
    if detail:
        line += f"  ({detail})"
    LINES[number] = line
    print(line)
    return passed


def summary() -> list[str]:
    """All criteria in order; criteria without a recorded result are flagged."""
    return [LINES.get(k, f"criterion {k:>2} ----  no result (not selected, or errored before recording)") for k in CRITERIA]
