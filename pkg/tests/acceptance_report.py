"""Collects one PASS/FAIL line per acceptance criterion for the run summary."""

_LINES: dict[int, str] = {}


def record(number: int, ok: bool, detail: str) -> None:
    verdict = "PASS" if ok else "FAIL"
    _LINES[number] = f"[criterion {number:2d}] {verdict}  {detail}"
    print(_LINES[number])
    assert ok, f"criterion {number}: {detail}"


def lines() -> list[str]:
    return [line for _, line in sorted(_LINES.items())]
