"""Verdict registry for the acceptance criteria, printed at the end of the session."""

VERDICTS: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    VERDICTS[number] = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail}"
    print(VERDICTS[number])
