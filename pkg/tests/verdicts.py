"""Pass/fail lines for the acceptance criteria, printed at the end of the pytest run."""

LINES: list[str] = []


def verdict(cid: str, title: str, ok: bool, detail: str = "") -> None:
    line = f"{cid} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    LINES.append(line)
    print(line)
    assert ok, line
