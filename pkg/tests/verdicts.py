"""Collects one verdict line per acceptance criterion for the terminal summary."""

LINES = []


def record(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    LINES.append(line)
    print(line)
    assert ok, line
