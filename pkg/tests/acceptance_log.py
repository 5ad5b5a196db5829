"""Collects one status line per acceptance criterion for the terminal summary."""

RESULTS = {}


def report(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}  {title}: {detail}"
    RESULTS[number] = line
    print(line)
    return ok
