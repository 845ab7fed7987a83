"""Shared record of acceptance outcomes, printed by the conftest summary hook."""

RESULTS = {}


def record(number, title, passed, detail):
    RESULTS[number] = (title, bool(passed), detail)
    print(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
    return passed
