"""Registry for the acceptance summary printed at the end of a pytest run."""

ACCEPTANCE = {}


def record(num, name, ok, detail):
    ACCEPTANCE[num] = (name, bool(ok), detail)
    print(f"[{'PASS' if ok else 'FAIL'}] {num:2d} {name}: {detail}")
    return ok
