# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(cid, passed, detail=""):
    ACCEPTANCE[cid] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    key = lambda c: (int("".join(ch for ch in c if ch.isdigit())), c)
    for cid in sorted(ACCEPTANCE, key=key):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid}: {'PASS' if ok else 'FAIL'}  {detail}")
