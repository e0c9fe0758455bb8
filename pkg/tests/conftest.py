import contextlib

# criterion number -> (title, passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record the enclosed block as (part of) the verdict of one acceptance criterion.

    A criterion checked by several tests passes only if all of them do.
    """
    try:
        yield
    except BaseException as exc:
        text = str(exc).strip()
        ACCEPTANCE[number] = (title, False, text.splitlines()[0] if text else type(exc).__name__)
        raise
    if number not in ACCEPTANCE:
        ACCEPTANCE[number] = (title, True, "")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
