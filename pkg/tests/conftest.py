import pytest

_RESULTS = pytest.StashKey[dict]()
N_CRITERIA = 11


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def acceptance(request):
    """Recorder ``record(number, title, ok, detail)`` for the acceptance summary."""
    results = request.config.stash[_RESULTS]

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        results[number] = (title, bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({detail})")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n not in results:
            terminalreporter.write_line(f"NOT RUN criterion {n}: no result recorded")
            continue
        title, ok, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {title} ({detail})")
