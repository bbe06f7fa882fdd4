"""Shared test helpers."""

import contextlib

import pytest


@pytest.fixture()
def criterion(capfd):
    """Print one PASS/FAIL line per acceptance criterion, bypassing pytest's
    output capture so the line always reaches the terminal."""

    @contextlib.contextmanager
    def runner(name):
        try:
            yield
        except BaseException:
            with capfd.disabled():
                print(f"FAIL: {name}", flush=True)
            raise
        with capfd.disabled():
            print(f"PASS: {name}", flush=True)

    return runner
