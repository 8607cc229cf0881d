"""Shared pytest wiring: a scoreboard printer that bypasses capture."""

import sys

_CAPMAN = None


def pytest_configure(config):
    global _CAPMAN
    _CAPMAN = config.pluginmanager.getplugin("capturemanager")


def announce(line: str) -> None:
    """Print one line on the real stdout even while capture is active."""
    if _CAPMAN is not None:
        with _CAPMAN.global_and_fixture_disabled():
            sys.stdout.write(line + "\n")
            sys.stdout.flush()
    else:
        sys.stdout.write(line + "\n")
        sys.stdout.flush()
