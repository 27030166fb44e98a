from __future__ import annotations

import socket
import sys
from collections import OrderedDict
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).resolve().parent))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

GOLDEN = Path(__file__).resolve().parent / "golden"

_RESULTS: "OrderedDict[int, dict]" = OrderedDict()


class NetworkBlocked(RuntimeError):
    pass


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """Every test runs with outbound sockets disabled."""

    def refuse(*args, **kwargs):
        raise NetworkBlocked("network access attempted during tests")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket.socket, "connect_ex", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)


@pytest.fixture(autouse=True)
def isolated_cache(monkeypatch, tmp_path):
    monkeypatch.setenv("XDG_CACHE_HOME", str(tmp_path / "xdg-cache"))
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)


@pytest.fixture
def golden_dir() -> Path:
    return GOLDEN


@pytest.fixture
def measure(request):
    """Attach measured numbers to the acceptance line of the running test."""
    notes = []
    request.node.user_properties.append(("measured", notes))
    return notes.append


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    n = marker.kwargs["criterion"]
    entry = _RESULTS.setdefault(n, {"title": marker.kwargs.get("title", ""), "passed": True, "notes": []})
    if call.excinfo is not None:
        entry["passed"] = False
    for key, notes in item.user_properties:
        if key == "measured":
            entry["notes"].extend(notes)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, entry in sorted(_RESULTS.items()):
        status = "PASS" if entry["passed"] else "FAIL"
        detail = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {n} {status}  {entry['title']}" + (f"  [{detail}]" if detail else ""))
