import pytest

from cohort.sources import Fetcher
from ecosystem import build_ecosystem


@pytest.fixture(autouse=True)
def _isolated_env(tmp_path, monkeypatch):
    # keep the real user store/cache/config out of every test
    monkeypatch.setenv("XDG_DATA_HOME", str(tmp_path / "xdg-data"))
    monkeypatch.setenv("XDG_CACHE_HOME", str(tmp_path / "xdg-cache"))
    monkeypatch.setenv("XDG_CONFIG_HOME", str(tmp_path / "xdg-config"))
    for var in ("COHORT_ROOT", "COHORT_CACHE"):
        monkeypatch.delenv(var, raising=False)


@pytest.fixture(scope="session")
def shared_eco(tmp_path_factory):
    """Read-only ecosystem shared by tests that never modify it."""
    return build_ecosystem(tmp_path_factory.mktemp("eco"))


@pytest.fixture
def eco(tmp_path):
    return build_ecosystem(tmp_path / "eco")


@pytest.fixture
def fetcher(tmp_path):
    return Fetcher(tmp_path / "cache")


@pytest.fixture
def http_root(tmp_path):
    """Serve a temporary directory over HTTP; yields (directory, base_url)."""
    import functools
    import http.server
    import threading

    root = tmp_path / "www"
    root.mkdir()
    handler = functools.partial(_QuietHandler, directory=str(root))
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield root, f"http://127.0.0.1:{server.server_address[1]}"
    finally:
        server.shutdown()
        server.server_close()


def _quiet_handler():
    import http.server

    class Handler(http.server.SimpleHTTPRequestHandler):
        def log_message(self, *args):
            pass

    return Handler


_QuietHandler = _quiet_handler()
