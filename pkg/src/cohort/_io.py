"""Location helpers: a location is a local path, a ``file://`` URL or an http(s) URL."""

from __future__ import annotations

import os
import urllib.error
import urllib.parse
import urllib.request
from pathlib import Path

from cohort.errors import FetchError

_REMOTE_SCHEMES = ("http", "https")


def is_remote(location: str) -> bool:
    return urllib.parse.urlsplit(str(location)).scheme in _REMOTE_SCHEMES


def local_path(location) -> Path | None:
    """Return the filesystem path behind ``location``, or None if it is remote."""
    location = os.fspath(location)
    parts = urllib.parse.urlsplit(location)
    if parts.scheme == "file":
        return Path(urllib.parse.unquote(parts.path))
    if parts.scheme in _REMOTE_SCHEMES:
        return None
    return Path(location)


def join(base, *parts: str) -> str:
    base = os.fspath(base)
    if local_path(base) is None or base.startswith("file://"):
        return "/".join([base.rstrip("/"), *(p.strip("/") for p in parts)])
    return os.path.join(base, *parts)


def read_bytes(location) -> bytes:
    path = local_path(location)
    try:
        if path is not None:
            return path.read_bytes()
        with urllib.request.urlopen(str(location), timeout=60) as resp:
            return resp.read()
    except (OSError, urllib.error.URLError) as exc:
        raise FetchError(f"cannot read {location}: {exc}") from exc


def read_text(location) -> str:
    return read_bytes(location).decode("utf-8")


def exists(location) -> bool:
    path = local_path(location)
    if path is not None:
        return path.exists()
    try:
        read_bytes(location)
    except FetchError:
        return False
    return True
