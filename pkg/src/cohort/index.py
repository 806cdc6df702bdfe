"""Repository index (``src/contrib/PACKAGES``) reading and writing."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from cohort import _io
from cohort.errors import FetchError, ParseError
from cohort.metadata import DcfRecord, PackageVersion, parse_dcf, serialize_dcf

CONTRIB = "src/contrib"
INDEX_PATH = f"{CONTRIB}/PACKAGES"
ARCHIVE_DIR = f"{CONTRIB}/Archive"
INDEX_FIELDS = ("Package", "Version", "Depends", "Imports", "Suggests")


def tarball_name(name: str, version) -> str:
    return f"{name}_{version}.tar.gz"


def archive_root(repo) -> str:
    """Archive tree that sits beside a repository's index."""
    return _io.join(repo, ARCHIVE_DIR)


@dataclass
class RepoIndex:
    """One DCF record per package, keyed by package name."""

    records: dict[str, DcfRecord] = field(default_factory=dict)

    @classmethod
    def from_text(cls, text: str) -> RepoIndex:
        records = {}
        for rec in parse_dcf(text):
            name = rec.get("Package")
            if not name or "Version" not in rec:
                raise ParseError("index record lacks Package or Version")
            records[name] = rec
        return cls(records)

    @classmethod
    def load(cls, repo) -> RepoIndex:
        return cls.from_text(_io.read_text(_io.join(repo, INDEX_PATH)))

    @classmethod
    def load_or_empty(cls, repo) -> RepoIndex:
        path = _io.local_path(repo)
        if path is not None and not (path / INDEX_PATH).exists():
            return cls()
        return cls.load(repo)

    def add(self, description: DcfRecord) -> None:
        rec = {k: description[k] for k in INDEX_FIELDS if description.get(k)}
        self.records[rec["Package"]] = rec

    def version(self, name: str) -> PackageVersion | None:
        rec = self.records.get(name)
        return PackageVersion.parse(rec["Version"]) if rec else None

    def pairs(self) -> set[tuple[str, PackageVersion]]:
        return {(n, self.version(n)) for n in self.records}

    def to_text(self) -> str:
        return serialize_dcf(self.records[n] for n in sorted(self.records))

    def write(self, repo) -> Path:
        path = Path(repo) / INDEX_PATH
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(".PACKAGES.tmp")
        tmp.write_text(self.to_text(), encoding="utf-8", newline="\n")
        os.replace(tmp, path)
        return path

    def __contains__(self, name):
        return name in self.records

    def __len__(self):
        return len(self.records)


def load_index(repo) -> RepoIndex:
    try:
        return RepoIndex.load(repo)
    except ParseError as exc:
        raise FetchError(f"unreadable index in {repo}: {exc}") from exc
