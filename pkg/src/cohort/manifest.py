"""Package manifests and seeding manifests.

A package manifest maps package names to the places their sources live
(git, svn-like histories, tarballs, local directories, repositories,
archives) plus an ordered list of fallback dependency repositories. A
seeding manifest selects a subset of it and pins exact versions.

Manifests serialize to a tab-delimited file::

    # manifest_type: seeding
    # dep_repos: https://cran.example.org,/srv/bioc
    name	url	type	branch	subdir	extra	version
    rpath	https://github.com/octo/rpath	git	HEAD	.	NA	0.1.0

Absent values are written as ``NA``. A seeding manifest may pin packages
that have no entry (they come from the dependency repositories); such rows
carry ``NA`` in the url and type columns.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Union

from cohort import _io
from cohort.errors import LoadError, ParseError
from cohort.metadata import PackageVersion

LATEST = "latest"

SCM_TYPES = ("git", "svn-like-scm")
SOURCE_TYPES = SCM_TYPES + ("tarball-url", "local-dir", "repository", "archive")

DEFAULT_DEP_REPOS = ("https://cloud.r-project.org",)
DEFAULT_HOST = "https://github.com"

NA = "NA"
COLUMNS = ("name", "url", "type", "branch", "subdir", "extra")

_NAME_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9._]*")
_SHORTHAND_RE = re.compile(r"([^/@\s]+)/([^/@\s]+?)(?:@([^/\s]+))?(?:/(\S+))?")


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    source_type: str
    url: str
    branch: str | None = None
    subdir: str | None = None
    extra: str | None = None

    def __post_init__(self):
        if not _NAME_RE.fullmatch(self.name or ""):
            raise ValueError(f"invalid package name {self.name!r}")
        if self.source_type not in SOURCE_TYPES:
            raise ValueError(f"unknown source type {self.source_type!r} for {self.name}")
        if not self.url:
            raise ValueError(f"{self.name}: missing source location")
        if self.is_scm:
            if self.branch is None:
                object.__setattr__(self, "branch", "HEAD")
            if self.subdir is None:
                object.__setattr__(self, "subdir", ".")
        elif self.branch is not None or self.subdir is not None:
            raise ValueError(f"{self.name}: branch/subdir only apply to SCM sources")

    @property
    def is_scm(self) -> bool:
        return self.source_type in SCM_TYPES


@dataclass(frozen=True)
class PackageManifest:
    entries: tuple[ManifestEntry, ...] = ()
    dep_repos: tuple[str, ...] = DEFAULT_DEP_REPOS

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "dep_repos", tuple(self.dep_repos))
        seen = set()
        for e in self.entries:
            if e.name in seen:
                raise ValueError(f"duplicate manifest entry {e.name!r}")
            seen.add(e.name)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def entry(self, name: str) -> ManifestEntry | None:
        for e in self.entries:
            if e.name == name:
                return e
        return None

    def without(self, *names: str) -> PackageManifest:
        return replace(self, entries=tuple(e for e in self.entries if e.name not in names))

    def __len__(self):
        return len(self.entries)


Pin = tuple[str, Union[PackageVersion, str]]


@dataclass(frozen=True)
class SeedingManifest:
    """A manifest plus (name, version) pins; ``LATEST`` floats a pin.

    Pins are kept sorted by name so equal selections compare equal.
    """

    base: PackageManifest = field(default_factory=PackageManifest)
    pins: tuple[Pin, ...] = ()

    def __post_init__(self):
        pins = []
        for name, version in self.pins:
            if version != LATEST:
                version = PackageVersion.parse(version)
            pins.append((name, version))
        names = [n for n, _ in pins]
        if len(set(names)) != len(names):
            raise ValueError("duplicate pin names in seeding manifest")
        object.__setattr__(self, "pins", tuple(sorted(pins, key=lambda p: p[0])))

    @property
    def pin_map(self) -> dict[str, PackageVersion | str]:
        return dict(self.pins)

    @property
    def entries(self):
        return self.base.entries

    @property
    def dep_repos(self):
        return self.base.dep_repos


AnyManifest = Union[PackageManifest, SeedingManifest]


def manifest_from_shorthand(
    specs: Iterable[str],
    host_base: str = DEFAULT_HOST,
    dep_repos: Iterable[str] = DEFAULT_DEP_REPOS,
) -> PackageManifest:
    """Build a git manifest from ``owner/repo[@branch][/subdir]`` strings."""
    entries = []
    host_base = host_base.rstrip("/")
    for spec in specs:
        m = _SHORTHAND_RE.fullmatch(spec.strip())
        if m is None:
            raise ValueError(f"malformed repository shorthand {spec!r}")
        owner, repo, branch, subdir = m.groups()
        subdir = subdir.strip("/") if subdir else "."
        name = repo if subdir == "." else subdir.rsplit("/", 1)[-1]
        if name.endswith(".git"):
            name = name[:-4]
        entries.append(
            ManifestEntry(name, "git", f"{host_base}/{owner}/{repo}", branch or "HEAD", subdir)
        )
    return PackageManifest(tuple(entries), tuple(dep_repos))


def subset_manifest(
    m: AnyManifest,
    names: Iterable[str],
    pins: Mapping[str, PackageVersion | str] | None = None,
) -> SeedingManifest:
    """Select ``names`` from ``m``; versions come from ``pins`` or float as latest."""
    base = m.base if isinstance(m, SeedingManifest) else m
    known = m.pin_map if isinstance(m, SeedingManifest) else {}
    pins = dict(pins or {})
    selected = [(n, pins.get(n, known.get(n, LATEST))) for n in set(names)]
    return SeedingManifest(base, tuple(selected))


def _cell(value) -> str:
    if value is None:
        return NA
    value = str(value)
    if "\t" in value or "\n" in value or "\r" in value:
        raise ValueError(f"manifest value {value!r} contains a tab or newline")
    return value


def manifest_to_text(m: AnyManifest) -> str:
    seeding = isinstance(m, SeedingManifest)
    base = m.base if seeding else m
    for repo in base.dep_repos:
        if "," in repo:
            raise ValueError(f"dependency repository {repo!r} contains a comma")
    columns = COLUMNS + (("version",) if seeding else ())
    lines = [
        f"# manifest_type: {'seeding' if seeding else 'package'}",
        f"# dep_repos: {','.join(base.dep_repos)}",
        "\t".join(columns),
    ]
    pins = m.pin_map if seeding else {}
    for e in base.entries:
        row = [e.name, e.url, e.source_type, e.branch, e.subdir, e.extra]
        if seeding:
            row.append(pins.get(e.name))
        lines.append("\t".join(_cell(v) for v in row))
    if seeding:
        for name, version in m.pins:
            if base.entry(name) is None:
                lines.append("\t".join(_cell(v) for v in (name, None, None, None, None, None, version)))
    return "\n".join(lines) + "\n"


def serialize_manifest(m: AnyManifest, dest) -> None:
    """Write ``m`` to the file ``dest`` (UTF-8, ``\\n`` line endings)."""
    with open(dest, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(manifest_to_text(m))


class FileTarget:
    """Publish a manifest to a local file or directory."""

    def __init__(self, path, filename: str = "manifest.tsv"):
        self.path = Path(path)
        self.filename = filename

    def publish(self, text: str) -> str:
        path = self.path / self.filename if self.path.is_dir() else self.path
        path.write_text(text, encoding="utf-8", newline="\n")
        return str(path)


def publish_manifest(m: AnyManifest, target) -> str:
    """Publish ``m`` and return where it went.

    ``target`` is a path or any object with a ``publish(text) -> str``
    method, so hosting services can be plugged in.
    """
    if isinstance(target, (str, os.PathLike)):
        local = _io.local_path(target)
        if local is None:
            raise ValueError(f"cannot publish to remote location {target}")
        target = FileTarget(local)
    return target.publish(manifest_to_text(m))


def _na(value: str) -> str | None:
    return None if value == NA else value


def manifest_from_text(text: str) -> AnyManifest:
    lines = text.splitlines()
    meta = {}
    idx = 0
    while idx < len(lines) and lines[idx].startswith("#"):
        key, sep, value = lines[idx][1:].partition(":")
        if sep:
            meta[key.strip()] = value.strip()
        idx += 1
    kind = meta.get("manifest_type")
    if kind not in ("package", "seeding"):
        raise LoadError(f"missing or unknown manifest_type header ({kind!r})", row=1)
    dep_repos = tuple(r.strip() for r in meta.get("dep_repos", "").split(",") if r.strip())
    seeding = kind == "seeding"
    columns = COLUMNS + (("version",) if seeding else ())
    if idx >= len(lines) or tuple(lines[idx].split("\t")) != columns:
        raise LoadError(f"expected column header {'<TAB>'.join(columns)}", row=idx + 1)
    entries, pins, names = [], [], set()
    for rowno, line in enumerate(lines[idx + 1:], start=idx + 2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != len(columns):
            raise LoadError(f"expected {len(columns)} columns, found {len(cells)}", row=rowno)
        name, url, stype, branch, subdir, extra = (_na(c) for c in cells[:6])
        if name is None or name in names:
            raise LoadError(f"missing or duplicate package name {name!r}", row=rowno)
        names.add(name)
        try:
            if stype is not None or not seeding:
                entries.append(ManifestEntry(name, stype, url, branch, subdir, extra))
            if seeding and cells[6] != NA:
                version = cells[6] if cells[6] == LATEST else PackageVersion.parse(cells[6])
                pins.append((name, version))
        except (ValueError, ParseError) as exc:
            raise LoadError(str(exc), row=rowno) from None
    base = PackageManifest(tuple(entries), dep_repos)
    return SeedingManifest(base, tuple(pins)) if seeding else base


def load_manifest(src) -> AnyManifest:
    """Load a manifest from a path, ``file://`` URL or http(s) URL."""
    return manifest_from_text(_io.read_text(src))
