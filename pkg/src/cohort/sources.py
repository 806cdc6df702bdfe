"""Retrieve package source trees and search SCM histories for versions.

Every fetched tree lands in a content-addressed cache: git and svn-like
trees are keyed by (url, subdir, commit), tarballs by the SHA-256 of their
bytes. Local directories are used in place.
"""

from __future__ import annotations

import hashlib
import io
import os
import re
import shutil
import subprocess
import tarfile
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path

from cohort import _io
from cohort.errors import FetchError, NotFoundError, ParseError
from cohort.index import RepoIndex, archive_root, load_index, tarball_name, CONTRIB
from cohort.manifest import LATEST, ManifestEntry
from cohort.metadata import DcfRecord, PackageVersion, description_from_text, read_description


def default_cache_root() -> Path:
    if os.environ.get("COHORT_CACHE"):
        return Path(os.environ["COHORT_CACHE"])
    base = os.environ.get("XDG_CACHE_HOME") or os.path.join(os.path.expanduser("~"), ".cache")
    return Path(base) / "cohort"


def _digest(*parts: str | bytes) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else p.encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()


def _extract_tar(data: bytes, dest: Path) -> None:
    with tarfile.open(fileobj=io.BytesIO(data), mode="r:*") as tf:
        if hasattr(tarfile, "data_filter"):
            tf.extractall(dest, filter="data")
        else:  # pragma: no cover - very old interpreters
            tf.extractall(dest)


def _package_root(path: Path) -> Path:
    """Directory holding DESCRIPTION: ``path`` itself or its single child."""
    if (path / "DESCRIPTION").is_file():
        return path
    children = [c for c in path.iterdir() if c.is_dir()]
    if len(children) == 1 and (children[0] / "DESCRIPTION").is_file():
        return children[0]
    raise FetchError(f"no DESCRIPTION found under {path}")


def _description_path(subdir: str | None) -> str:
    if not subdir or subdir == ".":
        return "DESCRIPTION"
    return f"{subdir.strip('/')}/DESCRIPTION"


@dataclass(frozen=True)
class SourceTree:
    path: Path
    origin: ManifestEntry
    resolved_version: PackageVersion
    commit: str | None = None
    description: DcfRecord = field(default_factory=dict, compare=False, repr=False)


@dataclass(frozen=True)
class ArchiveLayout:
    """``<root>/<name>/<name>_<version>.tar.gz``"""

    root: str

    def location(self, name: str, version) -> str:
        return _io.join(self.root, name, tarball_name(name, version))

    def package_dir(self, name: str) -> str:
        return _io.join(self.root, name)


def list_archive_versions(a: ArchiveLayout, name: str) -> list[PackageVersion]:
    """Versions of ``name`` in an archive tree, ascending."""
    root = _io.local_path(a.root)
    if root is None or not root.is_dir():
        raise FetchError(f"archive root {a.root} is not a readable directory")
    pkg_dir = root / name
    if not pkg_dir.is_dir():
        return []
    pattern = re.compile(re.escape(name) + r"_([0-9]+(?:[.-][0-9]+)*)\.tar\.gz")
    versions = []
    for f in pkg_dir.iterdir():
        m = pattern.fullmatch(f.name)
        if m:
            versions.append(PackageVersion(m.group(1)))
    return sorted(versions)


# -- SCM histories ---------------------------------------------------------


class ScmHistory:
    """Linear (first-parent) history of one branch.

    Subclasses provide ``commits`` (root to tip), ``read_file`` and
    ``export``; the version search is shared.
    """

    url: str

    def commits(self) -> list[str]:
        raise NotImplementedError

    def read_file(self, commit: str, path: str) -> str | None:
        raise NotImplementedError

    def read_files(self, commits: list[str], path: str) -> list[str | None]:
        return [self.read_file(c, path) for c in commits]

    def export(self, commit: str, subdir: str, dest: Path) -> None:
        raise NotImplementedError

    def head(self) -> str:
        commits = self.commits()
        if not commits:
            raise FetchError(f"{self.url} has no history")
        return commits[-1]

    def version_history(self, subdir: str) -> list[tuple[str, PackageVersion | None]]:
        """(commit, version) pairs root to tip; None where DESCRIPTION does not parse."""
        commits = self.commits()
        out = []
        for commit, text in zip(commits, self.read_files(commits, _description_path(subdir))):
            version = None
            if text is not None:
                try:
                    version = PackageVersion.parse(description_from_text(text)["Version"])
                except ParseError:
                    pass
            out.append((commit, version))
        return out


def _git(*args: str, git_dir: Path | None = None, input: bytes | None = None) -> bytes:
    cmd = ["git"]
    if git_dir is not None:
        cmd.append(f"--git-dir={git_dir}")
    cmd.extend(args)
    proc = subprocess.run(cmd, input=input, capture_output=True)
    if proc.returncode != 0:
        raise FetchError(f"git {args[0]} failed: {proc.stderr.decode(errors='replace').strip()}")
    return proc.stdout


_mirror_locks: dict[str, threading.Lock] = {}
_mirror_locks_guard = threading.Lock()


class GitHistory(ScmHistory):
    """A git branch, read through a mirror clone kept in the cache."""

    def __init__(self, url: str, branch: str = "HEAD", cache_root: Path | None = None, refresh: bool = True):
        self.url = url
        self.branch = branch or "HEAD"
        root = Path(cache_root or default_cache_root()) / "git"
        root.mkdir(parents=True, exist_ok=True)
        self.git_dir = root / (_digest(url)[:24] + ".git")
        with _mirror_locks_guard:
            lock = _mirror_locks.setdefault(str(self.git_dir), threading.Lock())
        with lock:
            self._sync(refresh)
        self._commits: list[str] | None = None

    def _sync(self, refresh: bool) -> None:
        if self.git_dir.exists():
            if refresh:
                _git("remote", "update", "--prune", git_dir=self.git_dir)
            return
        tmp = Path(tempfile.mkdtemp(prefix=".clone-", dir=self.git_dir.parent))
        try:
            _git("clone", "--quiet", "--mirror", self.url, str(tmp / "m.git"))
            try:
                os.rename(tmp / "m.git", self.git_dir)
            except OSError:
                if not self.git_dir.exists():
                    raise
        finally:
            shutil.rmtree(tmp, ignore_errors=True)

    def commits(self) -> list[str]:
        if self._commits is None:
            out = _git("rev-list", "--first-parent", "--reverse", self.branch, "--", git_dir=self.git_dir)
            self._commits = out.decode().split()
        return list(self._commits)

    def read_files(self, commits: list[str], path: str) -> list[str | None]:
        if not commits:
            return []
        request = "".join(f"{c}:{path}\n" for c in commits).encode()
        out = _git("cat-file", "--batch", git_dir=self.git_dir, input=request)
        results, pos = [], 0
        for _ in commits:
            nl = out.index(b"\n", pos)
            header = out[pos:nl].split()
            pos = nl + 1
            if len(header) == 3 and header[1] == b"blob":
                size = int(header[2])
                results.append(out[pos:pos + size].decode("utf-8", errors="replace"))
                pos += size + 1
            elif len(header) == 3:
                pos += int(header[2]) + 1
                results.append(None)
            else:
                results.append(None)
        return results

    def read_file(self, commit: str, path: str) -> str | None:
        return self.read_files([commit], path)[0]

    def export(self, commit: str, subdir: str, dest: Path) -> None:
        treeish = commit if subdir in (None, ".", "") else f"{commit}:{subdir.strip('/')}"
        _extract_tar(_git("archive", "--format=tar", treeish, git_dir=self.git_dir), dest)


class ExportDirHistory(ScmHistory):
    """Revision-ordered export hook for svn-like sources.

    ``url`` is a directory whose numeric subdirectories each hold the
    exported tree at that revision. Branches other than ``HEAD`` or
    ``trunk`` live under ``<url>/branches/<branch>/``.
    """

    def __init__(self, url: str, branch: str = "HEAD", cache_root=None, refresh: bool = True):
        self.url = url
        root = _io.local_path(url)
        if root is None or not root.is_dir():
            raise FetchError(f"svn-like export {url} is not a readable directory")
        if branch not in (None, "HEAD", "trunk"):
            root = root / "branches" / branch
            if not root.is_dir():
                raise FetchError(f"branch {branch} not found in {url}")
        self.root = root

    def commits(self) -> list[str]:
        revs = [p.name for p in self.root.iterdir() if p.is_dir() and p.name.isdigit()]
        return sorted(revs, key=int)

    def read_file(self, commit: str, path: str) -> str | None:
        try:
            return (self.root / commit / path).read_text(encoding="utf-8")
        except OSError:
            return None

    def export(self, commit: str, subdir: str, dest: Path) -> None:
        src = self.root / commit
        if subdir not in (None, ".", ""):
            src = src / subdir
        shutil.copytree(src, dest, dirs_exist_ok=True)


SCM_TRANSPORTS = {"git": GitHistory, "svn-like-scm": ExportDirHistory}


def register_scm_transport(source_type: str, factory) -> None:
    """Install a history reader for ``source_type`` (e.g. a real svn client)."""
    SCM_TRANSPORTS[source_type] = factory


def earliest_commit_for_version(
    repo: str,
    branch: str,
    name: str,
    subdir: str,
    version,
    *,
    history: ScmHistory | None = None,
    cache_root=None,
) -> str:
    """First commit on the first-parent chain whose DESCRIPTION declares ``version``.

    Later commits carrying the same version, including a re-introduction
    after a bump, never map to that version. Commits whose DESCRIPTION is
    missing or unparseable are skipped.
    """
    version = PackageVersion.parse(version)
    if history is None:
        history = GitHistory(repo, branch, cache_root)
    seen = []
    for commit, v in history.version_history(subdir):
        if v is None:
            continue
        if v == version:
            return commit
        if v not in seen:
            seen.append(v)
    raise NotFoundError(name, version, [(f"{repo}@{branch}", seen)])


# -- fetching --------------------------------------------------------------


@dataclass(frozen=True)
class Probe:
    """Identity of a source without unpacking it: version, commit, DESCRIPTION."""

    version: PackageVersion
    commit: str | None
    description: DcfRecord
    fingerprint: str | None = None


class Fetcher:
    """Fetches source trees into a cache; counts every ``fetch`` call.

    ``refresh`` controls whether cached git mirrors are updated the first
    time each URL is used by this fetcher.
    """

    def __init__(self, cache_root=None, refresh: bool = True):
        self.cache_root = Path(cache_root or default_cache_root())
        self.refresh = refresh
        self.fetched: list[tuple[str, str]] = []
        self._lock = threading.Lock()
        self._histories: dict[tuple[str, str, str], ScmHistory] = {}
        self._indexes: dict[str, RepoIndex] = {}

    @property
    def fetch_count(self) -> int:
        return len(self.fetched)

    # lookups shared with the resolver

    def history(self, source_type: str, url: str, branch: str | None = "HEAD") -> ScmHistory:
        key = (source_type, url, branch or "HEAD")
        with self._lock:
            hist = self._histories.get(key)
        if hist is None:
            try:
                factory = SCM_TRANSPORTS[source_type]
            except KeyError:
                raise FetchError(f"no history transport for {source_type}") from None
            hist = factory(url, branch or "HEAD", self.cache_root, self.refresh)
            with self._lock:
                hist = self._histories.setdefault(key, hist)
        return hist

    def index(self, repo: str) -> RepoIndex:
        with self._lock:
            idx = self._indexes.get(repo)
        if idx is None:
            idx = load_index(repo)
            with self._lock:
                self._indexes[repo] = idx
        return idx

    def repo_versions(self, repo: str, name: str) -> tuple[PackageVersion | None, list[PackageVersion]]:
        """(index version, archive versions) of ``name`` in a repository."""
        current = self.index(repo).version(name)
        archived: list[PackageVersion] = []
        try:
            archived = list_archive_versions(ArchiveLayout(archive_root(repo)), name)
        except FetchError:
            pass
        return current, archived

    # cache

    def _cached(self, key: str, populate) -> Path:
        store = self.cache_root / "src"
        store.mkdir(parents=True, exist_ok=True)
        final = store / key
        if final.exists():
            return final
        tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=store))
        try:
            populate(tmp)
            try:
                os.rename(tmp, final)
            except OSError:
                if not final.exists():
                    raise
        finally:
            if tmp.exists():
                shutil.rmtree(tmp, ignore_errors=True)
        return final

    def _unpack_tarball(self, location: str) -> Path:
        data = _io.read_bytes(location)
        return _package_root(self._cached(_digest("tar", data), lambda d: _extract_tar(data, d)))

    # fetch

    def fetch(self, entry: ManifestEntry, version=LATEST) -> SourceTree:
        """Fetch ``entry`` at ``version`` (or its newest version for ``LATEST``)."""
        tree = self._fetch(entry, version)
        with self._lock:
            self.fetched.append((entry.name, str(tree.resolved_version)))
        return tree

    def _fetch(self, entry: ManifestEntry, version=LATEST) -> SourceTree:
        if version != LATEST:
            version = PackageVersion.parse(version)
        stype = entry.source_type
        commit = None
        if stype == "local-dir":
            path = _io.local_path(entry.url)
            if path is None or not (path / "DESCRIPTION").is_file():
                raise FetchError(f"{entry.name}: no package directory at {entry.url}")
        elif stype == "tarball-url":
            path = self._unpack_tarball(entry.url)
        elif stype == "repository":
            path = self._unpack_tarball(self._repository_location(entry, version))
        elif stype == "archive":
            path = self._unpack_tarball(self._archive_location(entry.name, entry.url, version))
        else:
            hist = self.history(stype, entry.url, entry.branch)
            commit = self._scm_commit(entry, hist, version)
            key = _digest("scm", stype, entry.url, entry.subdir or ".", commit)
            path = self._cached(key, lambda d: hist.export(commit, entry.subdir, d))
        desc = self._verify(entry, path, version)
        return SourceTree(path, entry, PackageVersion.parse(desc["Version"]), commit, desc)

    def _verify(self, entry: ManifestEntry, path: Path, version) -> DcfRecord:
        try:
            desc = read_description(path / "DESCRIPTION")
        except (OSError, ParseError) as exc:
            raise FetchError(f"{entry.name}: bad DESCRIPTION at {entry.url}: {exc}") from exc
        if desc["Package"] != entry.name:
            raise FetchError(f"{entry.url} holds package {desc['Package']}, expected {entry.name}")
        found = PackageVersion.parse(desc["Version"])
        if version != LATEST and found != version:
            raise NotFoundError(entry.name, version, [(entry.url, [found])])
        return desc

    def _repository_location(self, entry: ManifestEntry, version) -> str:
        current, archived = self.repo_versions(entry.url, entry.name)
        if version == LATEST:
            candidates = ([current] if current else []) + archived
            if not candidates:
                raise NotFoundError(entry.name, version, [(entry.url, [])])
            version = max(candidates)
        if current is not None and current == version:
            raw = self.index(entry.url).records[entry.name]["Version"]
            return _io.join(entry.url, CONTRIB, tarball_name(entry.name, raw))
        for v in archived:
            if v == version:
                return ArchiveLayout(archive_root(entry.url)).location(entry.name, v.raw)
        seen = ([current] if current else []) + archived
        raise NotFoundError(entry.name, version, [(entry.url, seen)])

    def _archive_location(self, name: str, root: str, version) -> str:
        versions = list_archive_versions(ArchiveLayout(root), name)
        if version == LATEST:
            if not versions:
                raise NotFoundError(name, version, [(root, [])])
            version = versions[-1]
        for v in versions:
            if v == version:
                return ArchiveLayout(root).location(name, v.raw)
        raise NotFoundError(name, version, [(root, versions)])

    def _scm_commit(self, entry: ManifestEntry, hist: ScmHistory, version) -> str:
        if version == LATEST:
            return hist.head()
        return earliest_commit_for_version(
            entry.url, entry.branch, entry.name, entry.subdir, version, history=hist
        )

    def probe(self, entry: ManifestEntry, version=LATEST) -> Probe:
        """Identify what ``fetch`` would return without counting as a fetch."""
        if entry.is_scm:
            hist = self.history(entry.source_type, entry.url, entry.branch)
            commit = self._scm_commit(entry, hist, version if version == LATEST else PackageVersion.parse(version))
            text = hist.read_file(commit, _description_path(entry.subdir))
            if text is None:
                raise FetchError(f"{entry.name}: no DESCRIPTION at {commit[:12]}")
            desc = description_from_text(text)
            return Probe(PackageVersion.parse(desc["Version"]), commit, desc, commit)
        tree = self._fetch(entry, version)
        return Probe(tree.resolved_version, None, tree.description, tree_fingerprint(tree.path))


def tree_fingerprint(path: Path) -> str:
    """SHA-256 over relative paths and contents of every file under ``path``."""
    h = hashlib.sha256()
    for f in sorted(p for p in Path(path).rglob("*") if p.is_file()):
        h.update(f.relative_to(path).as_posix().encode())
        h.update(b"\0")
        h.update(f.read_bytes())
        h.update(b"\0")
    return h.hexdigest()


def fetch_source(entry: ManifestEntry, version=LATEST, fetcher: Fetcher | None = None) -> SourceTree:
    return (fetcher or Fetcher()).fetch(entry, version)
