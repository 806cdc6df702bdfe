"""Named package libraries with switching, seeding and provenance.

Store layout::

    <root>/.lock
    <root>/.state/current        name of the active library
    <root>/.state/stack          libraries to switch back to, oldest first
    <root>/<name>/meta.dcf       Name, Parent (inheritance only), Created
    <root>/<name>/lib/<pkg>/     installed packages

The reserved library ``original`` stands for the environment in use before
the tool was involved; it always exists and sits at the bottom of the stack.
"""

from __future__ import annotations

import datetime as dt
import fcntl
import os
import re
import shlex
import shutil
import tarfile
import tempfile
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from cohort import _io
from cohort.errors import CohortError, StoreError
from cohort.index import INDEX_PATH, RepoIndex, archive_root, tarball_name
from cohort.manifest import (
    DEFAULT_DEP_REPOS,
    LATEST,
    ManifestEntry,
    PackageManifest,
    SeedingManifest,
    load_manifest,
)
from cohort.metadata import DcfRecord, PackageVersion, hard_deps, parse_dcf, read_description, serialize_dcf
from cohort.repostore import build_jit_repo
from cohort.resolver import InstallPlan, locate, normalize_targets, resolve
from cohort.sources import ArchiveLayout, Fetcher, list_archive_versions

ORIGINAL = "original"
LIBRARY_PATH_VAR = "COHORT_LIBRARY_PATH"
PROVENANCE_FIELDS = (
    "InstallSourceType",
    "InstallSourceLocation",
    "InstallBranch",
    "InstallSubdir",
    "InstallCommit",
    "InstallDate",
)

_LIB_NAME_RE = re.compile(r"[A-Za-z0-9_][A-Za-z0-9._-]*")


def default_store_root() -> Path:
    if os.environ.get("COHORT_ROOT"):
        return Path(os.environ["COHORT_ROOT"])
    base = os.environ.get("XDG_DATA_HOME") or os.path.join(os.path.expanduser("~"), ".local", "share")
    return Path(base) / "cohort"


@dataclass(frozen=True)
class InstalledPackage:
    name: str
    version: PackageVersion
    library: str
    path: Path
    description: DcfRecord = field(compare=False, repr=False)

    @property
    def has_provenance(self) -> bool:
        return "InstallSourceType" in self.description


@dataclass(frozen=True)
class SwitchResult:
    name: str
    path: Path
    package_count: int
    previous: str | None
    library_path: str
    created: bool = False
    reverted: bool = False

    @property
    def message(self) -> str:
        verb = "Reverted to" if self.reverted else "Switched to"
        return (
            f"{verb} the '{self.name}' computing environment. "
            f"{self.package_count} packages are currently available."
        )

    def activation(self) -> str:
        """Shell lines that make the library active; safe to ``eval``."""
        return f"export {LIBRARY_PATH_VAR}={shlex.quote(self.library_path)}\n"


@dataclass
class InstallSummary:
    library: str
    installed: list[tuple[str, PackageVersion]] = field(default_factory=list)
    skipped: list[tuple[str, PackageVersion]] = field(default_factory=list)

    @property
    def noop(self) -> bool:
        return not self.installed


@dataclass(frozen=True)
class RiskRow:
    name: str
    installed: PackageVersion
    available: PackageVersion
    magnitude: str
    reverse_dependents: int


def update_magnitude(installed: PackageVersion, available: PackageVersion) -> str:
    """major/minor/patch by the index of the first differing version component."""
    a, b = installed.components, available.components
    for i in range(max(len(a), len(b))):
        if (a[i] if i < len(a) else None) != (b[i] if i < len(b) else None):
            return ("major", "minor")[i] if i < 2 else "patch"
    return "none"


def _stamp(desc: DcfRecord, entry: ManifestEntry, commit: str | None, when: str) -> DcfRecord:
    out = {k: v for k, v in desc.items() if k not in PROVENANCE_FIELDS}
    out["InstallSourceType"] = entry.source_type
    out["InstallSourceLocation"] = entry.url
    if entry.is_scm:
        out["InstallBranch"] = entry.branch
        out["InstallSubdir"] = entry.subdir
        if commit:
            out["InstallCommit"] = commit
    out["InstallDate"] = when
    return out


class LibraryStore:
    """A directory of named libraries plus the switch stack.

    Mutating methods hold an exclusive lock on ``<root>/.lock``; readers
    take a shared one.
    """

    def __init__(self, root=None, dep_repos: Iterable[str] = DEFAULT_DEP_REPOS, fetcher: Fetcher | None = None):
        self.root = Path(root or default_store_root())
        self.dep_repos = tuple(dep_repos)
        self.fetcher = fetcher or Fetcher()
        self._mutex = threading.RLock()
        self._depth = 0
        self._lock_fh = None
        self.root.mkdir(parents=True, exist_ok=True)
        with self.lock():
            (self.root / ".state").mkdir(exist_ok=True)
            if not self.exists(ORIGINAL):
                self._create(ORIGINAL)
            if not (self.root / ".state" / "current").exists():
                self._write_state(ORIGINAL, [])

    # locking and state files

    @contextmanager
    def lock(self, shared: bool = False):
        with self._mutex:
            if self._depth == 0:
                self._lock_fh = open(self.root / ".lock", "a+")
                fcntl.flock(self._lock_fh, fcntl.LOCK_SH if shared else fcntl.LOCK_EX)
            self._depth += 1
            try:
                yield
            finally:
                self._depth -= 1
                if self._depth == 0:
                    fcntl.flock(self._lock_fh, fcntl.LOCK_UN)
                    self._lock_fh.close()
                    self._lock_fh = None

    def _read_lines(self, fname: str) -> list[str]:
        path = self.root / ".state" / fname
        if not path.exists():
            return []
        return [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]

    def _write_state(self, current: str, stack: list[str]) -> None:
        state = self.root / ".state"
        for fname, lines in (("stack", stack), ("current", [current])):
            tmp = state / (fname + ".tmp")
            tmp.write_text("".join(f"{ln}\n" for ln in lines), encoding="utf-8")
            os.replace(tmp, state / fname)

    @property
    def current(self) -> str:
        lines = self._read_lines("current")
        return lines[0] if lines else ORIGINAL

    @property
    def stack(self) -> list[str]:
        return self._read_lines("stack")

    # libraries

    @staticmethod
    def _check_name(name: str) -> None:
        if not name or name in (".", "..") or not _LIB_NAME_RE.fullmatch(name):
            raise StoreError(f"invalid library name {name!r}")

    def exists(self, name: str) -> bool:
        return (self.root / name / "meta.dcf").is_file()

    def libraries(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if (p / "meta.dcf").is_file())

    def lib_dir(self, name: str) -> Path:
        return self.root / name / "lib"

    def meta(self, name: str) -> DcfRecord:
        if not self.exists(name):
            raise StoreError(f"no library named {name!r}")
        return read_description_like(self.root / name / "meta.dcf")

    def _create(self, name: str, parent: str | None = None) -> Path:
        lib = self.root / name
        (lib / "lib").mkdir(parents=True, exist_ok=True)
        meta = {"Name": name}
        if parent:
            meta["Parent"] = parent
        meta["Created"] = dt.datetime.now(dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        (lib / "meta.dcf").write_text(serialize_dcf([meta]), encoding="utf-8")
        return lib

    def _remove(self, name: str) -> None:
        if name == ORIGINAL:
            raise StoreError("the original library cannot be removed")
        shutil.rmtree(self.root / name, ignore_errors=True)

    def remove_library(self, name: str) -> None:
        with self.lock():
            if name == self.current or name in self.stack:
                raise StoreError(f"library {name!r} is active or on the switch stack")
            self._remove(name)

    def chain(self, name: str) -> list[str]:
        """``name`` followed by its inheritance ancestors."""
        out = []
        while name:
            if name in out:
                raise StoreError(f"inheritance cycle: {' -> '.join(out + [name])}")
            out.append(name)
            name = self.meta(name).get("Parent")
        return out

    def library_path(self, name: str) -> str:
        return ":".join(str(self.lib_dir(n)) for n in self.chain(name))

    def _own_packages(self, name: str) -> dict[str, InstalledPackage]:
        out = {}
        lib = self.lib_dir(name)
        if not lib.is_dir():
            return out
        for d in sorted(lib.iterdir()):
            desc_path = d / "DESCRIPTION"
            if d.name.startswith(".") or not desc_path.is_file():
                continue
            try:
                desc = read_description(desc_path)
            except (OSError, CohortError):
                continue
            out[desc["Package"]] = InstalledPackage(
                desc["Package"], PackageVersion.parse(desc["Version"]), name, d, desc
            )
        return out

    def installed(self, name: str | None = None, own_only: bool = False) -> dict[str, InstalledPackage]:
        """Packages visible from library ``name``; the child copy shadows ancestors."""
        name = name or self.current
        if own_only:
            return self._own_packages(name)
        visible: dict[str, InstalledPackage] = {}
        for lib in self.chain(name):
            for pkg, info in self._own_packages(lib).items():
                visible.setdefault(pkg, info)
        return visible

    def lookup(self, lib: str, package: str) -> InstalledPackage | None:
        return self.installed(lib).get(package)

    # switching

    def switch_to(self, name: str, seed=None, pkgs: Iterable[str] | None = None) -> SwitchResult:
        """Make ``name`` the active library, creating and seeding it if absent.

        A seed given for a library that already exists is ignored. If
        seeding a new library fails, the library is removed and neither
        the stack nor the active library change.
        """
        self._check_name(name)
        with self.lock():
            previous = self.current
            created = False
            if not self.exists(name):
                self._create(name)
                created = True
                if seed is not None:
                    try:
                        source, targets = self._seed_targets(seed, pkgs)
                        if targets:
                            self.install_packages(targets, source, name)
                    except BaseException:
                        self._remove(name)
                        raise
            self._write_state(name, self.stack + [previous])
            return self._result(name, previous, created=created)

    def switch_back(self) -> SwitchResult:
        with self.lock():
            stack = self.stack
            if not stack:
                raise StoreError("already at original environment")
            previous = self.current
            target = stack.pop()
            self._write_state(target, stack)
            return self._result(target, previous, reverted=True)

    def _result(self, name: str, previous: str | None, **kw) -> SwitchResult:
        return SwitchResult(
            name, self.lib_dir(name), len(self.installed(name)), previous, self.library_path(name), **kw
        )

    def seed_source(self, seed):
        """Turn a seed argument into a manifest.

        Accepts a manifest object, a repository location (a directory or URL
        holding ``src/contrib/PACKAGES``) or a manifest file path/URL.
        """
        if isinstance(seed, (PackageManifest, SeedingManifest)):
            return seed
        seed = os.fspath(seed)
        if _io.exists(_io.join(seed, INDEX_PATH)):
            idx = RepoIndex.load(seed)
            pins = tuple((n, idx.version(n)) for n in idx.records)
            return SeedingManifest(PackageManifest((), (seed,) + self.dep_repos), pins)
        return load_manifest(seed)

    def _seed_targets(self, seed, pkgs):
        source = self.seed_source(seed)
        if isinstance(source, SeedingManifest):
            targets = dict(source.pins)
        else:
            targets = {e.name: LATEST for e in source.entries}
        if pkgs is not None:
            targets = {n: targets.get(n, LATEST) for n in pkgs}
        return source, targets

    # derivation

    def derive_library(self, new: str, source: str, mode: str = "branch") -> Path:
        """Create ``new`` from ``source`` by copying (branch) or by parent link (inherit)."""
        self._check_name(new)
        if mode not in ("branch", "inherit"):
            raise ValueError(f"unknown derivation mode {mode!r}")
        with self.lock():
            if not self.exists(source):
                raise StoreError(f"no library named {source!r}")
            if self.exists(new):
                raise StoreError(f"library {new!r} already exists")
            if mode == "inherit":
                self.chain(source)
                return self._create(new, parent=source)
            lib = self._create(new)
            shutil.rmtree(lib / "lib")
            shutil.copytree(self.lib_dir(source), lib / "lib", symlinks=True)
            return lib

    # installation

    def _as_manifest(self, source):
        if isinstance(source, (PackageManifest, SeedingManifest)):
            return source
        return self.seed_source(source)

    def install_packages(self, pkgs, source, lib: str | None = None) -> InstallSummary:
        """Resolve ``pkgs`` against ``source``, build a JIT repository and install from it.

        Packages already visible at the resolved version, and unpinned
        dependencies whose installed version meets every bound, are
        skipped. A failure undoes everything this call installed.
        """
        lib = lib or self.current
        with self.lock():
            if not self.exists(lib):
                raise StoreError(f"no library named {lib!r}")
            m = self._as_manifest(source)
            targets = normalize_targets(pkgs)
            plan = resolve(targets, m, fetcher=self.fetcher)
            pinned = set(targets) | ({n for n, v in m.pins if v != LATEST} if isinstance(m, SeedingManifest) else set())
            bounds: dict[str, list] = {}
            for rp in plan:
                for d in rp.deps:
                    bounds.setdefault(d.name, []).append(d)
            visible = self.installed(lib)
            summary = InstallSummary(lib)
            todo = []
            for rp in plan:
                have = visible.get(rp.name)
                if have is not None and (
                    have.version == rp.version
                    or (rp.name not in pinned and all(c.satisfied_by(have.version) for c in bounds.get(rp.name, ())))
                ):
                    summary.skipped.append((rp.name, have.version))
                else:
                    todo.append(rp)
            if not todo:
                return summary
            with tempfile.TemporaryDirectory(prefix=".jit-", dir=self.root) as tmp:
                repo = build_jit_repo(InstallPlan(tuple(todo)), Path(tmp) / "repo", self.fetcher)
                self._unpack_all(todo, repo, lib, Path(tmp), summary)
            return summary

    def _unpack_all(self, todo, repo: Path, lib: str, tmp: Path, summary: InstallSummary) -> None:
        libdir = self.lib_dir(lib)
        backups = tmp / "replaced"
        backups.mkdir()
        done = []
        when = dt.datetime.now(dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        try:
            for rp in todo:
                staging = tmp / "unpack" / rp.name
                with tarfile.open(repo / "src" / "contrib" / tarball_name(rp.name, rp.version.raw)) as tf:
                    tf.extractall(staging, **({"filter": "data"} if hasattr(tarfile, "data_filter") else {}))
                pkgdir = staging / rp.name
                desc = read_description(pkgdir / "DESCRIPTION")
                (pkgdir / "DESCRIPTION").write_text(
                    serialize_dcf([_stamp(desc, rp.location, rp.commit, when)]), encoding="utf-8"
                )
                dest = libdir / rp.name
                if dest.exists():
                    os.replace(dest, backups / rp.name)
                done.append(rp.name)
                shutil.move(str(pkgdir), dest)
                summary.installed.append((rp.name, rp.version))
        except BaseException:
            for name in reversed(done):
                shutil.rmtree(libdir / name, ignore_errors=True)
                if (backups / name).exists():
                    os.replace(backups / name, libdir / name)
            summary.installed.clear()
            raise

    # manifests from libraries, and reports

    def lib_manifest(self, lib: str | None = None, fallback: PackageManifest | None = None):
        """Reconstruct a seeding manifest from what is installed in ``lib``.

        Returns ``(manifest, unresolved)``. Packages without recorded
        provenance are matched against the dependency repositories, then
        against ``fallback``; those matching nothing are listed in
        ``unresolved`` and left out.
        """
        lib = lib or self.current
        with self.lock(shared=True):
            visible = self.installed(lib)
        entries, pins, unresolved = [], [], []
        for name in sorted(visible):
            pkg = visible[name]
            entry = self._provenance_entry(pkg) or self._repo_entry(name) or (fallback.entry(name) if fallback else None)
            if entry is None:
                unresolved.append(name)
                continue
            entries.append(entry)
            pins.append((name, pkg.version))
        return SeedingManifest(PackageManifest(tuple(entries), self.dep_repos), tuple(pins)), unresolved

    @staticmethod
    def _provenance_entry(pkg: InstalledPackage) -> ManifestEntry | None:
        d = pkg.description
        if "InstallSourceType" not in d:
            return None
        stype = d["InstallSourceType"]
        scm = stype in ("git", "svn-like-scm")
        try:
            return ManifestEntry(
                pkg.name,
                stype,
                d.get("InstallSourceLocation"),
                d.get("InstallBranch") if scm else None,
                d.get("InstallSubdir") if scm else None,
            )
        except ValueError:
            # damaged provenance; fall back to the name heuristics
            return None

    def _repo_entry(self, name: str) -> ManifestEntry | None:
        for repo in self.dep_repos:
            try:
                if name in self.fetcher.index(repo):
                    return ManifestEntry(name, "repository", repo)
                if _io.local_path(repo) is not None and list_archive_versions(ArchiveLayout(archive_root(repo)), name):
                    return ManifestEntry(name, "repository", repo)
            except CohortError:
                continue
        return None

    def update_risk_report(self, lib: str | None, m: PackageManifest | SeedingManifest) -> list[RiskRow]:
        """One row per installed package that has a newer version available.

        ``magnitude`` and the reverse-dependent count are heuristics for
        the impact of taking the update.
        """
        lib = lib or self.current
        with self.lock(shared=True):
            visible = self.installed(lib)
        dependents: dict[str, set[str]] = {n: set() for n in visible}
        for n, pkg in visible.items():
            for d in hard_deps(pkg.description):
                if d.name in dependents:
                    dependents[d.name].add(n)
        rows = []
        for name in sorted(visible):
            try:
                _, available, _ = locate(name, LATEST, m, self.fetcher)
                if available == LATEST:
                    entry = m.base.entry(name) if isinstance(m, SeedingManifest) else m.entry(name)
                    available = self.fetcher.probe(entry).version
            except CohortError:
                continue
            installed = visible[name].version
            if available <= installed:
                continue
            seen, stack = set(), [name]
            while stack:
                for dep in dependents.get(stack.pop(), ()):
                    if dep not in seen:
                        seen.add(dep)
                        stack.append(dep)
            seen.discard(name)
            rows.append(RiskRow(name, installed, available, update_magnitude(installed, available), len(seen)))
        return rows


def read_description_like(path: Path) -> DcfRecord:
    recs = parse_dcf(path.read_text(encoding="utf-8"))
    return recs[0] if recs else {}
