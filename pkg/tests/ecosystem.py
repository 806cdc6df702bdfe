"""Synthetic package ecosystem used across the test suite.

Everything is generated from the declarations below, without going through
cohort's own writers, so the fixtures can act as independent oracles:

* ``cran``  a package repository with an archive tree beside its index
* ``bioc``  a second repository (the stage-3 fallback)
* ``rpath`` a single-package git history with versions 1.0, 1.1, 1.1, 1.0
* ``tidy``  a git monorepo with ``dplyr/`` and ``ggvis/`` subdirectories
* ``localpkg`` a plain directory

Ten packages in all, with the hard-dependency DAG::

    ggvis -> dplyr -> lazyeval, magrittr
    ggvis -> lazyeval, magrittr          (Suggests XML)
    rpath -> XML
    localpkg -> digest
    Biobase -> BiocGenerics
"""

from __future__ import annotations

import io
import os
import subprocess
import tarfile
from dataclasses import dataclass, field
from pathlib import Path

from cohort.manifest import ManifestEntry, PackageManifest


def description_text(name, version, depends=(), imports=(), suggests=(), extra=None):
    lines = [f"Package: {name}", f"Version: {version}", f"Title: The {name} package"]
    if depends:
        lines.append("Depends: " + ", ".join(depends))
    if imports:
        lines.append("Imports: " + ", ".join(imports))
    if suggests:
        lines.append("Suggests: " + ", ".join(suggests))
    lines.append("Description: Synthetic package used by the test-suite.\n    Second description line.")
    for k, v in (extra or {}).items():
        lines.append(f"{k}: {v}")
    return "\n".join(lines) + "\n"


def write_package(path: Path, name, version, marker=None, **deps) -> Path:
    path = Path(path)
    (path / "R").mkdir(parents=True, exist_ok=True)
    (path / "DESCRIPTION").write_text(description_text(name, version, **deps))
    (path / "R" / f"{name}.R").write_text(f'marker <- "{marker or name + "-" + version}"\n')
    return path


def tarball_bytes(name, version, marker=None, **deps) -> bytes:
    buf = io.BytesIO()
    files = {
        f"{name}/DESCRIPTION": description_text(name, version, **deps),
        f"{name}/R/{name}.R": f'marker <- "{marker or name + "-" + version}"\n',
    }
    with tarfile.open(fileobj=buf, mode="w:gz") as tf:
        for arcname, text in files.items():
            data = text.encode()
            info = tarfile.TarInfo(arcname)
            info.size = len(data)
            tf.addfile(info, io.BytesIO(data))
    return buf.getvalue()


def _index_record(name, version, depends=(), imports=(), suggests=(), **_):
    lines = [f"Package: {name}", f"Version: {version}"]
    if depends:
        lines.append("Depends: " + ", ".join(depends))
    if imports:
        lines.append("Imports: " + ", ".join(imports))
    if suggests:
        lines.append("Suggests: " + ", ".join(suggests))
    return "\n".join(lines) + "\n"


def make_repository(root: Path, current: list[dict], archived: list[dict] = ()) -> Path:
    """Write a repository. Each package dict has name, version and optional deps/marker."""
    contrib = Path(root) / "src" / "contrib"
    contrib.mkdir(parents=True, exist_ok=True)
    records = []
    for pkg in current:
        pkg = dict(pkg)
        name, version = pkg.pop("name"), pkg.pop("version")
        (contrib / f"{name}_{version}.tar.gz").write_bytes(tarball_bytes(name, version, **pkg))
        records.append(_index_record(name, version, **pkg))
    (contrib / "PACKAGES").write_text("\n".join(records))
    for pkg in archived:
        pkg = dict(pkg)
        name, version = pkg.pop("name"), pkg.pop("version")
        d = contrib / "Archive" / name
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{name}_{version}.tar.gz").write_bytes(tarball_bytes(name, version, **pkg))
    return Path(root)


_GIT_ENV = {
    "GIT_AUTHOR_NAME": "Fixture",
    "GIT_AUTHOR_EMAIL": "fixture@example.org",
    "GIT_COMMITTER_NAME": "Fixture",
    "GIT_COMMITTER_EMAIL": "fixture@example.org",
    "GIT_CONFIG_NOSYSTEM": "1",
}


def git(repo: Path, *args, date_index: int = 0) -> str:
    env = dict(os.environ, **_GIT_ENV)
    env["GIT_AUTHOR_DATE"] = env["GIT_COMMITTER_DATE"] = f"2014-06-{1 + date_index % 28:02d}T12:00:00+0000"
    out = subprocess.run(["git", *args], cwd=repo, env=env, check=True, capture_output=True, text=True)
    return out.stdout.strip()


def git_init(repo: Path) -> Path:
    repo.mkdir(parents=True, exist_ok=True)
    git(repo, "-c", "init.defaultBranch=main", "init", "-q")
    return repo


def git_commit(repo: Path, message: str, date_index: int = 0) -> str:
    git(repo, "add", "-A")
    git(repo, "commit", "-q", "--allow-empty", "-m", message, date_index=date_index)
    return git(repo, "rev-parse", "HEAD")


def git_package_history(repo: Path, name: str, versions: list[str], subdir: str = ".", **deps) -> list[str]:
    """One commit per version; each commit also changes the marker so trees differ."""
    commits = []
    if not (repo / ".git").exists():
        git_init(repo)
    base = repo if subdir == "." else repo / subdir
    for i, v in enumerate(versions):
        write_package(base, name, v, marker=f"{name}-{v}-c{i}", **deps)
        commits.append(git_commit(repo, f"{name} {v} (commit {i})", date_index=i))
    return commits


@dataclass
class Ecosystem:
    root: Path
    cran: Path
    bioc: Path
    rpath_git: Path
    tidy_git: Path
    localpkg: Path
    commits: dict[str, list[str]] = field(default_factory=dict)

    @property
    def dep_repos(self) -> tuple[str, str]:
        return (str(self.cran), str(self.bioc))

    def manifest(self) -> PackageManifest:
        return PackageManifest(
            (
                ManifestEntry("rpath", "git", str(self.rpath_git)),
                ManifestEntry("dplyr", "git", str(self.tidy_git), "main", "dplyr"),
                ManifestEntry("ggvis", "git", str(self.tidy_git), "main", "ggvis"),
                ManifestEntry("localpkg", "local-dir", str(self.localpkg)),
            ),
            self.dep_repos,
        )


CRAN_CURRENT = [
    dict(name="lazyeval", version="0.1.10"),
    dict(name="magrittr", version="1.5"),
    dict(name="XML", version="3.98-1.1"),
    dict(name="digest", version="0.6.8"),
]
CRAN_ARCHIVED = [
    dict(name="lazyeval", version="0.1.0"),
    dict(name="lazyeval", version="0.1.9"),
    dict(name="magrittr", version="1.0.1"),
    dict(name="XML", version="3.95-0.2"),
    dict(name="digest", version="0.6.4"),
]
BIOC_CURRENT = [
    dict(name="BiocGenerics", version="0.12.1"),
    dict(name="Biobase", version="2.26.0", depends=("R (>= 2.10)", "BiocGenerics (>= 0.3.2)")),
]

RPATH_VERSIONS = ["1.0", "1.1", "1.1", "1.0"]


def build_ecosystem(root: Path) -> Ecosystem:
    root = Path(root)
    cran = make_repository(root / "cran", CRAN_CURRENT, CRAN_ARCHIVED)
    bioc = make_repository(root / "bioc", BIOC_CURRENT)
    rpath = git_init(root / "git" / "rpath")
    commits = {"rpath": git_package_history(rpath, "rpath", RPATH_VERSIONS, imports=("XML",))}
    tidy = git_init(root / "git" / "tidy")
    commits["dplyr"] = git_package_history(
        tidy, "dplyr", ["0.3.0"], subdir="dplyr", imports=("lazyeval (>= 0.1.0)", "magrittr")
    )
    commits["ggvis"] = git_package_history(
        tidy, "ggvis", ["0.4.0"], subdir="ggvis",
        depends=("R (>= 3.0)",), imports=("dplyr (>= 0.3.0)", "lazyeval", "magrittr"), suggests=("XML",),
    )
    commits["dplyr"] += git_package_history(
        tidy, "dplyr", ["0.3.0.9000"], subdir="dplyr", imports=("lazyeval (>= 0.1.0)", "magrittr")
    )
    localpkg = write_package(root / "local" / "localpkg", "localpkg", "1.0", imports=("digest",))
    return Ecosystem(root, cran, bioc, rpath, tidy, localpkg, commits)


def local_cohort(root: Path, spec: dict[str, tuple], dep_repos=()) -> PackageManifest:
    """Manifest of local-dir packages: ``{"A": ("1.0", ["B"]), ...}`` (deps are Imports)."""
    entries = []
    for name, (version, deps) in spec.items():
        write_package(Path(root) / name, name, version, imports=tuple(deps))
        entries.append(ManifestEntry(name, "local-dir", str(Path(root) / name)))
    return PackageManifest(tuple(entries), tuple(dep_repos))


def read_marker(path: Path, name: str) -> str:
    text = (Path(path) / "R" / f"{name}.R").read_text()
    return text.split('"')[1]


@dataclass
class Staged:
    """One package version planted in all three search stages, each copy marked."""

    local: Path
    stage2: Path
    stage3: Path
    manifest: PackageManifest


def staged_fixture(root: Path, name="P", version="1.0") -> Staged:
    root = Path(root)
    local = write_package(root / "s1" / name, name, version, marker="stage1")
    stage2 = make_repository(root / "s2", [dict(name=name, version=version, marker="stage2")])
    stage3 = make_repository(root / "s3", [dict(name=name, version=version, marker="stage3")])
    m = PackageManifest((ManifestEntry(name, "local-dir", str(local)),), (str(stage2), str(stage3)))
    return Staged(local, stage2, stage3, m)
