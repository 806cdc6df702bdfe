"""Materialize cohorts as package repositories.

Two flavours share the on-disk layout ``<repo>/src/contrib/{PACKAGES,
<name>_<version>.tar.gz}``:

* just-in-time repositories, built from an install plan so that any
  index-aware installer can consume them;
* validated repositories, built incrementally from a manifest by
  :func:`make_repo`, with a build report and persistent build state.
"""

from __future__ import annotations

import datetime as dt
import gzip
import io
import logging
import os
import shlex
import shutil
import subprocess
import tarfile
import tempfile
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from cohort import _io
from cohort.errors import CohortError, CycleError, FetchError, ParseError
from cohort.index import CONTRIB, INDEX_PATH, RepoIndex, tarball_name
from cohort.manifest import LATEST, PackageManifest, SeedingManifest
from cohort.metadata import DcfRecord, PackageVersion, hard_deps, parse_dcf, read_description, serialize_dcf
from cohort.resolver import BASE_PACKAGES, InstallPlan, dep_repo_entry, locate, topo_order
from cohort.sources import Fetcher, Probe

log = logging.getLogger(__name__)

STATE_FILE = ".cohort-state.dcf"
REPORT_PATH = f"{CONTRIB}/buildreport.tsv"
LOG_DIR = f"{CONTRIB}/buildlogs"

OK, UP_TO_DATE = "ok", "up_to_date"
BUILD_FAIL, CHECK_FAIL, DEP_FAIL = "build_fail", "check_fail", "dep_fail"
PASSING = (OK, UP_TO_DATE)
STATUSES = (OK, BUILD_FAIL, CHECK_FAIL, DEP_FAIL, UP_TO_DATE)

_EXCLUDE = {".git", ".svn", ".Rproj.user"}


def pack_tarball(src: Path, name: str, version, dest_dir: Path) -> Path:
    """Write ``<name>_<version>.tar.gz`` with the tree under a ``<name>/`` prefix.

    Output is byte-reproducible: entries are sorted and all timestamps and
    owners are zeroed.
    """
    src = Path(src)
    if not (src / "DESCRIPTION").is_file():
        raise FetchError(f"{name}: {src} has no DESCRIPTION")
    dest_dir.mkdir(parents=True, exist_ok=True)
    out = dest_dir / tarball_name(name, version)
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w", format=tarfile.PAX_FORMAT) as tf:
        for root, dirs, files in os.walk(src):
            dirs[:] = sorted(d for d in dirs if d not in _EXCLUDE)
            rel = Path(root).relative_to(src)
            for fname in sorted(files):
                path = Path(root) / fname
                info = tf.gettarinfo(str(path), arcname=str(Path(name) / rel / fname))
                info.mtime = 0
                info.uid = info.gid = 0
                info.uname = info.gname = ""
                if info.isfile():
                    with open(path, "rb") as fh:
                        tf.addfile(info, fh)
                else:
                    tf.addfile(info)
    tmp = out.with_name("." + out.name + ".tmp")
    with open(tmp, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as gz:
        gz.write(buf.getvalue())
    os.replace(tmp, out)
    return out


def build_jit_repo(plan: InstallPlan, workdir, fetcher: Fetcher | None = None) -> Path:
    """Pack every package of ``plan`` into a fresh repository under ``workdir``.

    On failure everything this call created is removed again.
    """
    repo = Path(workdir)
    created = not repo.exists()
    contrib = repo / CONTRIB
    contrib_existed = contrib.exists()
    index = RepoIndex()
    try:
        contrib.mkdir(parents=True, exist_ok=True)
        for rp in plan:
            try:
                tree = rp.tree
                if tree is None or not Path(tree.path).is_dir():
                    tree = (fetcher or Fetcher()).fetch(rp.location, rp.version)
                pack_tarball(tree.path, rp.name, rp.version, contrib)
                index.add(tree.description or read_description(Path(tree.path) / "DESCRIPTION"))
            except (OSError, CohortError) as exc:
                raise FetchError(f"cannot add {rp.name} {rp.version} to repository: {exc}") from exc
        index.write(repo)
    except BaseException:
        if created:
            shutil.rmtree(repo, ignore_errors=True)
        elif not contrib_existed:
            shutil.rmtree(repo / "src", ignore_errors=True)
        raise
    return repo


# -- build state and report ------------------------------------------------


@dataclass
class BuildRecord:
    name: str
    version: PackageVersion | None = None
    commit: str | None = None
    status: str = BUILD_FAIL
    timestamp: str = ""
    log: str | None = None
    fingerprint: str | None = None

    _KEYS = (
        ("Package", "name"), ("LastBuiltVersion", "version"), ("LastBuiltCommit", "commit"),
        ("Fingerprint", "fingerprint"), ("Status", "status"), ("Timestamp", "timestamp"), ("Log", "log"),
    )

    def to_dcf(self) -> DcfRecord:
        rec = {}
        for key, attr in self._KEYS:
            value = getattr(self, attr)
            if value not in (None, ""):
                rec[key] = str(value)
        return rec

    @classmethod
    def from_dcf(cls, rec: DcfRecord) -> BuildRecord:
        kwargs = {attr: rec.get(key) for key, attr in cls._KEYS}
        if kwargs["version"]:
            kwargs["version"] = PackageVersion.parse(kwargs["version"])
        kwargs["timestamp"] = kwargs["timestamp"] or ""
        if kwargs["status"] not in STATUSES:
            raise ParseError(f"unknown build status {kwargs['status']!r}")
        return cls(**kwargs)


@dataclass
class BuildState:
    records: dict[str, BuildRecord] = field(default_factory=dict)

    @classmethod
    def load(cls, repo) -> BuildState:
        path = Path(repo) / STATE_FILE
        if not path.exists():
            return cls()
        recs = parse_dcf(path.read_text(encoding="utf-8"))
        return cls({r["Package"]: BuildRecord.from_dcf(r) for r in recs})

    def save(self, repo) -> None:
        path = Path(repo) / STATE_FILE
        tmp = path.with_name(STATE_FILE + ".tmp")
        tmp.write_text(serialize_dcf(self.records[n].to_dcf() for n in sorted(self.records)), encoding="utf-8")
        os.replace(tmp, path)

    def get(self, name: str) -> BuildRecord | None:
        return self.records.get(name)


REPORT_COLUMNS = ("name", "version", "commit", "status", "timestamp", "log")


@dataclass
class BuildReport:
    rows: list[BuildRecord] = field(default_factory=list)

    def to_tsv(self) -> str:
        lines = ["\t".join(REPORT_COLUMNS)]
        for r in self.rows:
            cells = (r.name, r.version, r.commit, r.status, r.timestamp, r.log)
            lines.append("\t".join("NA" if c in (None, "") else str(c) for c in cells))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> BuildReport:
        lines = text.splitlines()
        if not lines or tuple(lines[0].split("\t")) != REPORT_COLUMNS:
            raise ParseError("not a build report")
        rows = []
        for line in lines[1:]:
            name, version, commit, status, ts, logp = (None if c == "NA" else c for c in line.split("\t"))
            rows.append(BuildRecord(name, PackageVersion.parse(version) if version else None, commit, status, ts or "", logp))
        return cls(rows)

    @classmethod
    def load(cls, repo) -> BuildReport:
        return cls.from_tsv((Path(repo) / REPORT_PATH).read_text(encoding="utf-8"))

    @property
    def statuses(self) -> dict[str, str]:
        return {r.name: r.status for r in self.rows}


# -- incremental builds ----------------------------------------------------


def _graph(probes: dict[str, Probe], universe: Iterable[str] = ()) -> dict[str, list[str]]:
    """Hard-dependency edges among probed packages (and ``universe`` names)."""
    known = set(probes) | set(universe)
    return {
        n: sorted({d.name for d in hard_deps(p.description) if d.name in known and d.name != n})
        for n, p in probes.items()
    }


def _reverse_closure(seed: Iterable[str], graph: dict[str, list[str]]) -> set[str]:
    dependents: dict[str, set[str]] = {n: set() for n in graph}
    for n, deps in graph.items():
        for d in deps:
            dependents.setdefault(d, set()).add(n)
    out, stack = set(seed), list(seed)
    while stack:
        for dep in dependents.get(stack.pop(), ()):
            if dep not in out:
                out.add(dep)
                stack.append(dep)
    return out


def _targets(m) -> list[tuple[str, object]]:
    if isinstance(m, SeedingManifest):
        return list(m.pins)
    return [(e.name, LATEST) for e in m.entries]


def _is_stale(rec: BuildRecord | None, probe: Probe) -> bool:
    if rec is None or rec.status not in PASSING:
        return True
    if rec.version != probe.version or rec.commit != probe.commit:
        return True
    return bool(rec.fingerprint and probe.fingerprint and rec.fingerprint != probe.fingerprint)


def compute_dirty_set(m, state: BuildState, current: dict[str, Probe] | None = None, fetcher: Fetcher | None = None) -> set[str]:
    """Packages of ``m`` that need building.

    A package is dirty when it has no passing record, when its source
    version, commit or content changed since the last build, or when
    anything it depends on (transitively) is dirty. ``current`` maps names
    to probes of the present sources; missing names are probed here and
    count as dirty if probing fails.
    """
    fetcher = fetcher or Fetcher()
    current = dict(current or {})
    dirty = set()
    for name, version in _targets(m):
        if name not in current:
            try:
                entry, v, _ = locate(name, version, m, fetcher)
                current[name] = fetcher.probe(entry, v)
            except CohortError:
                dirty.add(name)
                continue
        if _is_stale(state.get(name), current[name]):
            dirty.add(name)
    names = {n for n, _ in _targets(m)}
    return _reverse_closure(dirty, _graph(current, names)) & names


@dataclass
class _Outcome:
    name: str
    status: str
    description: DcfRecord | None = None
    tarball: Path | None = None
    log: str | None = None


def _structural_check(desc: DcfRecord, available: dict[str, PackageVersion | None]) -> list[str]:
    problems = []
    for d in hard_deps(desc):
        if d.name in BASE_PACKAGES:
            continue
        if d.name not in available:
            problems.append(f"dependency {d.name} not available in repository or dependency repositories")
        elif available[d.name] is not None and not d.satisfied_by(available[d.name]):
            problems.append(f"dependency bound {d} not met by {d.name} {available[d.name]}")
    return problems


def _build_one(name, entry, version, dest: Path, check_cmd, available, fetcher: Fetcher) -> _Outcome:
    staging = dest / ".cohort-staging" / name
    shutil.rmtree(staging, ignore_errors=True)
    staging.mkdir(parents=True)
    log_rel = f"{LOG_DIR}/{name}.log"
    lines = []

    def finish(status, desc=None, tarball=None):
        (dest / LOG_DIR).mkdir(parents=True, exist_ok=True)
        (dest / log_rel).write_text("\n".join(lines) + "\n", encoding="utf-8")
        return _Outcome(name, status, desc, tarball, log_rel)

    try:
        tree = fetcher.fetch(entry, version)
        lines.append(f"fetched {name} {tree.resolved_version} from {entry.url}"
                     + (f" at {tree.commit}" if tree.commit else ""))
        tarball = pack_tarball(tree.path, name, tree.resolved_version, staging)
        lines.append(f"built {tarball.name}")
    except (OSError, CohortError) as exc:
        lines.append(f"build failed: {exc}")
        return finish(BUILD_FAIL)

    desc = tree.description
    with tempfile.TemporaryDirectory(dir=staging) as tmp:
        with tarfile.open(tarball) as tf:
            tf.extractall(tmp, **({"filter": "data"} if hasattr(tarfile, "data_filter") else {}))
        src = Path(tmp) / name
        if check_cmd:
            cmd = check_cmd.format(src=shlex.quote(str(src)))
            proc = subprocess.run(cmd, shell=True, cwd=src, capture_output=True, text=True)
            lines += [f"$ {cmd}", proc.stdout.rstrip(), proc.stderr.rstrip(), f"exit status {proc.returncode}"]
            passed = proc.returncode == 0
        else:
            try:
                desc = read_description(src / "DESCRIPTION")
                problems = _structural_check(desc, available)
            except (OSError, ParseError) as exc:
                problems = [str(exc)]
            lines += problems or ["structural validation passed"]
            passed = not problems
    return finish(OK if passed else CHECK_FAIL, desc, tarball)


def _dep_repo_packages(m) -> dict[str, PackageVersion | None]:
    out: dict[str, PackageVersion | None] = {}
    for repo in reversed(m.dep_repos):
        if dep_repo_entry(repo, "x") is not None:
            continue
        try:
            idx = RepoIndex.load(repo)
        except (CohortError, OSError):
            continue
        out.update((n, idx.version(n)) for n in idx.records)
    return out


def make_repo(
    m: PackageManifest | SeedingManifest,
    dest,
    check_cmd: str | None = None,
    parallelism: int = 1,
    fetcher: Fetcher | None = None,
) -> tuple[Path, BuildReport]:
    """Build and check the cohort ``m`` into a validated repository at ``dest``.

    Only dirty packages are fetched, built and checked, in dependency
    order and up to ``parallelism`` at a time. A package whose dependency
    failed gets ``dep_fail``; failed packages keep their last passing
    tarball in the index.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be at least 1")
    fetcher = fetcher or Fetcher()
    dest = Path(dest)
    try:
        (dest / CONTRIB).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CohortError(f"cannot create repository at {dest}: {exc}") from exc
    if not os.access(dest / CONTRIB, os.W_OK):
        raise CohortError(f"repository directory {dest} is not writable")

    state = BuildState.load(dest)
    index = RepoIndex.load_or_empty(dest)
    now = dt.datetime.now(dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")

    targets = _targets(m)
    names = [n for n, _ in targets]
    sources, probes, outcomes = {}, {}, {}
    for name, version in targets:
        try:
            entry, v, _ = locate(name, version, m, fetcher)
            probes[name] = fetcher.probe(entry, v)
            sources[name] = (entry, v)
        except CohortError as exc:
            log.warning("cannot locate %s: %s", name, exc)
            outcomes[name] = _Outcome(name, BUILD_FAIL)

    graph = _graph(probes)
    order = []
    while graph:
        try:
            order = topo_order(graph)
            break
        except CycleError as exc:
            for n in exc.cycle:
                outcomes[n] = _Outcome(n, BUILD_FAIL)
                graph.pop(n, None)
                probes.pop(n, None)
            graph = {n: [d for d in ds if d in graph] for n, ds in graph.items()}

    dirty = compute_dirty_set(m, state, probes, fetcher) - set(outcomes)
    for n in order:
        if n not in dirty:
            outcomes[n] = _Outcome(n, UP_TO_DATE)

    available = _dep_repo_packages(m)
    deps_of = _graph(probes, names)
    pending = [n for n in order if n in dirty]
    running = {}
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        while pending or running:
            for n in list(pending):
                dep_status = [outcomes.get(d) for d in deps_of[n]]
                if any(o is None for o in dep_status):
                    continue
                pending.remove(n)
                if any(o.status not in PASSING for o in dep_status):
                    outcomes[n] = _Outcome(n, DEP_FAIL)
                    continue
                snapshot = {**available, **{k: index.version(k) for k in index.records}}
                entry, v = sources[n]
                running[pool.submit(_build_one, n, entry, v, dest, check_cmd, snapshot, fetcher)] = n
            if not running:
                continue
            done, _ = wait(running, return_when=FIRST_COMPLETED)
            for fut in done:
                n = running.pop(fut)
                out = fut.result()
                outcomes[n] = out
                if out.status == OK:
                    _install_tarball(dest, index, out)

    for stale in set(index.records) - set(names):
        _remove_tarball(dest, stale, index.version(stale))
        del index.records[stale]
    index.write(dest)
    shutil.rmtree(dest / ".cohort-staging", ignore_errors=True)

    rows = []
    for n in order + sorted(set(names) - set(order)):
        out = outcomes[n]
        probe = probes.get(n)
        prev = state.get(n)
        if out.status == UP_TO_DATE:
            rec = replace(prev, status=UP_TO_DATE, timestamp=now)
        else:
            rec = BuildRecord(
                n,
                probe.version if probe else None,
                probe.commit if probe else None,
                out.status,
                now,
                out.log,
                probe.fingerprint if probe else None,
            )
        rows.append(rec)
        state.records[n] = rec
    for gone in set(state.records) - set(names):
        del state.records[gone]
    report = BuildReport(rows)
    (dest / REPORT_PATH).write_text(report.to_tsv(), encoding="utf-8")
    state.save(dest)
    return dest, report


def _remove_tarball(dest: Path, name: str, version) -> None:
    if version is None:
        return
    raw = version.raw if isinstance(version, PackageVersion) else version
    (dest / CONTRIB / tarball_name(name, raw)).unlink(missing_ok=True)


def _install_tarball(dest: Path, index: RepoIndex, out: _Outcome) -> None:
    old = index.records.get(out.name)
    target = dest / CONTRIB / out.tarball.name
    if old is not None and tarball_name(out.name, old["Version"]) != out.tarball.name:
        _remove_tarball(dest, out.name, old["Version"])
    os.replace(out.tarball, target)
    index.add(out.description)


def read_index(repo) -> RepoIndex:
    return RepoIndex.load(repo)


def index_path(repo) -> Path:
    path = _io.local_path(repo)
    return path / INDEX_PATH
