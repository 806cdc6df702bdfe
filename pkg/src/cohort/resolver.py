"""Turn package requests into ordered install plans.

Versions are looked up in three stages, first hit wins:

1. the manifest's own entries (for SCM entries this includes history),
2. the first dependency repository: its index, then its archive,
3. the remaining dependency repositories, including SCM histories.

A dependency repository string is either a package repository root or an
SCM history written ``git+URL`` / ``svn-like-scm+URL``. If the URL holds a
``{name}`` placeholder each package has its own history there; otherwise
packages live in subdirectories named after them.
"""

from __future__ import annotations

import csv
import datetime as dt
import heapq
import io
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from cohort import _io
from cohort.errors import ConstraintError, CycleError, FetchError, LoadError, NotFoundError, ParseError
from cohort.index import archive_root
from cohort.manifest import LATEST, SCM_TYPES, ManifestEntry, PackageManifest, SeedingManifest
from cohort.metadata import DepConstraint, PackageVersion, hard_deps, parse_dcf, parse_dep_field
from cohort.sources import Fetcher, SourceTree

# Shipped with the language runtime; never resolved or installed.
BASE_PACKAGES = frozenset({
    "R", "base", "compiler", "datasets", "grDevices", "graphics", "grid", "methods",
    "parallel", "splines", "stats", "stats4", "tcltk", "tools", "utils",
})


@dataclass(frozen=True)
class ResolvedPackage:
    name: str
    version: PackageVersion
    location: ManifestEntry
    commit: str | None = None
    stage: int = 1
    deps: tuple[DepConstraint, ...] = ()
    suggests: tuple[DepConstraint, ...] = ()
    tree: SourceTree | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class InstallPlan:
    packages: tuple[ResolvedPackage, ...] = ()

    def __iter__(self):
        return iter(self.packages)

    def __len__(self):
        return len(self.packages)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.packages]

    def pairs(self) -> set[tuple[str, PackageVersion]]:
        return {(p.name, p.version) for p in self.packages}

    def get(self, name: str) -> ResolvedPackage | None:
        for p in self.packages:
            if p.name == name:
                return p
        return None


def _from_tree(tree: SourceTree, entry: ManifestEntry, stage: int) -> ResolvedPackage:
    desc = tree.description
    return ResolvedPackage(
        name=tree.origin.name,
        version=tree.resolved_version,
        location=entry,
        commit=tree.commit,
        stage=stage,
        deps=tuple(hard_deps(desc)),
        suggests=tuple(parse_dep_field(desc.get("Suggests"))),
        tree=tree,
    )


def dep_repo_entry(repo: str, name: str) -> ManifestEntry | None:
    """Manifest entry for ``name`` in an SCM dependency repository, else None."""
    scheme, sep, url = repo.partition("+")
    if not sep or scheme not in SCM_TYPES:
        return None
    if "{name}" in url:
        return ManifestEntry(name, scheme, url.replace("{name}", name))
    return ManifestEntry(name, scheme, url, subdir=name)


def _dep_repo_candidates(repo: str, name: str, fetcher: Fetcher):
    """``(version, entry)`` for every copy of ``name`` in one dependency repository.

    Repository copies come index first, then archive; history copies come
    tip first, then root to tip.
    """
    scm = dep_repo_entry(repo, name)
    if scm is not None:
        try:
            hist = fetcher.history(scm.source_type, scm.url, scm.branch)
            history = hist.version_history(scm.subdir)
        except FetchError:
            return []
        versions = [v for _, v in history if v is not None]
        if not versions:
            return []
        ordered = [versions[-1]] + [v for v in dict.fromkeys(versions) if v != versions[-1]]
        return [(v, scm) for v in ordered]
    current, archived = fetcher.repo_versions(repo, name)
    out = []
    if current is not None:
        out.append((current, ManifestEntry(name, "repository", repo)))
    arch = ManifestEntry(name, "archive", archive_root(repo))
    out.extend((v, arch) for v in reversed(archived))
    return out


def locate(name: str, version, m: PackageManifest | SeedingManifest, fetcher: Fetcher | None = None):
    """Run the three-stage search without fetching.

    Returns ``(entry, version, stage)`` where ``entry`` is the source to
    fetch and ``version`` the concrete version to ask it for (``LATEST``
    only for stage-1 entries, which float to their own newest copy).
    """
    fetcher = fetcher or Fetcher()
    if isinstance(m, SeedingManifest):
        m = m.base
    if version != LATEST:
        version = PackageVersion.parse(version)
    searched = []

    entry = m.entry(name)
    if entry is None:
        searched.append(("stage 1: manifest (no entry)", []))
    else:
        try:
            fetcher.probe(entry, version)
            return entry, version, 1
        except NotFoundError as exc:
            searched.extend((f"stage 1: {loc}", seen) for loc, seen in exc.searched)
        except FetchError as exc:
            searched.append((f"stage 1: {entry.url} (unreachable: {exc})", []))

    for stage, repos in ((2, m.dep_repos[:1]), (3, m.dep_repos[1:])):
        candidates = []
        for repo in repos:
            try:
                found = _dep_repo_candidates(repo, name, fetcher)
            except FetchError as exc:
                searched.append((f"stage {stage}: {repo} (unreachable: {exc})", []))
                continue
            searched.append((f"stage {stage}: {repo}", sorted({v for v, _ in found})))
            candidates.extend(found)
        if not repos:
            searched.append((f"stage {stage}: no repositories", []))
        if not candidates:
            continue
        if version == LATEST:
            newest = max(v for v, _ in candidates)
            src = next(src for v, src in candidates if v == newest)
            return src, newest, stage
        for v, src in candidates:
            if v == version:
                return src, v, stage
    raise NotFoundError(name, version, searched)


def find_version(name: str, version, m: PackageManifest | SeedingManifest, fetcher: Fetcher | None = None) -> ResolvedPackage:
    """Locate ``name`` at ``version`` (or ``LATEST``) by the three-stage search and fetch it."""
    fetcher = fetcher or Fetcher()
    entry, v, stage = locate(name, version, m, fetcher)
    return _from_tree(fetcher.fetch(entry, v), entry, stage)


def topo_order(deps: Mapping[str, Iterable[str]]) -> list[str]:
    """Dependencies-first order of ``deps`` (node -> its dependencies).

    Ties are broken by name. Edges to nodes outside ``deps`` are ignored.
    """
    nodes = set(deps)
    indegree = {n: 0 for n in nodes}
    dependents = defaultdict(list)
    for node, ds in deps.items():
        for d in set(ds):
            if d in nodes and d != node:
                indegree[node] += 1
                dependents[d].append(node)
            elif d == node:
                raise CycleError([node, node])
    ready = [n for n, k in indegree.items() if k == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for dep in dependents[n]:
            indegree[dep] -= 1
            if indegree[dep] == 0:
                heapq.heappush(ready, dep)
    if len(order) != len(nodes):
        raise CycleError(_find_cycle({n: [d for d in deps[n] if d in nodes] for n in nodes if indegree[n]}))
    return order


def _find_cycle(graph: Mapping[str, list[str]]) -> list[str]:
    for start in sorted(graph):
        path, on_path = [start], {start}
        stack = [iter(sorted(graph[start]))]
        while stack:
            nxt = next(stack[-1], None)
            if nxt is None:
                stack.pop()
                on_path.discard(path.pop())
                continue
            if nxt in on_path:
                return path[path.index(nxt):] + [nxt]
            if nxt in graph:
                path.append(nxt)
                on_path.add(nxt)
                stack.append(iter(sorted(graph[nxt])))
    return sorted(graph)


def normalize_targets(targets) -> dict[str, object]:
    if isinstance(targets, Mapping):
        items = targets.items()
    else:
        items = ((t, LATEST) if isinstance(t, str) else t for t in targets)
    return {name: (v if v == LATEST else PackageVersion.parse(v)) for name, v in items}


def resolve(
    targets,
    m: PackageManifest | SeedingManifest,
    include_suggests: bool = False,
    *,
    pins: Mapping[str, object] | None = None,
    fetcher: Fetcher | None = None,
    ignore: Iterable[str] = BASE_PACKAGES,
    workers: int = 4,
) -> InstallPlan:
    """Resolve ``targets`` and their hard dependencies into an install plan.

    ``targets`` is a mapping or iterable of names / ``(name, version)``
    pairs. Dependencies float to the newest version unless ``pins`` (or
    the pins of a seeding manifest) fix them. Version bounds are checked
    after resolution, never solved for.
    """
    fetcher = fetcher or Fetcher()
    wanted = normalize_targets(targets)
    if not wanted:
        raise ValueError("nothing to resolve")
    pinned = {}
    if isinstance(m, SeedingManifest):
        pinned.update((n, v) for n, v in m.pins if v != LATEST)
        m = m.base
    pinned.update(pins or {})
    ignore = set(ignore)

    resolved: dict[str, ResolvedPackage] = {}
    required_by: dict[str, list[tuple[str, DepConstraint]]] = defaultdict(list)
    level = sorted(wanted)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        while level:
            requests = [(n, wanted.get(n, pinned.get(n, LATEST))) for n in level]
            found = list(pool.map(lambda r: find_version(r[0], r[1], m, fetcher), requests))
            nxt = set()
            for rp in found:
                resolved[rp.name] = rp
                deps = list(rp.deps)
                if include_suggests and rp.name in wanted:
                    deps += rp.suggests
                for d in deps:
                    if d.name in ignore:
                        continue
                    required_by[d.name].append((rp.name, d))
                    if d.name not in resolved:
                        nxt.add(d.name)
            level = sorted(nxt - set(resolved))

    for name, reqs in required_by.items():
        have = resolved[name].version
        for requirer, c in reqs:
            if not c.satisfied_by(have):
                raise ConstraintError(f"{requirer} requires {c} but {name} {have} was resolved")

    graph = {n: [d.name for d in rp.deps if d.name in resolved] for n, rp in resolved.items()}
    return InstallPlan(tuple(resolved[n] for n in topo_order(graph)))


# -- historical snapshots --------------------------------------------------


@dataclass(frozen=True)
class RepoEvent:
    name: str
    version: PackageVersion
    date: dt.date


def _parse_event(name: str, version: str, date: str, row: int) -> RepoEvent:
    try:
        return RepoEvent(name.strip(), PackageVersion.parse(version), dt.date.fromisoformat(date.strip()[:10]))
    except (ParseError, ValueError) as exc:
        raise LoadError(f"bad event: {exc}", row=row) from None


def parse_event_log(text: str) -> list[RepoEvent]:
    """Parse a ``name<TAB>version<TAB>iso-date`` log (or DCF with Package/Version/Date)."""
    first = next((ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")), "")
    events = []
    if "\t" not in first and ":" in first:
        try:
            records = parse_dcf(text)
        except ParseError as exc:
            raise LoadError(str(exc)) from None
        for row, rec in enumerate(records, start=1):
            if not {"Package", "Version", "Date"} <= rec.keys():
                raise LoadError("record needs Package, Version and Date", row=row)
            events.append(_parse_event(rec["Package"], rec["Version"], rec["Date"], row))
    else:
        for row, cells in enumerate(csv.reader(io.StringIO(text), delimiter="\t"), start=1):
            if not cells or not "".join(cells).strip() or cells[0].startswith("#"):
                continue
            if row == 1 and [c.strip().lower() for c in cells] == ["name", "version", "date"]:
                continue
            if len(cells) != 3:
                raise LoadError(f"expected 3 columns, found {len(cells)}", row=row)
            events.append(_parse_event(*cells, row=row))
    seen = set()
    for ev in events:
        if (ev.name, ev.version) in seen:
            raise LoadError(f"duplicate event for {ev.name} {ev.version}")
        seen.add((ev.name, ev.version))
    return sorted(events, key=lambda e: (e.date, e.name))


def read_event_log(src) -> list[RepoEvent]:
    return parse_event_log(_io.read_text(src))


def cohort_at_date(log, date) -> tuple[tuple[str, PackageVersion], ...]:
    """Pins of the newest version of every package released on or before ``date``."""
    if isinstance(log, str):
        log = parse_event_log(log)
    if isinstance(date, str):
        date = dt.date.fromisoformat(date)
    best: dict[str, PackageVersion] = {}
    for ev in log:
        if ev.date <= date and (ev.name not in best or ev.version > best[ev.name]):
            best[ev.name] = ev.version
    return tuple(sorted(best.items()))


def snapshot_manifest(log, date, base: PackageManifest | None = None) -> SeedingManifest:
    return SeedingManifest(base or PackageManifest(), cohort_at_date(log, date))

