"""Acceptance criteria, one test each, with their runtime budgets.

Every test prints a single ``criterion N ...: PASS|FAIL`` line, visible
even without ``-s``. Budgets cover the whole test body including fixture
construction done inside it.
"""

import datetime as dt
import hashlib
import random
import re
import time
from contextlib import contextmanager
from pathlib import Path

import pytest

from cohort.cli import run
from cohort.libenv import ORIGINAL, LibraryStore
from cohort.manifest import (
    LATEST,
    SOURCE_TYPES,
    ManifestEntry,
    PackageManifest,
    SeedingManifest,
    manifest_from_text,
    manifest_to_text,
)
from cohort.metadata import PackageVersion, compare_versions
from cohort.repostore import build_jit_repo, make_repo
from cohort.resolver import cohort_at_date, find_version, resolve
from cohort.sources import Fetcher, earliest_commit_for_version
from ecosystem import (
    git,
    git_commit,
    git_package_history,
    local_cohort,
    read_marker,
    staged_fixture,
    write_package,
)


@pytest.fixture
def criterion(capsys):
    @contextmanager
    def measure(number, title, budget):
        start = time.perf_counter()
        ok = False
        try:
            yield
            ok = True
        finally:
            elapsed = time.perf_counter() - start
            passed = ok and elapsed < budget
            with capsys.disabled():
                print(f"\ncriterion {number} [{title}]: {'PASS' if passed else 'FAIL'} ({elapsed:.2f}s, budget {budget}s)")
        assert elapsed < budget, f"criterion {number} took {elapsed:.2f}s, budget {budget}s"

    return measure


# -- 1 -------------------------------------------------------------------


def random_manifest(rng: random.Random):
    def word(n=6):
        return rng.choice("abcdefghij") + "".join(rng.choice("abcdefghij0123456789.") for _ in range(rng.randint(0, n)))

    names = list(dict.fromkeys(word() for _ in range(rng.randint(0, 8))))
    entries = []
    for n in names:
        stype = rng.choice(SOURCE_TYPES)
        url = rng.choice(["https://git.example.org/", "/srv/src/", "file:///opt/"]) + word(10)
        extra = rng.choice([None, "opt=" + word(3)])
        if stype in ("git", "svn-like-scm"):
            entries.append(ManifestEntry(n, stype, url, rng.choice(["HEAD", "devel", "release_1"]), rng.choice([".", "pkg", "a/b"]), extra))
        else:
            entries.append(ManifestEntry(n, stype, url, extra=extra))
    repos = tuple(f"https://repo{i}.example.org" for i in range(rng.randint(0, 3)))
    base = PackageManifest(tuple(entries), repos)
    if rng.random() < 0.5:
        return base
    chosen = rng.sample(names, rng.randint(0, len(names))) + [f"dep{i}" for i in range(rng.randint(0, 3))]
    pins = tuple(
        (n, LATEST if rng.random() < 0.2 else ".".join(str(rng.randint(0, 15)) for _ in range(rng.randint(1, 4))))
        for n in chosen
    )
    return SeedingManifest(base, pins)


def test_criterion_1_manifest_round_trip(criterion):
    with criterion(1, "manifest round-trip, 200 manifests", 5):
        rng = random.Random(1)
        kinds = set()
        for _ in range(200):
            m = random_manifest(rng)
            kinds.add(type(m).__name__)
            text = manifest_to_text(m)
            back = manifest_from_text(text)
            assert back == m
            assert manifest_to_text(back).encode() == text.encode()
        assert kinds == {"PackageManifest", "SeedingManifest"}


# -- 2 -------------------------------------------------------------------


def componentwise(a: str, b: str) -> int:
    xs = [int(t) for t in re.split("[.-]", a)]
    ys = [int(t) for t in re.split("[.-]", b)]
    for x, y in zip(xs, ys):
        if x != y:
            return (x > y) - (x < y)
    return (len(xs) > len(ys)) - (len(xs) < len(ys))


def test_criterion_2_version_order(criterion):
    with criterion(2, "version order vs componentwise oracle, 1000 pairs", 1):
        rng = random.Random(2)

        def rv():
            parts = [str(rng.randint(0, 12)) for _ in range(rng.randint(1, 5))]
            return "".join(p + rng.choice(".-") for p in parts[:-1]) + parts[-1]

        pairs = [("1.2", "1.2.0")] + [(rv(), rv()) for _ in range(999)]
        for a, b in pairs:
            assert compare_versions(a, b) == componentwise(a, b), (a, b)
            assert (PackageVersion(a) < PackageVersion(b)) == (componentwise(a, b) < 0)
        assert PackageVersion("1.2") < PackageVersion("1.2.0")


# -- 3 -------------------------------------------------------------------


def test_criterion_3_earliest_commit(criterion, tmp_path):
    with criterion(3, "earliest-commit rule on [1.0, 1.1, 1.1, 1.0]", 5):
        repo = tmp_path / "rpath"
        commits = git_package_history(repo, "rpath", ["1.0", "1.1", "1.1", "1.0"])

        def linear_scan(version):
            for c in git(repo, "rev-list", "--first-parent", "--reverse", "HEAD").split():
                text = git(repo, "show", f"{c}:DESCRIPTION")
                if re.search(rf"^Version: {re.escape(version)}$", text, re.M):
                    return c

        got = {v: earliest_commit_for_version(str(repo), "HEAD", "rpath", ".", v, cache_root=tmp_path / "c") for v in ("1.0", "1.1")}
        assert got == {"1.1": commits[1], "1.0": commits[0]}
        assert got == {v: linear_scan(v) for v in ("1.0", "1.1")}


# -- 4 -------------------------------------------------------------------


def test_criterion_4_three_stage_precedence(criterion, tmp_path):
    with criterion(4, "three-stage precedence", 5):
        s = staged_fixture(tmp_path)
        m = s.manifest
        seen = []
        for remove in (None, "stage1", "stage2"):
            if remove == "stage1":
                m = m.without("P")
            elif remove == "stage2":
                (s.stage2 / "src" / "contrib" / "PACKAGES").write_text("")
                (s.stage2 / "src" / "contrib" / "P_1.0.tar.gz").unlink()
            rp = find_version("P", "1.0", m, Fetcher(tmp_path / "cache"))
            seen.append((rp.stage, read_marker(rp.tree.path, "P")))
        assert seen == [(1, "stage1"), (2, "stage2"), (3, "stage3")]


# -- 5 -------------------------------------------------------------------

# Expected closure of the five pins below, worked out by hand from the
# fixture declarations: ggvis pulls dplyr (newest, 0.3.0.9000) and
# magrittr (newest, 1.5) while lazyeval stays at its pin; rpath pulls XML;
# Biobase pulls BiocGenerics.
SEED_PINS = (("ggvis", "0.4.0"), ("lazyeval", "0.1.9"), ("rpath", "1.1"), ("digest", "0.6.4"), ("Biobase", "2.26.0"))
SEED_CLOSURE = {
    "ggvis": "0.4.0", "lazyeval": "0.1.9", "rpath": "1.1", "digest": "0.6.4", "Biobase": "2.26.0",
    "dplyr": "0.3.0.9000", "magrittr": "1.5", "XML": "3.98-1.1", "BiocGenerics": "0.12.1",
}


def test_criterion_5_seeding_and_provenance_round_trip(criterion, tmp_path, shared_eco):
    with criterion(5, "seeding exactness + provenance round-trip", 10):
        store = LibraryStore(tmp_path / "store", shared_eco.dep_repos, Fetcher(tmp_path / "cache"))
        seed = SeedingManifest(shared_eco.manifest(), SEED_PINS)
        store.switch_to("L1", seed=seed)
        l1 = {n: p.version for n, p in store.installed("L1").items()}
        assert l1 == {n: PackageVersion(v) for n, v in SEED_CLOSURE.items()}
        m, unresolved = store.lib_manifest("L1")
        assert unresolved == []
        store.switch_to("L2", seed=m)
        l2 = {n: p.version for n, p in store.installed("L2").items()}
        assert l2 == l1
        commit = store.installed("L2")["rpath"].description["InstallCommit"]
        assert commit == shared_eco.commits["rpath"][1]


# -- 6 -------------------------------------------------------------------


def plain_index(path: Path):
    """Read PACKAGES with nothing but string splitting."""
    rows = {}
    for block in path.read_text().split("\n\n"):
        fields = dict(line.split(": ", 1) for line in block.splitlines() if line and not line[0].isspace())
        if fields:
            rows[fields["Package"]] = fields["Version"]
    return rows


def test_criterion_6_jit_equivalence(criterion, tmp_path, shared_eco):
    with criterion(6, "JIT repository equivalence", 5):
        fetcher = Fetcher(tmp_path / "cache")
        targets = ["ggvis", "rpath", "localpkg"]
        plan = resolve(targets, shared_eco.manifest(), fetcher=fetcher)
        expected = {(p.name, str(p.version)) for p in plan}
        repo = build_jit_repo(plan, tmp_path / "jit", fetcher)
        contrib = repo / "src" / "contrib"
        rows = plain_index(contrib / "PACKAGES")
        assert set(rows.items()) == expected
        tarballs = {p.name for p in contrib.glob("*.tar.gz")}
        assert tarballs == {f"{n}_{v}.tar.gz" for n, v in expected}
        # the repository works as a plain dependency repository for a second resolver
        via_repo = resolve(targets, PackageManifest((), (str(repo),)), fetcher=Fetcher(tmp_path / "cache2"))
        assert {(p.name, str(p.version)) for p in via_repo} == expected
        store = LibraryStore(tmp_path / "store", shared_eco.dep_repos, fetcher)
        store.switch_to("jit")
        store.install_packages(targets, shared_eco.manifest())
        assert {(n, str(p.version)) for n, p in store.installed("jit").items()} == expected


# -- 7 -------------------------------------------------------------------

FAIL_CHECK = "! grep -rq BROKEN {src}"


def test_criterion_7_incremental_builder(criterion, tmp_path, eco):
    with criterion(7, "incremental builder (a)-(e)", 30):
        m = eco.manifest()
        dest = tmp_path / "repo"
        index = dest / "src" / "contrib" / "PACKAGES"

        # (a) fresh build passes everything
        _, report = make_repo(m, dest, fetcher=Fetcher(tmp_path / "cache"))
        assert set(report.statuses.values()) == {"ok"} and len(report.rows) == 4

        # (b) unchanged re-run
        before = index.read_bytes()
        f = Fetcher(tmp_path / "cache")
        _, report = make_repo(m, dest, fetcher=f)
        assert set(report.statuses.values()) == {"up_to_date"}
        assert index.read_bytes() == before and f.fetch_count == 0

        # (c) edit the leaf dplyr: exactly dplyr and its dependent ggvis are rebuilt
        write_package(eco.tidy_git / "dplyr", "dplyr", "0.4.0", imports=("lazyeval (>= 0.1.0)", "magrittr"))
        git_commit(eco.tidy_git, "dplyr 0.4.0", 9)
        f = Fetcher(tmp_path / "cache")
        _, report = make_repo(m, dest, fetcher=f)
        assert sorted(n for n, _ in f.fetched) == ["dplyr", "ggvis"]
        assert report.statuses == {"dplyr": "ok", "ggvis": "ok", "localpkg": "up_to_date", "rpath": "up_to_date"}

        # (d) same index as a from-scratch build
        make_repo(m, tmp_path / "scratch", fetcher=Fetcher(tmp_path / "cache-scratch"))
        assert index.read_bytes() == (tmp_path / "scratch" / "src" / "contrib" / "PACKAGES").read_bytes()

        # (e) B fails its check in A -> B -> C
        chain = local_cohort(tmp_path / "chain", {"A": ("1.0", ["B"]), "B": ("1.0", ["C"]), "C": ("1.0", [])})
        cdest = tmp_path / "chain-repo"
        make_repo(chain, cdest, FAIL_CHECK, fetcher=Fetcher(tmp_path / "cache"))
        write_package(tmp_path / "chain" / "B", "B", "2.0", marker="BROKEN", imports=("C",))
        write_package(tmp_path / "chain" / "C", "C", "1.1")
        _, report = make_repo(chain, cdest, FAIL_CHECK, fetcher=Fetcher(tmp_path / "cache"))
        assert report.statuses == {"A": "dep_fail", "B": "check_fail", "C": "ok"}
        rows = plain_index(cdest / "src" / "contrib" / "PACKAGES")
        assert rows == {"A": "1.0", "B": "1.0", "C": "1.1"}


# -- 8 -------------------------------------------------------------------


def tree_digest(path: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        h.update(str(p.relative_to(path)).encode())
        if p.is_file():
            h.update(p.read_bytes())
    return h.hexdigest()


def test_criterion_8_switch_stack(criterion, tmp_path, shared_eco):
    with criterion(8, "switch stack discipline and ignored seeds", 10):
        store = LibraryStore(tmp_path / "store", shared_eco.dep_repos, Fetcher(tmp_path / "cache"))
        pool = [f"env{i}" for i in range(5)]
        for i, name in enumerate(pool[:3]):
            write_package(store.root / "_src" / name, f"pkg{i}", "1.0")
            seed = PackageManifest((ManifestEntry(f"pkg{i}", "local-dir", str(store.root / "_src" / name)),), ())
            store.switch_to(name, seed=seed)
            store.switch_back()
        digests = {n: tree_digest(store.lib_dir(n)) for n in pool[:3]}

        rng = random.Random(8)
        for _ in range(40):
            model = []
            for _ in range(rng.randint(1, 20)):
                if model and (len(model) == 8 or rng.random() < 0.4):
                    store.switch_back()
                    model.pop()
                else:
                    prev = store.current
                    store.switch_to(rng.choice(pool))
                    model.append(prev)
                assert store.stack == model
            while model:
                store.switch_back()
                model.pop()
            assert store.current == ORIGINAL and store.stack == []
        assert {n: tree_digest(store.lib_dir(n)) for n in pool[:3]} == digests

        # a seed handed to an existing library changes nothing
        r = store.switch_to("env0", seed=shared_eco.manifest(), pkgs=["ggvis", "Biobase"])
        assert not r.created and tree_digest(store.lib_dir("env0")) == digests["env0"]
        store.switch_back()


# -- 9 -------------------------------------------------------------------


def test_criterion_9_historical_snapshot(criterion):
    with criterion(9, "cohort_at_date vs filter-and-max, 50 events x 20 dates", 1):
        rng = random.Random(9)
        start = dt.date(2012, 1, 1)
        events, seen = [], set()
        while len(events) < 50:
            name = rng.choice("ABCDEFGH")
            version = f"{rng.randint(0, 3)}.{rng.randint(0, 9)}-{rng.randint(0, 2)}"
            key = (name, PackageVersion(version))
            if key in seen:
                continue
            seen.add(key)
            events.append((name, version, start + dt.timedelta(days=rng.randint(0, 1000))))
        log = "name\tversion\tdate\n" + "".join(f"{n}\t{v}\t{d}\n" for n, v, d in events)

        def oracle(date):
            best = {}
            for n, v, d in events:
                if d <= date and (n not in best or PackageVersion(v) > best[n]):
                    best[n] = PackageVersion(v)
            return tuple(sorted(best.items()))

        dates = [start + dt.timedelta(days=rng.randint(-30, 1030)) for _ in range(18)]
        dates += [start - dt.timedelta(days=1), start + dt.timedelta(days=2000)]
        for date in dates:
            assert cohort_at_date(log, date) == oracle(date)
        assert cohort_at_date(log, dates[-2]) == ()


# -- 10 ------------------------------------------------------------------

MESSAGE = re.compile(r"Switched to the '([^']+)' computing environment\. (\d+) packages are currently available\.")


def test_criterion_10_cli_session(criterion, tmp_path, shared_eco, capsys):
    with criterion(10, "CLI session replay", 15):
        cfg = tmp_path / "config.dcf"
        cfg.write_text(f"DepRepos: {','.join(shared_eco.dep_repos)}\n")
        manifest = tmp_path / "ghman.tsv"
        manifest.write_text(manifest_to_text(shared_eco.manifest()))
        common = ["--root", str(tmp_path / "store"), "--cache", str(tmp_path / "cache"), "--config", str(cfg)]

        def step(*argv):
            code = run([*argv, *common])
            out, err = capsys.readouterr()
            assert code == 0, (argv, err)
            return out, err

        _, err = step("switch", "work", "--seed", str(manifest), "--pkgs", "ggvis,XML,rpath")
        assert MESSAGE.search(err).groups() == ("work", "6")
        published = tmp_path / "published.tsv"
        step("manifest", "export", "-o", str(published))
        step("back")
        out, err = step("switch", "CollabEnv", "--seed", str(published))
        assert out.startswith("export COHORT_LIBRARY_PATH=")
        assert MESSAGE.search(err).groups() == ("CollabEnv", "6")
        _, err = step("back")
        assert "Reverted to the 'original' computing environment" in err
        out, err = step("switch", "CollabEnv")
        assert MESSAGE.search(err).groups() == ("CollabEnv", "6")
        listing, _ = step("libs")
        assert "* CollabEnv\t6 packages" in listing
