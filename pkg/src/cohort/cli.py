"""``cohort`` command line.

Activation lines go to stdout so ``eval "$(cohort switch NAME)"`` is safe;
everything meant for humans goes to stderr. Exit status is 0 on success,
1 on a domain error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path

from cohort.errors import CohortError, ParseError
from cohort.libenv import LibraryStore
from cohort.manifest import (
    DEFAULT_DEP_REPOS,
    PackageManifest,
    SeedingManifest,
    load_manifest,
    manifest_to_text,
    publish_manifest,
)
from cohort.metadata import parse_dcf
from cohort.repostore import build_jit_repo, make_repo
from cohort.resolver import read_event_log, resolve, snapshot_manifest
from cohort.sources import Fetcher

PROG = "cohort"


class UsageError(CohortError):
    pass


@dataclass
class CliConfig:
    store_root: Path
    cache_root: Path
    default_dep_repos: tuple[str, ...] = DEFAULT_DEP_REPOS
    parallelism: int = 1
    check_cmd: str | None = None
    source: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if self.parallelism < 1:
            raise UsageError("parallelism must be at least 1")
        for repo in self.default_dep_repos:
            if not repo or any(c.isspace() for c in repo) or "," in repo:
                raise UsageError(f"invalid dependency repository {repo!r}")


def _xdg(env, var: str, fallback: str) -> Path:
    return Path(env.get(var) or os.path.join(os.path.expanduser("~"), fallback))


def default_config_path(env=None) -> Path:
    env = os.environ if env is None else env
    base = env.get("XDG_CONFIG_HOME") or os.path.join(os.path.expanduser("~"), ".config")
    return Path(base) / "cohort" / "config.dcf"


_CONFIG_KEYS = {
    "StoreRoot": "store_root",
    "CacheRoot": "cache_root",
    "DepRepos": "default_dep_repos",
    "Parallelism": "parallelism",
    "CheckCmd": "check_cmd",
}


def _config_value(attr: str, raw: str):
    if attr in ("store_root", "cache_root"):
        return Path(os.path.expanduser(raw))
    if attr == "default_dep_repos":
        return tuple(r.strip() for r in raw.replace("\n", ",").split(",") if r.strip())
    if attr == "parallelism":
        try:
            return int(raw)
        except ValueError:
            raise UsageError(f"Parallelism must be an integer, got {raw!r}") from None
    return raw


def load_config(config_path=None, env=None, flags: dict | None = None) -> CliConfig:
    """Settings with precedence flags > environment > config file > defaults."""
    env = os.environ if env is None else env
    cfg = CliConfig(
        store_root=_xdg(env, "XDG_DATA_HOME", ".local/share") / "cohort",
        cache_root=_xdg(env, "XDG_CACHE_HOME", ".cache") / "cohort",
    )
    path = Path(config_path) if config_path else default_config_path(env)
    if path.exists():
        try:
            records = parse_dcf(path.read_text(encoding="utf-8"))
        except (ParseError, UnicodeDecodeError) as exc:
            raise UsageError(f"cannot parse config file {path}: {exc}") from None
        if len(records) > 1:
            raise UsageError(f"config file {path} must hold a single record")
        for key, raw in (records[0] if records else {}).items():
            if key not in _CONFIG_KEYS:
                raise UsageError(f"unknown config key {key!r} in {path}")
            setattr(cfg, _CONFIG_KEYS[key], _config_value(_CONFIG_KEYS[key], raw))
        cfg.source.append(str(path))
    elif config_path:
        raise UsageError(f"config file {path} does not exist")
    if env.get("COHORT_ROOT"):
        cfg.store_root = Path(env["COHORT_ROOT"])
    if env.get("COHORT_CACHE"):
        cfg.cache_root = Path(env["COHORT_CACHE"])
    for attr, value in (flags or {}).items():
        if value is not None:
            setattr(cfg, attr, value)
    cfg.validate()
    return cfg


def _csv(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--root", default=argparse.SUPPRESS, help="library store root")
    common.add_argument("--cache", default=argparse.SUPPRESS, help="source cache root")
    common.add_argument("--config", default=argparse.SUPPRESS, help="config file (DCF)")
    common.add_argument("--debug", action="store_true", default=argparse.SUPPRESS, help="show tracebacks")

    p = argparse.ArgumentParser(prog=PROG, parents=[common], description="Manage reproducible package cohorts.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("switch", parents=[common], help="switch to a library, creating and seeding it if needed")
    s.add_argument("name")
    s.add_argument("--seed", help="manifest file/URL or repository to seed a new library from")
    s.add_argument("--pkgs", type=_csv, help="comma-separated subset of the seed to install")

    sub.add_parser("back", parents=[common], help="switch back to the previous library")
    sub.add_parser("libs", parents=[common], help="list libraries")

    man = sub.add_parser("manifest", parents=[common], help="export or load manifests")
    msub = man.add_subparsers(dest="manifest_command", metavar="ACTION")
    ex = msub.add_parser("export", parents=[common], help="write a seeding manifest describing a library")
    ex.add_argument("--lib")
    ex.add_argument("-o", "--output", help="file or directory to publish to (default: stdout)")
    ex.add_argument("--fallback", help="manifest searched for packages without provenance")
    ld = msub.add_parser("load", parents=[common], help="load and print a manifest")
    ld.add_argument("path")

    ins = sub.add_parser("install", parents=[common], help="install packages into a library")
    ins.add_argument("pkgs", nargs="+")
    ins.add_argument("--from", dest="source", required=True, help="manifest file/URL or repository")
    ins.add_argument("--version", dest="versions", action="append", default=[], help="version for each package, in order")
    ins.add_argument("--lib")

    repo = sub.add_parser("repo", parents=[common], help="build repositories")
    rsub = repo.add_subparsers(dest="repo_command", metavar="ACTION")
    mk = rsub.add_parser("make", parents=[common], help="build a validated repository incrementally")
    mk.add_argument("--manifest", required=True)
    mk.add_argument("--dest", required=True)
    mk.add_argument("--check", help="check command; {src} is replaced by the unpacked source directory")
    mk.add_argument("-j", "--jobs", type=int, help="parallel builds")
    jit = rsub.add_parser("jit", parents=[common], help="build a just-in-time repository")
    jit.add_argument("--manifest", required=True)
    jit.add_argument("--pkgs", type=_csv, required=True)
    jit.add_argument("--dest", required=True)

    snap = sub.add_parser("snapshot", parents=[common], help="pin the cohort current at a past date")
    snap.add_argument("--log", required=True, help="event log: name<TAB>version<TAB>date")
    snap.add_argument("--date", required=True)
    snap.add_argument("-o", "--output", required=True)
    snap.add_argument("--manifest", help="base manifest for the snapshot")

    risk = sub.add_parser("risk", parents=[common], help="report available updates for a library")
    risk.add_argument("--lib")
    risk.add_argument("--manifest", required=True)
    return p


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _store(cfg: CliConfig, fetcher: Fetcher) -> LibraryStore:
    return LibraryStore(cfg.store_root, cfg.default_dep_repos, fetcher)


def _cmd_switch(args, cfg, fetcher):
    res = _store(cfg, fetcher).switch_to(args.name, args.seed, args.pkgs)
    sys.stdout.write(res.activation())
    _err(res.message)
    _err(f" To switch back to your previous environment run '{PROG} back'")


def _cmd_back(args, cfg, fetcher):
    res = _store(cfg, fetcher).switch_back()
    sys.stdout.write(res.activation())
    _err(res.message)


def _cmd_libs(args, cfg, fetcher):
    store = _store(cfg, fetcher)
    current = store.current
    for name in store.libraries():
        parent = store.meta(name).get("Parent")
        mark = "*" if name == current else " "
        extra = f" (inherits {parent})" if parent else ""
        print(f"{mark} {name}\t{len(store.installed(name))} packages{extra}")


def _cmd_manifest(args, cfg, fetcher):
    if args.manifest_command == "export":
        fallback = load_manifest(args.fallback) if args.fallback else None
        if isinstance(fallback, SeedingManifest):
            fallback = fallback.base
        m, unresolved = _store(cfg, fetcher).lib_manifest(args.lib, fallback)
        for name in unresolved:
            _err(f"unresolved: {name} (no provenance and not found in any repository)")
        if args.output:
            _err(f"published manifest to {publish_manifest(m, args.output)}")
        else:
            sys.stdout.write(manifest_to_text(m))
    elif args.manifest_command == "load":
        m = load_manifest(args.path)
        kind = "seeding" if isinstance(m, SeedingManifest) else "package"
        _err(f"{kind} manifest: {len(m.entries)} entries, {len(m.dep_repos)} dependency repositories")
        sys.stdout.write(manifest_to_text(m))
    else:
        raise UsageError("manifest needs an action: export or load")


def _cmd_install(args, cfg, fetcher):
    if args.versions and len(args.versions) != len(args.pkgs):
        raise UsageError("give one --version per package or none at all")
    targets = dict(zip(args.pkgs, args.versions)) if args.versions else list(args.pkgs)
    summary = _store(cfg, fetcher).install_packages(targets, args.source, args.lib)
    for name, version in summary.installed:
        _err(f"installed {name} {version} into '{summary.library}'")
    for name, version in summary.skipped:
        _err(f"already installed: {name} {version}")


def _cmd_repo(args, cfg, fetcher):
    m = load_manifest(args.manifest)
    if args.repo_command == "make":
        jobs = args.jobs if args.jobs is not None else cfg.parallelism
        if jobs < 1:
            raise UsageError("-j must be at least 1")
        dest, report = make_repo(m, args.dest, args.check or cfg.check_cmd, jobs, fetcher)
        sys.stdout.write(report.to_tsv())
        counts = {}
        for r in report.rows:
            counts[r.status] = counts.get(r.status, 0) + 1
        _err(f"repository {dest}: " + ", ".join(f"{v} {k}" for k, v in sorted(counts.items())))
    elif args.repo_command == "jit":
        plan = resolve(args.pkgs, m, fetcher=fetcher)
        repo = build_jit_repo(plan, args.dest, fetcher)
        print(repo)
        _err(f"JIT repository with {len(plan)} packages")
    else:
        raise UsageError("repo needs an action: make or jit")


def _cmd_snapshot(args, cfg, fetcher):
    base = load_manifest(args.manifest) if args.manifest else PackageManifest((), cfg.default_dep_repos)
    if isinstance(base, SeedingManifest):
        base = base.base
    try:
        m = snapshot_manifest(read_event_log(args.log), args.date, base)
    except ValueError as exc:
        raise UsageError(f"bad --date: {exc}") from None
    publish_manifest(m, args.output)
    _err(f"pinned {len(m.pins)} packages as of {args.date}")


def _cmd_risk(args, cfg, fetcher):
    rows = _store(cfg, fetcher).update_risk_report(args.lib, load_manifest(args.manifest))
    print("name\tinstalled\tavailable\tmagnitude\treverse_dependents")
    for r in rows:
        print(f"{r.name}\t{r.installed}\t{r.available}\t{r.magnitude}\t{r.reverse_dependents}")


COMMANDS = {
    "switch": _cmd_switch,
    "back": _cmd_back,
    "libs": _cmd_libs,
    "manifest": _cmd_manifest,
    "install": _cmd_install,
    "repo": _cmd_repo,
    "snapshot": _cmd_snapshot,
    "risk": _cmd_risk,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    debug = getattr(args, "debug", False)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    try:
        flags = {
            "store_root": Path(args.root) if getattr(args, "root", None) else None,
            "cache_root": Path(args.cache) if getattr(args, "cache", None) else None,
        }
        cfg = load_config(getattr(args, "config", None), flags=flags)
        fetcher = Fetcher(cfg.cache_root)
        COMMANDS[args.command](args, cfg, fetcher)
    except UsageError as exc:
        if debug:
            traceback.print_exc()
        parser.print_usage(sys.stderr)
        _err(f"{PROG}: error: {exc}")
        return 2
    except (CohortError, ValueError, OSError) as exc:
        if debug:
            traceback.print_exc()
        _err(f"{PROG}: error: " + " ".join(str(exc).split()))
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
