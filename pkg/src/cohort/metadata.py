"""DCF records, package versions and dependency constraints.

DCF is the ``Key: value`` format of DESCRIPTION files and repository
``PACKAGES`` indexes. Records are separated by blank lines and a line that
starts with whitespace continues the previous field.
"""

from __future__ import annotations

import operator
import re
from dataclasses import dataclass, field
from functools import total_ordering
from typing import Iterable

from cohort.errors import ParseError

DcfRecord = dict[str, str]

_KEY_RE = re.compile(r"[A-Za-z][A-Za-z0-9._-]*")
_FIELD_RE = re.compile(r"([A-Za-z][A-Za-z0-9._-]*):(.*)")
_VERSION_RE = re.compile(r"[0-9]+(?:[.-][0-9]+)*")
_DEP_RE = re.compile(r"([A-Za-z0-9][A-Za-z0-9._]*)\s*(?:\((.*)\))?")
_CONSTRAINT_RE = re.compile(r"(>=|<=|==|>|<)\s*(\S+)")

HARD_DEP_FIELDS = ("Depends", "Imports")

_OPS = {
    ">=": operator.ge,
    "<=": operator.le,
    ">": operator.gt,
    "<": operator.lt,
    "==": operator.eq,
}


def parse_dcf(text: str) -> list[DcfRecord]:
    """Parse DCF text into a list of records (ordered ``dict`` objects).

    Continuation lines are stripped and joined to the field value with a
    newline. Whitespace-only lines count as record separators.
    """
    records: list[DcfRecord] = []
    current: DcfRecord | None = None
    last_key: str | None = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            if current:
                records.append(current)
            current, last_key = None, None
            continue
        if line[0] in " \t":
            if last_key is None:
                raise ParseError("continuation line without a field", lineno)
            current[last_key] += "\n" + line.strip()
            continue
        m = _FIELD_RE.fullmatch(line)
        if m is None:
            raise ParseError(f"malformed line {line!r}", lineno)
        key, value = m.group(1), m.group(2).strip()
        if current is None:
            current = {}
        if key in current:
            raise ParseError(f"duplicate key {key!r} in record", lineno)
        current[key] = value
        last_key = key
    if current:
        records.append(current)
    return records


def serialize_dcf(records: Iterable[DcfRecord]) -> str:
    """Render records as DCF text; inverse of :func:`parse_dcf`."""
    chunks = []
    for rec in records:
        lines = []
        for key, value in rec.items():
            if not _KEY_RE.fullmatch(key):
                raise ValueError(f"invalid DCF key {key!r}")
            first, *rest = str(value).split("\n")
            lines.append(f"{key}: {first}".rstrip() if first else f"{key}:")
            for cont in rest:
                if not cont.strip():
                    raise ValueError(f"field {key!r} has an empty continuation line")
                lines.append("  " + cont)
        chunks.append("\n".join(lines) + "\n")
    return "\n".join(chunks)


@total_ordering
@dataclass(frozen=True, eq=False)
class PackageVersion:
    """A version such as ``1.2.3`` or ``0.9-1``.

    ``.`` and ``-`` are interchangeable separators. Ordering is by integer
    components; when one version is a prefix of the other the shorter one
    sorts first, so ``1.2 < 1.2.0``.
    """

    raw: str
    components: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        if not isinstance(self.raw, str) or not _VERSION_RE.fullmatch(self.raw):
            raise ParseError(f"invalid version {self.raw!r}")
        parts = tuple(int(p) for p in re.split(r"[.-]", self.raw))
        object.__setattr__(self, "components", parts)

    @classmethod
    def parse(cls, value: str | PackageVersion) -> PackageVersion:
        if isinstance(value, PackageVersion):
            return value
        return cls(value.strip() if isinstance(value, str) else value)

    def __eq__(self, other):
        if not isinstance(other, PackageVersion):
            return NotImplemented
        return self.components == other.components

    def __lt__(self, other):
        if not isinstance(other, PackageVersion):
            return NotImplemented
        return self.components < other.components

    def __hash__(self):
        return hash(self.components)

    def __str__(self):
        return self.raw

    def __repr__(self):
        return f"PackageVersion({self.raw!r})"


def compare_versions(a: str | PackageVersion, b: str | PackageVersion) -> int:
    """Return -1, 0 or 1 as ``a`` is less than, equal to or greater than ``b``."""
    a, b = PackageVersion.parse(a), PackageVersion.parse(b)
    return (a.components > b.components) - (a.components < b.components)


@dataclass(frozen=True)
class DepConstraint:
    name: str
    op: str | None = None
    version: PackageVersion | None = None

    def __post_init__(self):
        if (self.op is None) != (self.version is None):
            raise ValueError("op and version must be given together")
        if self.op is not None and self.op not in _OPS:
            raise ValueError(f"unknown operator {self.op!r}")

    def satisfied_by(self, version: PackageVersion) -> bool:
        if self.op is None:
            return True
        return _OPS[self.op](version, self.version)

    def __str__(self):
        if self.op is None:
            return self.name
        return f"{self.name} ({self.op} {self.version})"


def parse_dep_field(text: str | None) -> list[DepConstraint]:
    """Parse a ``Depends``/``Imports``/``Suggests`` value.

    >>> [str(d) for d in parse_dep_field("pkgC(==2.0-1), pkgD")]
    ['pkgC (== 2.0-1)', 'pkgD']
    """
    deps = []
    if not text:
        return deps
    for entry in text.split(","):
        entry = entry.strip()
        if not entry:
            continue
        m = _DEP_RE.fullmatch(entry)
        if m is None:
            raise ParseError(f"malformed dependency entry {entry!r}")
        name, bound = m.group(1), m.group(2)
        if bound is None:
            deps.append(DepConstraint(name))
            continue
        c = _CONSTRAINT_RE.fullmatch(bound.strip())
        if c is None:
            raise ParseError(f"unknown operator in dependency entry {entry!r}")
        try:
            version = PackageVersion.parse(c.group(2))
        except ParseError:
            raise ParseError(f"unparseable version in dependency entry {entry!r}") from None
        deps.append(DepConstraint(name, c.group(1), version))
    return deps


def hard_deps(description: DcfRecord) -> list[DepConstraint]:
    """Depends plus Imports of a DESCRIPTION record."""
    out = []
    for key in HARD_DEP_FIELDS:
        out.extend(parse_dep_field(description.get(key)))
    return out


def read_description(path) -> DcfRecord:
    """Read a single-record DESCRIPTION file."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return description_from_text(text)


def description_from_text(text: str) -> DcfRecord:
    records = parse_dcf(text)
    if len(records) != 1:
        raise ParseError(f"DESCRIPTION must hold exactly one record, found {len(records)}")
    rec = records[0]
    for key in ("Package", "Version"):
        if key not in rec:
            raise ParseError(f"DESCRIPTION lacks a {key} field")
    PackageVersion.parse(rec["Version"])
    return rec
