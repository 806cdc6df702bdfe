"""Exception hierarchy.

Every error the tool raises on purpose derives from :class:`CohortError`; the
command line turns those into a one-line message and exit status 1.
"""

from __future__ import annotations


class CohortError(Exception):
    """Base class for domain errors."""


class ParseError(CohortError, ValueError):
    """Malformed DCF text, version string or dependency field."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LoadError(CohortError):
    """A manifest or event log file could not be loaded."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class FetchError(CohortError):
    """A package source could not be retrieved or did not match the request."""


class NotFoundError(FetchError):
    """A requested package version exists in none of the searched locations.

    ``searched`` holds ``(location, versions_seen)`` pairs in search order.
    """

    def __init__(self, name: str, version, searched=()):
        self.name = name
        self.version = version
        self.searched = list(searched)
        where = "; ".join(
            f"{loc} [{', '.join(str(v) for v in seen) or 'none'}]"
            for loc, seen in self.searched
        )
        msg = f"{name} {version} not found"
        if where:
            msg += f" (searched: {where})"
        super().__init__(msg)


class CycleError(CohortError):
    """The hard-dependency graph contains a cycle."""

    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("dependency cycle: " + " -> ".join(self.cycle))


class ConstraintError(CohortError):
    """A resolved version violates a declared version bound."""


class StoreError(CohortError):
    """Library store misuse (missing library, bad name, empty stack, ...)."""
