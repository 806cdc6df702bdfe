"""Reproducible package cohorts: manifests, switchable libraries and validated repositories."""

from cohort.errors import (
    CohortError,
    ConstraintError,
    CycleError,
    FetchError,
    LoadError,
    NotFoundError,
    ParseError,
    StoreError,
)
from cohort.metadata import (
    DepConstraint,
    PackageVersion,
    compare_versions,
    parse_dcf,
    parse_dep_field,
    serialize_dcf,
)
from cohort.manifest import (
    LATEST,
    ManifestEntry,
    PackageManifest,
    SeedingManifest,
    load_manifest,
    manifest_from_shorthand,
    publish_manifest,
    serialize_manifest,
    subset_manifest,
)

__version__ = "0.1.0"

__all__ = [
    "CohortError",
    "ConstraintError",
    "CycleError",
    "DepConstraint",
    "FetchError",
    "LATEST",
    "LoadError",
    "ManifestEntry",
    "NotFoundError",
    "PackageManifest",
    "PackageVersion",
    "ParseError",
    "SeedingManifest",
    "StoreError",
    "compare_versions",
    "load_manifest",
    "manifest_from_shorthand",
    "parse_dcf",
    "parse_dep_field",
    "publish_manifest",
    "serialize_dcf",
    "serialize_manifest",
    "subset_manifest",
]
