"""Distributed platform for measuring Web filtering via cross-origin requests.

The pipeline: expand target patterns into URLs, mine HAR recordings for
resources that small browser-side probes can test, schedule those probes to
clients through an HTTP coordinator, collect success/failure submissions,
and statistically infer per-region filtering. A local testbed emulates DNS,
TCP, and HTTP stage filtering so the whole platform is testable offline.
"""

from crossprobe.model import (
    BrowserFamily,
    ClientContext,
    DetectionConfig,
    FilteringVerdict,
    FilterMode,
    HarDocument,
    HarEntry,
    MeasurementResult,
    MeasurementTask,
    PatternKind,
    RegionStats,
    ResultState,
    StyleProbe,
    TargetPattern,
    TaskType,
    UrlParseError,
    canonicalize_resource_key,
    pattern_matches,
)

__all__ = [
    "BrowserFamily",
    "ClientContext",
    "DetectionConfig",
    "FilteringVerdict",
    "FilterMode",
    "HarDocument",
    "HarEntry",
    "MeasurementResult",
    "MeasurementTask",
    "PatternKind",
    "RegionStats",
    "ResultState",
    "StyleProbe",
    "TargetPattern",
    "TaskType",
    "UrlParseError",
    "canonicalize_resource_key",
    "pattern_matches",
]

__version__ = "0.1.0"
