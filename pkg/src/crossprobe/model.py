"""Core domain types shared by every other module.

Everything here is an immutable value object (frozen dataclasses and enums),
safe to share between threads and serialize. Validation happens at
construction time so downstream code never re-checks invariants.
"""

from __future__ import annotations

import urllib.parse
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional


class UrlParseError(ValueError):
    """Raised when a string cannot be interpreted as an absolute http(s) URL."""


class TransportError(Exception):
    """A fetch failed below the HTTP layer: reset, timeout, refused, EOF."""


class ResolutionError(TransportError):
    """Name resolution failed (the DNS-blocking failure mode)."""


class PatternKind(Enum):
    EXACT_URL = "exact"
    DOMAIN_WILDCARD = "domain"
    PREFIX_WILDCARD = "prefix"


class TaskType(Enum):
    """Probe mechanisms a client can execute against a target resource."""

    IMAGE = "image"
    STYLESHEET = "stylesheet"
    INLINE_FRAME = "inlineframe"
    SCRIPT = "script"

    @property
    def chrome_only(self) -> bool:
        # Script probes rely on Chrome firing onload for any 200 response.
        return self is TaskType.SCRIPT

    @property
    def explicit_feedback(self) -> bool:
        """True when the mechanism reports load success directly (no timing)."""
        return self is not TaskType.INLINE_FRAME


# Wire sentinel served when no task is eligible; deliberately not a TaskType.
NOOP_TASK_TYPE = "noop"


class BrowserFamily(Enum):
    CHROME = "chrome"
    FIREFOX = "firefox"
    SAFARI = "safari"
    OTHER = "other"


class ResultState(Enum):
    INIT = "init"
    SUCCESS = "success"
    FAILURE = "failure"


class FilterMode(Enum):
    """Filtering behaviors the emulation testbed can exhibit for a path.

    One variant per stage where real-world filtering intervenes: name
    resolution, TCP connection handling, and the HTTP exchange itself.
    """

    NONE = "none"
    DNS_NXDOMAIN = "dns-nxdomain"
    DNS_REDIRECT = "dns-redirect"
    TCP_RESET = "tcp-reset"
    TCP_DROP = "tcp-drop"
    HTTP_BLOCKPAGE = "http-blockpage"
    HTTP_DROP = "http-drop"
    HTTP_REDIRECT = "http-redirect"


# Officially assigned ISO 3166-1 alpha-2 codes. "ZZ" is our explicit
# unknown-region sentinel and is intentionally not in this set.
ISO_ALPHA2 = frozenset(
    """
    AD AE AF AG AI AL AM AO AQ AR AS AT AU AW AX AZ BA BB BD BE BF BG BH BI
    BJ BL BM BN BO BQ BR BS BT BV BW BY BZ CA CC CD CF CG CH CI CK CL CM CN
    CO CR CU CV CW CX CY CZ DE DJ DK DM DO DZ EC EE EG EH ER ES ET FI FJ FK
    FM FO FR GA GB GD GE GF GG GH GI GL GM GN GP GQ GR GS GT GU GW GY HK HM
    HN HR HT HU ID IE IL IM IN IO IQ IR IS IT JE JM JO JP KE KG KH KI KM KN
    KP KR KW KY KZ LA LB LC LI LK LR LS LT LU LV LY MA MC MD ME MF MG MH MK
    ML MM MN MO MP MQ MR MS MT MU MV MW MX MY MZ NA NC NE NF NG NI NL NO NP
    NR NU NZ OM PA PE PF PG PH PK PL PM PN PR PS PT PW PY QA RE RO RS RU RW
    SA SB SC SD SE SG SH SI SJ SK SL SM SN SO SR SS ST SV SX SY SZ TC TD TF
    TG TH TJ TK TL TM TN TO TR TT TV TW TZ UA UG UM US UY UZ VA VC VE VG VI
    VN VU WF WS YE YT ZA ZM ZW
    """.split()
)

UNKNOWN_REGION = "ZZ"

_DEFAULT_PORTS = {"http": 80, "https": 443}


def _split_http_url(url: str) -> urllib.parse.SplitResult:
    if not isinstance(url, str) or not url.strip():
        raise UrlParseError(f"not a URL: {url!r}")
    parts = urllib.parse.urlsplit(url.strip())
    if parts.scheme.lower() not in _DEFAULT_PORTS:
        raise UrlParseError(f"unsupported or missing scheme in {url!r}")
    if not parts.hostname:
        raise UrlParseError(f"missing host in {url!r}")
    return parts


def canonicalize_resource_key(url: str) -> str:
    """Collapse a URL to the deterministic key used for result aggregation.

    Scheme and host are lowercased, a default port is elided, the path is
    preserved verbatim, and the query string and fragment are dropped
    (queries routinely carry cache-busting noise that would fragment
    per-resource statistics).

    Raises UrlParseError for anything that is not an absolute http(s) URL.
    """
    parts = _split_http_url(url)
    scheme = parts.scheme.lower()
    host = parts.hostname or ""
    if ":" in host:  # IPv6 literal
        host = f"[{host}]"
    try:
        port = parts.port
    except ValueError as exc:
        raise UrlParseError(f"bad port in {url!r}") from exc
    netloc = host if port in (None, _DEFAULT_PORTS[scheme]) else f"{host}:{port}"
    return f"{scheme}://{netloc}{parts.path}"


def url_host(url: str) -> str:
    """Lowercased hostname of an absolute http(s) URL."""
    return (_split_http_url(url).hostname or "").lower()


@dataclass(frozen=True)
class TargetPattern:
    """What to test: an exact URL, or a pattern denoting a set of URLs."""

    kind: PatternKind
    value: str

    def __post_init__(self) -> None:
        _split_http_url(self.value)  # must be an absolute URL either way
        if self.kind is not PatternKind.EXACT_URL:
            if urllib.parse.urlsplit(self.value).query:
                raise ValueError(f"wildcard pattern may not carry a query: {self.value!r}")


def pattern_matches(pattern: TargetPattern, url: str) -> bool:
    """Decide whether a URL belongs to the set a pattern denotes.

    Pure and deterministic: exact patterns match only their own string,
    domain patterns match on host equality, prefix patterns on string prefix.
    """
    if pattern.kind is PatternKind.EXACT_URL:
        return url == pattern.value
    if pattern.kind is PatternKind.DOMAIN_WILDCARD:
        try:
            return url_host(url) == url_host(pattern.value)
        except UrlParseError:
            return False
    return url.startswith(pattern.value)


@dataclass(frozen=True)
class HarEntry:
    """One resource a recorded page load fetched.

    content_text is retained only for textual resources (style sheets need
    their body for probe extraction); nosniff records whether the response
    carried X-Content-Type-Options: nosniff, which gates script-probe safety.
    """

    url: str
    status: int
    mime_type: str
    body_size: int
    cacheable: bool
    is_image: bool
    content_text: Optional[str] = None
    nosniff: bool = False

    def __post_init__(self) -> None:
        if self.body_size < 0:
            raise ValueError(f"negative body size for {self.url}")
        if not 100 <= self.status <= 599:
            raise ValueError(f"implausible HTTP status {self.status} for {self.url}")


@dataclass(frozen=True)
class HarDocument:
    """A recorded page load: the page URL plus every resource it fetched."""

    page_url: str
    entries: tuple[HarEntry, ...]

    @property
    def total_bytes(self) -> int:
        # Always recomputed; the HAR's own totals are never trusted.
        return sum(e.body_size for e in self.entries)


@dataclass(frozen=True)
class StyleProbe:
    """A CSS declaration the client can verify was applied: selector,
    property, and the literal value to expect from computed style."""

    selector: str
    property: str
    expected_value: str


@dataclass(frozen=True)
class MeasurementTask:
    """A client-executable probe against one target resource.

    For inline-frame tasks, page_url is the framed page and resource_url the
    cacheable image within it whose second-fetch timing reveals whether the
    page actually loaded. needs_review marks inline-frame tasks for manual
    vetting before deployment; script_safe marks script tasks whose target
    responded with a nosniff header.
    """

    measurement_id: str
    task_type: TaskType
    resource_url: str
    max_bytes: int
    page_url: Optional[str] = None
    style_probe: Optional[StyleProbe] = None
    needs_review: bool = False
    script_safe: bool = False

    def __post_init__(self) -> None:
        if self.task_type is TaskType.INLINE_FRAME and not self.page_url:
            raise ValueError("inline-frame task requires a page_url")
        if self.task_type is TaskType.STYLESHEET and self.style_probe is None:
            raise ValueError("stylesheet task requires a style probe")

    @property
    def resource_key(self) -> str:
        return canonicalize_resource_key(self.resource_url)

    def to_wire(self) -> dict[str, Any]:
        wire: dict[str, Any] = {
            "taskType": self.task_type.value,
            "measurementId": self.measurement_id,
            "resourceUrl": self.resource_url,
            "maxBytes": self.max_bytes,
        }
        if self.page_url is not None:
            wire["pageUrl"] = self.page_url
        if self.style_probe is not None:
            wire["styleProbe"] = {
                "selector": self.style_probe.selector,
                "property": self.style_probe.property,
                "expectedValue": self.style_probe.expected_value,
            }
        if self.needs_review:
            wire["needsReview"] = True
        if self.task_type is TaskType.SCRIPT:
            wire["scriptSafe"] = self.script_safe
            wire["chromeOnly"] = True
        return wire

    @classmethod
    def from_wire(cls, wire: dict[str, Any]) -> "MeasurementTask":
        if wire.get("taskType") == NOOP_TASK_TYPE:
            raise ValueError("noop descriptor is not a measurement task")
        probe = None
        if wire.get("styleProbe"):
            raw = wire["styleProbe"]
            probe = StyleProbe(raw["selector"], raw["property"], raw["expectedValue"])
        return cls(
            measurement_id=wire["measurementId"],
            task_type=TaskType(wire["taskType"]),
            resource_url=wire["resourceUrl"],
            max_bytes=int(wire["maxBytes"]),
            page_url=wire.get("pageUrl"),
            style_probe=probe,
            needs_review=bool(wire.get("needsReview", False)),
            script_safe=bool(wire.get("scriptSafe", False)),
        )


@dataclass(frozen=True)
class ClientContext:
    """Who ran a measurement: hashed address token, region, and browser."""

    client_id: str
    region: str
    browser_family: BrowserFamily
    origin_site: Optional[str] = None

    def __post_init__(self) -> None:
        if self.region != UNKNOWN_REGION and self.region not in ISO_ALPHA2:
            raise ValueError(f"not an ISO 3166-1 alpha-2 region: {self.region!r}")


@dataclass(frozen=True)
class MeasurementResult:
    """One client submission for a measurement ID."""

    measurement_id: str
    state: ResultState
    received_at: float
    context: ClientContext
    elapsed_ms: Optional[float] = None

    def __post_init__(self) -> None:
        if self.elapsed_ms is not None and self.elapsed_ms < 0:
            raise ValueError("elapsed_ms must be non-negative")


@dataclass(frozen=True)
class RegionStats:
    """Per resource and region: how many probes ran and how many succeeded."""

    resource_key: str
    region: str
    total: int
    successes: int

    def __post_init__(self) -> None:
        if self.total < 0 or not 0 <= self.successes <= self.total:
            raise ValueError(
                f"need 0 <= successes <= total, got {self.successes}/{self.total}"
            )


@dataclass(frozen=True)
class DetectionConfig:
    """Parameters of the per-region hypothesis test.

    null_success_rate is the probe success probability assumed in the
    absence of filtering; a region is suspect when its success count is
    improbably low under that assumption at the given significance level.
    min_samples guards against degenerate tiny-sample verdicts.
    """

    null_success_rate: float = 0.7
    alpha: float = 0.05
    min_samples: int = 5

    def __post_init__(self) -> None:
        if not 0.0 < self.null_success_rate < 1.0:
            raise ValueError("null_success_rate must be in (0, 1)")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")


@dataclass(frozen=True)
class FilteringVerdict:
    """Per resource and region outcome of the filtering test.

    comparison_regions records every other region's p-value so the strict
    "no other region fails the null" requirement can be audited (or
    recomputed under a looser reading) offline.
    """

    resource_key: str
    region: str
    p_value: float
    flagged: bool
    total: int
    successes: int
    comparison_regions: tuple[tuple[str, float], ...] = field(default_factory=tuple)
    reason: Optional[str] = None

    def to_wire(self) -> dict[str, Any]:
        wire: dict[str, Any] = {
            "resourceKey": self.resource_key,
            "region": self.region,
            "pValue": self.p_value,
            "flagged": self.flagged,
            "total": self.total,
            "successes": self.successes,
            "comparisonRegions": [
                {"region": r, "pValue": pv} for r, pv in self.comparison_regions
            ],
        }
        if self.reason:
            wire["reason"] = self.reason
        return wire
