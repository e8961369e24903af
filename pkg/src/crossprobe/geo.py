"""Client context derivation: pluggable IP geolocation plus User-Agent sniffing.

Production deployments plug in a real geolocation database; tests and local
runs use a static CSV of CIDR ranges. Lookups never fail: anything unknown
maps to the explicit "ZZ" sentinel, which downstream analysis excludes.
"""

from __future__ import annotations

import hashlib
import ipaddress
import logging
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol

from crossprobe.model import ISO_ALPHA2, UNKNOWN_REGION, BrowserFamily, ClientContext

logger = logging.getLogger(__name__)

# Trusted only when a service runs with test headers enabled; lets desk-scale
# clients claim a region/identity since every socket is 127.0.0.1.
TEST_REGION_HEADER = "X-Test-Region"
TEST_CLIENT_HEADER = "X-Test-Client"


class GeolocationProvider(Protocol):
    def country_for(self, address: str) -> str:  # pragma: no cover - protocol
        ...


class NullGeolocator:
    """Maps every address to the unknown region."""

    def country_for(self, address: str) -> str:
        return UNKNOWN_REGION


class StaticCsvGeolocator:
    """CIDR-range table loaded from CSV lines of `network,country`."""

    def __init__(self, ranges: Iterable[tuple[str, str]]):
        self._nets: list[tuple[ipaddress._BaseNetwork, str]] = []
        for cidr, country in ranges:
            country = country.strip().upper()
            if country != UNKNOWN_REGION and country not in ISO_ALPHA2:
                raise ValueError(f"unknown country code {country!r} for {cidr}")
            self._nets.append((ipaddress.ip_network(cidr.strip(), strict=False), country))
        # Most specific prefix wins.
        self._nets.sort(key=lambda item: item[0].prefixlen, reverse=True)

    @classmethod
    def from_csv(cls, path: Path) -> "StaticCsvGeolocator":
        rows = []
        for line in path.read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cidr, _, country = line.partition(",")
            rows.append((cidr, country))
        return cls(rows)

    def country_for(self, address: str) -> str:
        try:
            ip = ipaddress.ip_address(address)
        except ValueError:
            return UNKNOWN_REGION
        for net, country in self._nets:
            if ip.version == net.version and ip in net:
                return country
        return UNKNOWN_REGION


def browser_family(user_agent: str) -> BrowserFamily:
    """Coarse family sniff; only the Chrome/non-Chrome split changes behavior
    (script tasks), so Chrome derivatives count as Chrome."""
    ua = user_agent or ""
    if "Firefox/" in ua and "Seamonkey" not in ua:
        return BrowserFamily.FIREFOX
    if any(token in ua for token in ("Chrome/", "Chromium/", "CriOS/")):
        return BrowserFamily.CHROME
    if "Safari/" in ua:
        return BrowserFamily.SAFARI
    return BrowserFamily.OTHER


def hash_client_address(address: str) -> str:
    """Opaque per-client token; raw addresses are never stored."""
    return hashlib.sha256(address.encode("utf-8")).hexdigest()[:16]


def derive_client_context(
    source_address: str,
    user_agent: str,
    geolocator: GeolocationProvider,
    headers: Optional[Mapping[str, str]] = None,
    trust_test_headers: bool = False,
    origin_site: Optional[str] = None,
) -> ClientContext:
    """Build the ClientContext a service attaches to a request."""
    headers = headers or {}
    region = geolocator.country_for(source_address)
    client_id = hash_client_address(source_address)
    if trust_test_headers:
        claimed = headers.get(TEST_REGION_HEADER, "").strip().upper()
        if claimed and (claimed == UNKNOWN_REGION or claimed in ISO_ALPHA2):
            region = claimed
        claimed_client = headers.get(TEST_CLIENT_HEADER, "").strip()
        if claimed_client:
            client_id = hash_client_address(claimed_client)
    return ClientContext(
        client_id=client_id,
        region=region,
        browser_family=browser_family(user_agent),
        origin_site=origin_site,
    )
