"""Protocol-faithful headless measurement client.

Fetches a task from the coordinator, executes it with the same success
semantics a browser's cross-origin embedding would exhibit, and submits
results to the collector in the exact wire format browsers use. No DOM and
no JavaScript: image rendering is approximated by a magic-bytes decode
check, style application by re-finding the probed rule, and the iframe
timing channel by a per-run simulated cache.
"""

from __future__ import annotations

import argparse
import http.client
import json
import logging
import random
import re
import socket
import ssl
import time
import urllib.parse
import uuid
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from crossprobe import css
from crossprobe.geo import TEST_CLIENT_HEADER, TEST_REGION_HEADER
from crossprobe.model import (
    NOOP_TASK_TYPE,
    BrowserFamily,
    MeasurementTask,
    ResolutionError,
    ResultState,
    TaskType,
    TransportError,
    canonicalize_resource_key,
)
from crossprobe.taskgen import derive_cacheable

logger = logging.getLogger(__name__)

USER_AGENTS = {
    BrowserFamily.CHROME: (
        "Mozilla/5.0 (X11; Linux x86_64) AppleWebKit/537.36 "
        "(KHTML, like Gecko) Chrome/120.0.0.0 Safari/537.36"
    ),
    BrowserFamily.FIREFOX: (
        "Mozilla/5.0 (X11; Linux x86_64; rv:121.0) Gecko/20100101 Firefox/121.0"
    ),
    BrowserFamily.SAFARI: (
        "Mozilla/5.0 (Macintosh; Intel Mac OS X 10_15_7) AppleWebKit/605.1.15 "
        "(KHTML, like Gecko) Version/17.2 Safari/605.1.15"
    ),
    BrowserFamily.OTHER: "Mozilla/5.0 (compatible; generic)",
}

# Simulated inline-frame timings, mirroring observed cached-vs-uncached
# separation: hits land well under the detection threshold, misses well over.
CACHE_HIT_MS = (2.0, 9.5)
CACHE_MISS_MS = (70.0, 200.0)

Resolver = Callable[[str], Optional[tuple[str, int]]]

_SUBMIT_PATH_RE = re.compile(
    r"^/submit\?cmh-id=[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}"
    r"&cmh-result=(init|success|failure)(&cmh-elapsed=\d+)?$"
)


def build_submit_path(measurement_id: str, state: ResultState, elapsed_ms: Optional[float] = None) -> str:
    """The collector submission URL path, byte-for-byte the browser grammar."""
    path = f"/submit?cmh-id={measurement_id}&cmh-result={state.value}"
    if elapsed_ms is not None:
        path += f"&cmh-elapsed={int(round(elapsed_ms))}"
    assert _SUBMIT_PATH_RE.match(path), f"malformed submission path: {path}"
    return path


@dataclass
class FetchResult:
    url: str  # as originally requested; redirect chains keep this key
    status: int
    mime_type: str
    headers: list[tuple[str, str]]
    body: bytes
    elapsed_ms: float
    final_url: str = ""  # where the chain ended; base for relative references

    def __post_init__(self) -> None:
        if not self.final_url:
            self.final_url = self.url


class Fetcher:
    """Plain HTTP fetches with a pluggable resolver and redirect following."""

    def __init__(
        self,
        resolver: Optional[Resolver] = None,
        timeout: float = 3.0,
        max_redirects: int = 5,
        max_body_bytes: int = 5 * 1024 * 1024,
    ):
        self.resolver = resolver
        self.timeout = timeout
        self.max_redirects = max_redirects
        self.max_body_bytes = max_body_bytes

    def fetch(self, url: str, headers: Optional[dict[str, str]] = None) -> FetchResult:
        start = time.monotonic()
        current = url
        for _ in range(self.max_redirects + 1):
            result = self._fetch_once(current, headers or {})
            if result.status in (301, 302, 303, 307, 308):
                location = next(
                    (v for k, v in result.headers if k.lower() == "location"), None
                )
                if location:
                    current = urllib.parse.urljoin(current, location)
                    continue
            result.elapsed_ms = (time.monotonic() - start) * 1000.0
            result.final_url = current
            result.url = url  # chains stay keyed by the original request
            return result
        raise TransportError(f"redirect loop fetching {url}")

    def _fetch_once(self, url: str, headers: dict[str, str]) -> FetchResult:
        parts = urllib.parse.urlsplit(url)
        host = parts.hostname or ""
        default_port = 443 if parts.scheme == "https" else 80
        port = parts.port or default_port
        addr = None
        if self.resolver is not None:
            addr = self.resolver(url)  # may raise ResolutionError
        if addr is None:
            addr = (host, port)
        try:
            if parts.scheme == "https":
                conn = http.client.HTTPSConnection(
                    addr[0], addr[1], timeout=self.timeout, context=ssl.create_default_context()
                )
            else:
                conn = http.client.HTTPConnection(addr[0], addr[1], timeout=self.timeout)
            try:
                path = parts.path or "/"
                if parts.query:
                    path += f"?{parts.query}"
                conn.putrequest("GET", path, skip_host=True)
                conn.putheader("Host", parts.netloc)
                for name, value in headers.items():
                    conn.putheader(name, value)
                conn.endheaders()
                resp = conn.getresponse()
                body = resp.read(self.max_body_bytes)
                return FetchResult(
                    url=url,
                    status=resp.status,
                    mime_type=(resp.getheader("Content-Type") or "").split(";")[0].strip(),
                    headers=list(resp.getheaders()),
                    body=body,
                    elapsed_ms=0.0,
                )
            finally:
                conn.close()
        except ResolutionError:
            raise
        except socket.gaierror as exc:
            raise ResolutionError(f"cannot resolve {host}: {exc}") from exc
        except (OSError, http.client.HTTPException) as exc:
            raise TransportError(f"fetch of {url} failed: {exc}") from exc


def looks_like_image(body: bytes) -> bool:
    """Magic-bytes stand-in for browser image decoding; an HTML block page
    served in place of an image must fail this check."""
    if len(body) < 12:
        return False
    if body.startswith(b"\x89PNG\r\n\x1a\n"):
        return body[12:16] == b"IHDR"
    if body.startswith((b"GIF87a", b"GIF89a")):
        return True
    if body.startswith(b"\xff\xd8\xff"):
        return True
    if body.startswith(b"\x00\x00\x01\x00") and body[4] != 0:  # ICO with >= 1 image
        return True
    return False


_SUBRESOURCE_RE = re.compile(
    rb"<(?:img|script|iframe)[^>]+?src\s*=\s*[\"']([^\"']+)[\"']"
    rb"|<link[^>]+?href\s*=\s*[\"']([^\"']+)[\"']",
    re.I,
)


def html_subresources(body: bytes, base_url: str) -> list[str]:
    urls = []
    for match in _SUBRESOURCE_RE.finditer(body):
        ref = (match.group(1) or match.group(2) or b"").decode("utf-8", "replace")
        if ref and not ref.startswith(("data:", "javascript:")):
            urls.append(urllib.parse.urljoin(base_url, ref))
    return urls


class SimCache:
    """Per-run browser-cache stand-in, keyed by canonical resource URL."""

    def __init__(self) -> None:
        self._stored: set[str] = set()

    def store_if_cacheable(self, result: FetchResult) -> None:
        headers = [{"name": k, "value": v} for k, v in result.headers]
        if result.status == 200 and derive_cacheable(headers):
            self._stored.add(canonicalize_resource_key(result.url))

    def contains(self, url: str) -> bool:
        return canonicalize_resource_key(url) in self._stored


def execute_task(
    task: MeasurementTask,
    fetcher: Fetcher,
    rng: Optional[random.Random] = None,
) -> tuple[ResultState, Optional[float]]:
    """Run one task and decide success/failure with browser-equivalent rules.

    Image: must return 200 and decode as an image. Style sheet: must return
    200 and still contain the probed rule. Script: 200 suffices regardless
    of body (the Chrome behavior this task type exploits). Inline frame:
    load the page and its subresources, then report whether re-fetching the
    embedded image hits the simulated cache, with a drawn elapsed time.
    Transport failures are failures with no elapsed time.
    """
    rng = rng or random.Random()
    if task.task_type is TaskType.IMAGE:
        try:
            result = fetcher.fetch(task.resource_url)
        except TransportError:
            return ResultState.FAILURE, None
        ok = result.status == 200 and looks_like_image(result.body)
        return (ResultState.SUCCESS if ok else ResultState.FAILURE), None

    if task.task_type is TaskType.STYLESHEET:
        try:
            result = fetcher.fetch(task.resource_url)
        except TransportError:
            return ResultState.FAILURE, None
        ok = (
            result.status == 200
            and task.style_probe is not None
            and css.probe_satisfied(result.body.decode("utf-8", "replace"), task.style_probe)
        )
        return (ResultState.SUCCESS if ok else ResultState.FAILURE), None

    if task.task_type is TaskType.SCRIPT:
        try:
            result = fetcher.fetch(task.resource_url)
        except TransportError:
            return ResultState.FAILURE, None
        return (ResultState.SUCCESS if result.status == 200 else ResultState.FAILURE), None

    # Inline frame: page first, then the timing probe on the embedded image.
    cache = SimCache()
    assert task.page_url is not None
    try:
        page = fetcher.fetch(task.page_url)
    except TransportError:
        return ResultState.FAILURE, None
    if page.status == 200:
        cache.store_if_cacheable(page)
        for sub_url in html_subresources(page.body, page.final_url):
            try:
                cache.store_if_cacheable(fetcher.fetch(sub_url))
            except TransportError:
                continue
    if cache.contains(task.resource_url):
        return ResultState.SUCCESS, rng.uniform(*CACHE_HIT_MS)
    return ResultState.FAILURE, rng.uniform(*CACHE_MISS_MS)


@dataclass
class ClientIdentity:
    """Shapes how a run presents itself to coordinator and collector."""

    region: str = "US"
    browser: BrowserFamily = BrowserFamily.CHROME
    label: str = "sim-0"
    seed: int = 0

    def headers(self) -> dict[str, str]:
        return {
            "User-Agent": USER_AGENTS[self.browser],
            TEST_REGION_HEADER: self.region,
            TEST_CLIENT_HEADER: self.label,
        }


@dataclass
class RunOutcome:
    task_wire: dict
    submissions: list[str] = field(default_factory=list)  # submit paths, in order
    state: Optional[ResultState] = None


def run_once(
    coordinator_url: str,
    collector_url: str,
    identity: ClientIdentity,
    target_fetcher: Optional[Fetcher] = None,
    control_fetcher: Optional[Fetcher] = None,
) -> RunOutcome:
    """One full client visit: fetch a task, submit init, execute, submit result.

    target_fetcher performs the measurement itself (give it the testbed
    resolver to emulate a censored network); control_fetcher talks to the
    coordinator and collector. Raises TransportError if the coordinator is
    unreachable, in which case nothing is submitted.
    """
    control = control_fetcher or Fetcher()
    targets = target_fetcher or control
    rng = random.Random(identity.seed)
    headers = identity.headers()

    descriptor = control.fetch(
        coordinator_url.rstrip("/") + "/task.json", headers=headers
    )
    if descriptor.status != 200:
        raise TransportError(f"coordinator answered {descriptor.status}")
    wire = json.loads(descriptor.body)
    outcome = RunOutcome(task_wire=wire)

    def submit(state: ResultState, elapsed_ms: Optional[float] = None) -> None:
        path = build_submit_path(wire["measurementId"], state, elapsed_ms)
        reply = control.fetch(collector_url.rstrip("/") + path, headers=headers)
        if reply.status != 204:
            logger.warning("collector rejected %s with %d", path, reply.status)
        outcome.submissions.append(path)

    submit(ResultState.INIT)
    if wire.get("taskType") == NOOP_TASK_TYPE:
        return outcome

    task = MeasurementTask.from_wire(wire)
    state, elapsed = execute_task(task, targets, rng)
    submit(state, elapsed)
    outcome.state = state
    return outcome


def parse_resolve_rules(rules: Sequence[str]) -> Optional[Resolver]:
    """curl-style --resolve entries `host:ip:port` into a resolver."""
    if not rules:
        return None
    table = {}
    for rule in rules:
        try:
            host, ip, port = rule.rsplit(":", 2)
            table[host.lower()] = (ip, int(port))
        except ValueError:
            raise SystemExit(f"bad --resolve rule {rule!r}, want host:ip:port")

    def resolver(url: str) -> Optional[tuple[str, int]]:
        host = (urllib.parse.urlsplit(url).hostname or "").lower()
        return table.get(host)

    return resolver


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="simclient", description="Run simulated measurement clients."
    )
    parser.add_argument("--coordinator", required=True)
    parser.add_argument("--collector", required=True)
    parser.add_argument("--region", default="US")
    parser.add_argument(
        "--browser", choices=[f.value for f in BrowserFamily], default="chrome"
    )
    parser.add_argument("--count", type=int, default=1, help="number of client visits")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--timeout", type=float, default=3.0)
    parser.add_argument(
        "--resolve",
        action="append",
        default=[],
        metavar="HOST:IP:PORT",
        help="pin a target hostname to an address (repeatable)",
    )
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    fetcher = Fetcher(resolver=parse_resolve_rules(args.resolve), timeout=args.timeout)
    states: dict[str, int] = {}
    for i in range(args.count):
        identity = ClientIdentity(
            region=args.region,
            browser=BrowserFamily(args.browser),
            label=f"sim-{args.seed}-{i}",
            seed=args.seed * 100003 + i,
        )
        try:
            outcome = run_once(args.coordinator, args.collector, identity, fetcher, fetcher)
        except TransportError as exc:
            logger.error("visit %d failed: %s", i, exc)
            continue
        key = outcome.state.value if outcome.state else "noop"
        states[key] = states.get(key, 0) + 1
    print(f"{args.count} visits: " + ", ".join(f"{k}={v}" for k, v in sorted(states.items())))
    return 0


if __name__ == "__main__":
    import sys

    sys.exit(main())
