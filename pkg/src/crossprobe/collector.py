"""Result collection service and offline aggregation.

Accepts browser-format submissions (`GET /submit?cmh-id=...&cmh-result=...`),
appends them to a JSON-lines log, and exports them for analysis. Aggregation
is a separate pure pass over a log snapshot that produces per-resource,
per-region success counts for the detector, after automated traffic is
filtered out.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import threading
import urllib.parse
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Iterable, Mapping, NamedTuple, Optional, Sequence

from crossprobe import geo
from crossprobe.model import (
    ClientContext,
    MeasurementResult,
    RegionStats,
    ResultState,
    TaskType,
)

logger = logging.getLogger(__name__)

EXPORT_TOKEN_ENV = "COLLECTOR_EXPORT_TOKEN"

DEFAULT_BOT_SUBSTRINGS = (
    "bot",
    "crawler",
    "spider",
    "scrapy",
    "curl/",
    "wget/",
    "python-requests",
    "phantomjs",
    "headless",
)

DEFAULT_RATE_CAP_PER_HOUR = 100
DEFAULT_RESULT_TIMEOUT_SECS = 120.0


class SubmissionError(ValueError):
    """Malformed submission; maps to HTTP 400."""


def parse_submission(query: str) -> tuple[str, ResultState, Optional[int]]:
    """Validate and unpack a /submit query string."""
    params = urllib.parse.parse_qs(query, keep_blank_values=True)
    raw_id = params.get("cmh-id", [""])[0]
    try:
        uuid.UUID(raw_id)
    except ValueError:
        raise SubmissionError(f"missing or invalid cmh-id in {query!r}") from None
    raw_state = params.get("cmh-result", [""])[0]
    try:
        state = ResultState(raw_state)
    except ValueError:
        raise SubmissionError(f"unknown cmh-result {raw_state!r}") from None
    elapsed: Optional[int] = None
    if "cmh-elapsed" in params:
        raw_elapsed = params["cmh-elapsed"][0]
        if not raw_elapsed.isdigit():
            raise SubmissionError(f"bad cmh-elapsed {raw_elapsed!r}")
        elapsed = int(raw_elapsed)
    return raw_id, state, elapsed


class ResultStore:
    """Append-only submission log; optionally backed by a JSON-lines file.

    Appends are serialized through one lock. Export de-duplicates on
    (id, state), keeping the earliest record, so replays and double-submits
    collapse; compact() rewrites the backing file in that canonical form.
    """

    def __init__(self, path: Optional[Path] = None):
        self.path = path
        self._lock = threading.Lock()
        self._records: list[dict[str, Any]] = []
        if path is not None and path.exists():
            with path.open(encoding="utf-8") as fh:
                self._records = [json.loads(line) for line in fh if line.strip()]

    def append(self, record: dict[str, Any]) -> None:
        with self._lock:
            self._records.append(record)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record) + "\n")

    def snapshot(self) -> list[dict[str, Any]]:
        with self._lock:
            return list(self._records)

    def deduplicated(self) -> list[dict[str, Any]]:
        seen: set[tuple[str, str]] = set()
        out = []
        for record in self.snapshot():
            key = (record["id"], record["state"])
            if key in seen:
                continue
            seen.add(key)
            out.append(record)
        return out

    def compact(self) -> None:
        with self._lock:
            deduped = []
            seen: set[tuple[str, str]] = set()
            for record in self._records:
                key = (record["id"], record["state"])
                if key not in seen:
                    seen.add(key)
                    deduped.append(record)
            self._records = deduped
            if self.path is not None:
                tmp = self.path.with_suffix(".tmp")
                with tmp.open("w", encoding="utf-8") as fh:
                    for record in deduped:
                        fh.write(json.dumps(record) + "\n")
                tmp.replace(self.path)


def filter_automation(
    records: Sequence[dict[str, Any]],
    bot_substrings: Sequence[str] = DEFAULT_BOT_SUBSTRINGS,
    rate_cap_per_hour: int = DEFAULT_RATE_CAP_PER_HOUR,
) -> list[dict[str, Any]]:
    """Drop submissions from crawlers and from clients flooding the collector.

    Bot matching is a case-insensitive substring test on the User-Agent.
    The rate cap is per client token over a sliding hour: once a client has
    rate_cap_per_hour kept records in the trailing hour, further ones drop.
    """
    lowered = [s.lower() for s in bot_substrings]
    kept: list[dict[str, Any]] = []
    recent: dict[str, list[float]] = {}
    for record in sorted(records, key=lambda r: r.get("ts", 0.0)):
        ua = str(record.get("ua", "")).lower()
        if any(s in ua for s in lowered):
            continue
        client = str(record.get("client", ""))
        ts = float(record.get("ts", 0.0))
        window = [t for t in recent.get(client, []) if t > ts - 3600.0]
        if len(window) >= rate_cap_per_hour:
            recent[client] = window
            continue
        window.append(ts)
        recent[client] = window
        kept.append(record)
    return kept


def results_from_records(records: Iterable[dict[str, Any]]) -> list[MeasurementResult]:
    out = []
    for record in records:
        context = ClientContext(
            client_id=str(record.get("client", "")),
            region=str(record.get("region", geo.UNKNOWN_REGION) or geo.UNKNOWN_REGION),
            browser_family=geo.browser_family(str(record.get("ua", ""))),
            origin_site=record.get("origin"),
        )
        elapsed = record.get("elapsedMs")
        out.append(
            MeasurementResult(
                measurement_id=record["id"],
                state=ResultState(record["state"]),
                received_at=float(record.get("ts", 0.0)),
                context=context,
                elapsed_ms=float(elapsed) if elapsed is not None else None,
            )
        )
    return out


class TaskRef(NamedTuple):
    resource_key: str
    task_type: Optional[TaskType]  # None for noop assignments


def load_task_index(lines: Iterable[str]) -> dict[str, TaskRef]:
    """Task index from the coordinator's assignment log (JSON lines)."""
    index = {}
    for line in lines:
        line = line.strip()
        if not line:
            continue
        row = json.loads(line)
        raw_type = row.get("taskType")
        task_type = None if raw_type in (None, "noop") else TaskType(raw_type)
        index[row["measurementId"]] = TaskRef(row.get("resourceKey", ""), task_type)
    return index


@dataclass
class AggregateDiagnostics:
    unknown_ids: int = 0
    orphan_terminals: int = 0  # terminal state with no matching init
    pending: int = 0  # init seen, timeout not yet reached
    dropped_frame_timeouts: int = 0
    noop_ids: int = 0


def aggregate(
    results: Sequence[MeasurementResult],
    task_index: Mapping[str, TaskRef],
    timeout_secs: float = DEFAULT_RESULT_TIMEOUT_SECS,
    now: Optional[float] = None,
) -> tuple[list[RegionStats], AggregateDiagnostics]:
    """Count measurements and successes per (resource, region).

    A measurement counts only when its init submission arrived (init is the
    attempt record; orphan terminals are discarded). An init that never got
    a terminal state within the timeout counts as a failure for
    explicit-feedback task types, but is dropped for inline-frame tasks
    whose timing channel cannot tell a slow success from filtering.

    Pure function of its inputs: `now` defaults to the newest timestamp in
    the log, so re-running over the same snapshot gives identical output.
    """
    diag = AggregateDiagnostics()
    if not results:
        return [], diag
    if now is None:
        now = max(r.received_at for r in results)

    # Collapse duplicate (id, state) pairs to the earliest submission.
    by_id: dict[str, dict[ResultState, MeasurementResult]] = {}
    for r in sorted(results, key=lambda r: r.received_at):
        slot = by_id.setdefault(r.measurement_id, {})
        if r.state not in slot:
            slot[r.state] = r

    counts: dict[tuple[str, str], list[int]] = {}
    for mid, states in by_id.items():
        init = states.get(ResultState.INIT)
        if init is None:
            diag.orphan_terminals += len(states)
            continue
        ref = task_index.get(mid)
        if ref is None:
            diag.unknown_ids += 1
            continue
        if ref.task_type is None:
            diag.noop_ids += 1
            continue

        terminals = [r for s, r in states.items() if s is not ResultState.INIT]
        if terminals:
            outcome = min(terminals, key=lambda r: r.received_at).state
        elif not ref.task_type.explicit_feedback:
            diag.dropped_frame_timeouts += 1
            continue
        elif now - init.received_at >= timeout_secs:
            outcome = ResultState.FAILURE
        else:
            diag.pending += 1
            continue

        key = (ref.resource_key, init.context.region)
        bucket = counts.setdefault(key, [0, 0])
        bucket[0] += 1
        if outcome is ResultState.SUCCESS:
            bucket[1] += 1

    stats = [
        RegionStats(resource_key=k, region=region, total=n, successes=x)
        for (k, region), (n, x) in sorted(counts.items())
    ]
    return stats, diag


# -- HTTP service --------------------------------------------------------------


class _CollectorHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "_CollectorHTTPServer"

    def log_message(self, fmt: str, *args) -> None:
        logger.debug("%s %s", self.address_string(), fmt % args)

    def do_GET(self) -> None:
        parts = urllib.parse.urlsplit(self.path)
        if parts.path == "/submit":
            self._handle_submit(parts.query)
        elif parts.path == "/export":
            self._handle_export(parts.query)
        elif parts.path == "/healthz":
            self._reply(200, b"ok\n", "text/plain")
        else:
            self.send_error(404)

    def _handle_submit(self, query: str) -> None:
        owner = self.server.owner
        try:
            mid, state, elapsed = parse_submission(query)
        except SubmissionError as exc:
            logger.warning("rejected submission %r: %s", query, exc)
            self._reply(400, f"{exc}\n".encode(), "text/plain")
            return
        context = geo.derive_client_context(
            source_address=self.client_address[0],
            user_agent=self.headers.get("User-Agent", ""),
            geolocator=owner.geolocator,
            headers=dict(self.headers),
            trust_test_headers=owner.trust_test_headers,
        )
        record = {
            "id": mid,
            "state": state.value,
            "elapsedMs": elapsed,
            "ua": self.headers.get("User-Agent", ""),
            "region": context.region,
            "ts": owner.clock(),
            "origin": self.headers.get("Referer"),
            "client": context.client_id,
        }
        owner.store.append(record)
        self.send_response(204)
        self._cors_headers()
        self.end_headers()

    def _handle_export(self, query: str) -> None:
        owner = self.server.owner
        token = owner.export_token
        params = urllib.parse.parse_qs(query)
        presented = params.get("token", [""])[0]
        auth = self.headers.get("Authorization", "")
        if auth.startswith("Bearer "):
            presented = presented or auth[len("Bearer ") :].strip()
        if not token or presented != token:
            self._reply(403, b"export requires the shared token\n", "text/plain")
            return
        body = "".join(
            json.dumps(record) + "\n" for record in owner.store.deduplicated()
        ).encode()
        self._reply(200, body, "application/x-ndjson")

    def _cors_headers(self) -> None:
        # Submissions arrive cross-origin from measurement pages.
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Cache-Control", "no-store")

    def _reply(self, status: int, body: bytes, mime: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", mime)
        self.send_header("Content-Length", str(len(body)))
        self._cors_headers()
        self.end_headers()
        self.wfile.write(body)


class _CollectorHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, owner: "CollectorServer"):
        self.owner = owner
        super().__init__(addr, _CollectorHandler)


@dataclass
class CollectorServer:
    store: ResultStore = field(default_factory=ResultStore)
    geolocator: geo.GeolocationProvider = field(default_factory=geo.NullGeolocator)
    export_token: Optional[str] = None
    trust_test_headers: bool = False
    listen_host: str = "127.0.0.1"
    listen_port: int = 0

    def __post_init__(self) -> None:
        import time

        self.clock = time.time
        self._server: Optional[_CollectorHTTPServer] = None
        self._thread: Optional[threading.Thread] = None

    def start(self) -> "CollectorServer":
        self._server = _CollectorHTTPServer((self.listen_host, self.listen_port), self)
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="collector", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()

    def __enter__(self) -> "CollectorServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    @property
    def base_url(self) -> str:
        assert self._server is not None, "collector not started"
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="collector", description="Result collection service.")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the submission endpoint")
    serve.add_argument("--listen", default="127.0.0.1:0", help="host:port to bind")
    serve.add_argument("--store", type=Path, required=True, help="JSONL log path")
    serve.add_argument("--geo-csv", type=Path, help="CIDR,country geolocation table")
    serve.add_argument("--test-mode", action="store_true", help="trust X-Test-* headers")

    agg = sub.add_parser("aggregate", help="aggregate a log into region stats")
    agg.add_argument("--store", type=Path, required=True)
    agg.add_argument("--assignments", type=Path, required=True, help="coordinator log")
    agg.add_argument("--out", type=Path, required=True, help="region stats JSONL")
    agg.add_argument("--timeout", type=float, default=DEFAULT_RESULT_TIMEOUT_SECS)
    agg.add_argument("--rate-cap", type=int, default=DEFAULT_RATE_CAP_PER_HOUR)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    if args.command == "serve":
        host, _, port = args.listen.partition(":")
        geolocator: geo.GeolocationProvider = geo.NullGeolocator()
        if args.geo_csv:
            geolocator = geo.StaticCsvGeolocator.from_csv(args.geo_csv)
        server = CollectorServer(
            store=ResultStore(args.store),
            geolocator=geolocator,
            export_token=os.environ.get(EXPORT_TOKEN_ENV),
            trust_test_headers=args.test_mode,
            listen_host=host or "127.0.0.1",
            listen_port=int(port or 0),
        )
        server.start()
        print(f"collector listening on {server.base_url}", flush=True)
        try:
            import time

            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            server.stop()
        return 0

    store = ResultStore(args.store)
    records = filter_automation(store.deduplicated(), rate_cap_per_hour=args.rate_cap)
    with args.assignments.open(encoding="utf-8") as fh:
        index = load_task_index(fh)
    stats, diag = aggregate(results_from_records(records), index, timeout_secs=args.timeout)
    with args.out.open("w", encoding="utf-8") as fh:
        for s in stats:
            fh.write(
                json.dumps(
                    {
                        "resourceKey": s.resource_key,
                        "region": s.region,
                        "total": s.total,
                        "successes": s.successes,
                    }
                )
                + "\n"
            )
    print(f"{len(stats)} region-stat rows written to {args.out}")
    print(f"diagnostics: {diag}")
    return 0


if __name__ == "__main__":
    import sys

    sys.exit(main())
