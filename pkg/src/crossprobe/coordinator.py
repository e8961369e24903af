"""Task scheduling and delivery service.

Clients ask for work and get a task tailored to their browser; within a
batching window all comers are steered to the same resource so regions stay
comparable. Delivery is either a JSON descriptor (headless clients) or an
HTML document that embeds the descriptor inline and references the browser
runner bundle, suitable for iframe embedding by origin sites.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import threading
import time
import urllib.parse
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

from crossprobe import geo
from crossprobe.model import (
    NOOP_TASK_TYPE,
    BrowserFamily,
    ClientContext,
    MeasurementTask,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AssignmentRecord:
    measurement_id: str
    client_id: str
    issued_at: float
    resource_key: str
    task_type: str  # wire name; "noop" for sentinel assignments

    def to_wire(self) -> dict[str, Any]:
        return {
            "measurementId": self.measurement_id,
            "clientId": self.client_id,
            "issuedAt": self.issued_at,
            "resourceKey": self.resource_key,
            "taskType": self.task_type,
        }


class Scheduler:
    """Round-robin over resource keys with a per-window pinned key.

    Tasks are reusable templates grouped by the resource they measure. Each
    batching window pins the key of the first assignment so that everyone
    arriving in the same window measures the same resource; the rotation
    start advances every window so all keys get coverage. Script tasks are
    only ever handed to Chrome-family clients. Every assignment mints a
    fresh measurement ID and is logged.
    """

    def __init__(
        self,
        tasks: Iterable[MeasurementTask],
        batch_window_secs: float = 60.0,
        per_client_budget: int = 1,
        clock: Callable[[], float] = time.time,
        log_sink: Optional[Callable[[dict[str, Any]], None]] = None,
    ):
        self.batch_window_secs = batch_window_secs
        self.per_client_budget = per_client_budget
        self.clock = clock
        self.assignments: list[AssignmentRecord] = []
        self._log_sink = log_sink
        self._groups: dict[str, list[MeasurementTask]] = {}
        self._keys: list[str] = []
        for task in tasks:
            key = task.resource_key
            if key not in self._groups:
                self._groups[key] = []
                self._keys.append(key)
            self._groups[key].append(task)
        self._lock = threading.Lock()
        self._window_id: Optional[int] = None
        self._pinned_key: Optional[str] = None
        self._rotation = 0
        self._issued: set[str] = set()

    @property
    def queue_size(self) -> int:
        return sum(len(g) for g in self._groups.values())

    @staticmethod
    def _eligible(task: MeasurementTask, ctx: ClientContext) -> bool:
        return not task.task_type.chrome_only or ctx.browser_family is BrowserFamily.CHROME

    def _advance_window(self, now: float) -> None:
        window = int(now // self.batch_window_secs) if self.batch_window_secs > 0 else 0
        if self._window_id is None:
            self._window_id = window
        elif window != self._window_id:
            self._window_id = window
            self._pinned_key = None
            if self._keys:
                self._rotation = (self._rotation + 1) % len(self._keys)

    def _first_eligible(self, key: str, ctx: ClientContext) -> Optional[MeasurementTask]:
        for task in self._groups.get(key, ()):
            if self._eligible(task, ctx):
                return task
        return None

    def next_task(self, ctx: ClientContext) -> Optional[MeasurementTask]:
        """Assign a task to this client, or None when nothing is eligible.

        Mutates scheduler state (window pin, assignment log) under a single
        writer lock; the returned task carries a freshly minted ID.
        """
        with self._lock:
            now = self.clock()
            self._advance_window(now)
            chosen: Optional[MeasurementTask] = None
            if self._pinned_key is not None:
                chosen = self._first_eligible(self._pinned_key, ctx)
            if chosen is None:
                order = self._keys[self._rotation :] + self._keys[: self._rotation]
                for key in order:
                    task = self._first_eligible(key, ctx)
                    if task is not None:
                        # Pin (or re-pin after a miss: the old pinned key had
                        # nothing this browser may run) so the rest of the
                        # window converges on one measurable resource.
                        self._pinned_key = key
                        chosen = task
                        break
            if chosen is None:
                return None
            minted = dataclasses.replace(chosen, measurement_id=self._mint_id())
            self._log(minted.measurement_id, ctx, now, chosen.resource_key, chosen.task_type.value)
            return minted

    def mint_noop(self, ctx: ClientContext) -> str:
        """Sentinel assignment: the client should do nothing but may still
        submit an init, so the attempt is tracked like any other."""
        with self._lock:
            mid = self._mint_id()
            self._log(mid, ctx, self.clock(), "", NOOP_TASK_TYPE)
            return mid

    def _mint_id(self) -> str:
        mid = str(uuid.uuid4())
        while mid in self._issued:  # pragma: no cover - uuid4 collision
            mid = str(uuid.uuid4())
        self._issued.add(mid)
        return mid

    def _log(self, mid: str, ctx: ClientContext, now: float, key: str, task_type: str) -> None:
        record = AssignmentRecord(
            measurement_id=mid,
            client_id=ctx.client_id,
            issued_at=now,
            resource_key=key,
            task_type=task_type,
        )
        self.assignments.append(record)
        if self._log_sink is not None:
            self._log_sink(record.to_wire())


def load_tasks(lines: Iterable[str]) -> list[MeasurementTask]:
    tasks = []
    for line in lines:
        line = line.strip()
        if line:
            tasks.append(MeasurementTask.from_wire(json.loads(line)))
    return tasks


# -- HTTP service --------------------------------------------------------------

_TASK_PAGE_TEMPLATE = """<!doctype html>
<html>
<head><meta charset="utf-8"><title>measurement</title></head>
<body>
<script id="measurement-task" type="application/json">{payload}</script>
<script src="/runner.js" async></script>
</body>
</html>
"""


class _CoordinatorHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "_CoordinatorHTTPServer"

    def log_message(self, fmt: str, *args) -> None:
        logger.debug("%s %s", self.address_string(), fmt % args)

    def do_GET(self) -> None:
        path = urllib.parse.urlsplit(self.path).path
        if path == "/task.json":
            body = json.dumps(self._descriptor()).encode()
            self._reply(200, body, "application/json")
        elif path == "/task":
            payload = json.dumps(self._descriptor()).replace("</", "<\\/")
            body = _TASK_PAGE_TEMPLATE.format(payload=payload).encode()
            # Permissive framing: origin sites embed this document in an iframe.
            self._reply(200, body, "text/html", extra=(("Content-Security-Policy", "frame-ancestors *"),))
        elif path == "/runner.js":
            self._serve_runner()
        elif path == "/healthz":
            self._reply(200, b"ok\n", "text/plain")
        else:
            self.send_error(404)

    def _descriptor(self) -> dict[str, Any]:
        owner = self.server.owner
        ctx = geo.derive_client_context(
            source_address=self.client_address[0],
            user_agent=self.headers.get("User-Agent", ""),
            geolocator=owner.geolocator,
            headers=dict(self.headers),
            trust_test_headers=owner.trust_test_headers,
            origin_site=self.headers.get("Referer"),
        )
        task = owner.scheduler.next_task(ctx)
        if task is None:
            wire: dict[str, Any] = {
                "taskType": NOOP_TASK_TYPE,
                "measurementId": owner.scheduler.mint_noop(ctx),
            }
        else:
            wire = task.to_wire()
        wire["budget"] = owner.scheduler.per_client_budget
        if owner.collector_url:
            wire["collector"] = owner.collector_url
        return wire

    def _serve_runner(self) -> None:
        bundle = self.server.owner.runner_bundle
        if bundle is None or not bundle.exists():
            self.send_error(404, "runner bundle not built")
            return
        self._reply(200, bundle.read_bytes(), "application/javascript")

    def _reply(
        self,
        status: int,
        body: bytes,
        mime: str,
        extra: tuple[tuple[str, str], ...] = (),
    ) -> None:
        self.send_response(status)
        self.send_header("Content-Type", mime)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Cache-Control", "no-store")
        self.send_header("Access-Control-Allow-Origin", "*")
        for name, value in extra:
            self.send_header(name, value)
        self.end_headers()
        self.wfile.write(body)


class _CoordinatorHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, owner: "CoordinatorServer"):
        self.owner = owner
        super().__init__(addr, _CoordinatorHandler)


@dataclass
class CoordinatorServer:
    scheduler: Scheduler
    geolocator: geo.GeolocationProvider = field(default_factory=geo.NullGeolocator)
    collector_url: str = ""
    runner_bundle: Optional[Path] = None
    trust_test_headers: bool = False
    listen_host: str = "127.0.0.1"
    listen_port: int = 0

    def __post_init__(self) -> None:
        self._server: Optional[_CoordinatorHTTPServer] = None
        self._thread: Optional[threading.Thread] = None

    def start(self) -> "CoordinatorServer":
        self._server = _CoordinatorHTTPServer((self.listen_host, self.listen_port), self)
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="coordinator", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()

    def __enter__(self) -> "CoordinatorServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    @property
    def base_url(self) -> str:
        assert self._server is not None, "coordinator not started"
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="coordinator", description="Task delivery service.")
    parser.add_argument("--listen", default="127.0.0.1:0", help="host:port to bind")
    parser.add_argument("--tasks", type=Path, required=True, help="tasks.jsonl from taskgen")
    parser.add_argument("--batch-window", type=float, default=60.0)
    parser.add_argument("--budget", type=int, default=1, help="tasks per client visit")
    parser.add_argument("--geo-csv", type=Path, help="CIDR,country geolocation table")
    parser.add_argument("--collector-url", default="", help="advertised to clients")
    parser.add_argument("--runner-bundle", type=Path, help="built browser runner JS")
    parser.add_argument("--assignments-out", type=Path, help="assignment log JSONL")
    parser.add_argument("--test-mode", action="store_true", help="trust X-Test-* headers")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    sink = None
    if args.assignments_out:
        log_path = args.assignments_out
        log_lock = threading.Lock()

        def sink(record: dict[str, Any]) -> None:
            with log_lock, log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")

    with args.tasks.open(encoding="utf-8") as fh:
        tasks = load_tasks(fh)
    scheduler = Scheduler(
        tasks,
        batch_window_secs=args.batch_window,
        per_client_budget=args.budget,
        log_sink=sink,
    )
    geolocator: geo.GeolocationProvider = geo.NullGeolocator()
    if args.geo_csv:
        geolocator = geo.StaticCsvGeolocator.from_csv(args.geo_csv)

    host, _, port = args.listen.partition(":")
    server = CoordinatorServer(
        scheduler=scheduler,
        geolocator=geolocator,
        collector_url=args.collector_url,
        runner_bundle=args.runner_bundle,
        trust_test_headers=args.test_mode,
        listen_host=host or "127.0.0.1",
        listen_port=int(port or 0),
    )
    server.start()
    print(f"coordinator listening on {server.base_url} with {scheduler.queue_size} tasks", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    import sys

    sys.exit(main())
