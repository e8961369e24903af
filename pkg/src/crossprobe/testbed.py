"""Local censorship emulation: a target server with per-path filtering modes.

Each configured path exhibits one filtering variety covering the three
stages where real censors intervene: name resolution (NXDOMAIN, redirect to
a block-page host), TCP (reset, silent drop), and HTTP (block page, dropped
request, redirect). Everything runs on loopback; DNS behavior is emulated by
a resolver hook that clients consult instead of the system resolver, plus an
optional real UDP responder for browser-based runs.
"""

from __future__ import annotations

import argparse
import logging
import socket
import struct
import threading
import time
import urllib.parse
import zlib
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional, Sequence

from crossprobe.model import FilterMode, ResolutionError

logger = logging.getLogger(__name__)

BLOCK_PAGE_HTML = (
    b"<html><head><title>Access Denied</title></head>"
    b"<body><h1>This page has been blocked</h1>"
    b"<p>Access to the requested resource is not permitted.</p></body></html>"
)


def make_png(width: int = 1, height: int = 1, rgba: tuple[int, int, int, int] = (40, 90, 200, 255)) -> bytes:
    """A tiny valid PNG, small enough to ship inside a single packet."""

    def chunk(tag: bytes, data: bytes) -> bytes:
        return (
            struct.pack(">I", len(data))
            + tag
            + data
            + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)
        )

    ihdr = struct.pack(">IIBBBBB", width, height, 8, 6, 0, 0, 0)
    row = b"\x00" + bytes(rgba) * width
    idat = zlib.compress(row * height)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", idat) + chunk(b"IEND", b"")


CONTROL_CSS = b"p.probe { color: blue; }\n.hidden { display: none; }\n"
CONTROL_JS = b"// control script\nwindow.__probe = 1;\n"
# The image reference is relative so copies of this page served under a
# path prefix keep their subresources under the same prefix.
CONTROL_PAGE = (
    b"<html><head><title>control page</title></head>"
    b'<body><p>hello</p><img src="cacheable.png"></body></html>'
)


@dataclass(frozen=True)
class Asset:
    mime: str
    body: bytes
    headers: tuple[tuple[str, str], ...] = ()


def default_assets() -> dict[str, Asset]:
    png = make_png()
    return {
        "/favicon.ico": Asset("image/png", png),
        "/style.css": Asset("text/css", CONTROL_CSS),
        "/app.js": Asset(
            "application/javascript", CONTROL_JS, (("X-Content-Type-Options", "nosniff"),)
        ),
        "/page.html": Asset("text/html", CONTROL_PAGE),
        "/cacheable.png": Asset(
            "image/png", png, (("Cache-Control", "public, max-age=3600"),)
        ),
    }


class _TestbedHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "_TestbedHTTPServer"

    def log_message(self, fmt: str, *args) -> None:
        logger.debug("%s %s", self.address_string(), fmt % args)

    def do_GET(self) -> None:
        bed = self.server.testbed
        path = urllib.parse.urlsplit(self.path).path
        if self.server.always_block:
            self._send_block_page()
            return
        mode = bed.mode_for(path)
        # DNS modes act at resolution time; a request that reaches this
        # server anyway behaves like the unfiltered target.
        if mode in (FilterMode.NONE, FilterMode.DNS_NXDOMAIN, FilterMode.DNS_REDIRECT):
            self._serve_asset(path)
        elif mode is FilterMode.HTTP_BLOCKPAGE:
            self._send_block_page()
        elif mode is FilterMode.HTTP_REDIRECT:
            self.send_response(302)
            self.send_header("Location", bed.block_page_url())
            self.send_header("Content-Length", "0")
            self.end_headers()
        elif mode is FilterMode.TCP_RESET:
            self._reset_connection()
        elif mode in (FilterMode.TCP_DROP, FilterMode.HTTP_DROP):
            # Both stay silent until the client gives up; TCP_DROP differs
            # from HTTP_DROP only in which stage the real censor acts at,
            # which per-path emulation cannot reproduce below the request.
            self._hold_silent()
        else:  # pragma: no cover - enum is closed
            self.send_error(500)

    do_HEAD = do_GET

    def _serve_asset(self, path: str) -> None:
        asset = self.server.testbed.assets.get(path)
        if asset is None:
            self.send_error(404, "no such resource")
            return
        self.send_response(200)
        self.send_header("Content-Type", asset.mime)
        self.send_header("Content-Length", str(len(asset.body)))
        for name, value in asset.headers:
            self.send_header(name, value)
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(asset.body)

    def _send_block_page(self) -> None:
        self.send_response(200)
        self.send_header("Content-Type", "text/html")
        self.send_header("Content-Length", str(len(BLOCK_PAGE_HTML)))
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(BLOCK_PAGE_HTML)

    def _reset_connection(self) -> None:
        # Zero linger makes close() emit RST instead of FIN.
        self.connection.setsockopt(
            socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0)
        )
        self.close_connection = True

    def _hold_silent(self) -> None:
        deadline = time.monotonic() + self.server.testbed.drop_hold_seconds
        try:
            self.connection.settimeout(0.1)
            while time.monotonic() < deadline and not self.server.testbed.stopping:
                try:
                    if self.connection.recv(4096) == b"":
                        break  # client went away
                except socket.timeout:
                    continue
        except OSError:
            pass
        self.close_connection = True


class _TestbedHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, testbed: "Testbed", always_block: bool):
        self.testbed = testbed
        self.always_block = always_block
        super().__init__(addr, _TestbedHandler)


@dataclass
class Testbed:
    """Two HTTP listeners plus a resolver hook.

    The target server applies the per-path mode map; the block server
    answers every path with the block page (the host a censoring resolver
    redirects to). resolve_url() stands in for DNS: clients resolve every
    URL through it and get NXDOMAIN or the block host for DNS-filtered
    paths.
    """

    __test__ = False  # not a pytest class, despite the name

    mode_map: dict[str, FilterMode] = field(default_factory=dict)
    hostname: str = "target.test"
    listen_host: str = "127.0.0.1"
    drop_hold_seconds: float = 10.0
    assets: dict[str, Asset] = field(default_factory=default_assets)
    stopping: bool = False

    def __post_init__(self) -> None:
        self._target_server: Optional[_TestbedHTTPServer] = None
        self._block_server: Optional[_TestbedHTTPServer] = None
        self._threads: list[threading.Thread] = []

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "Testbed":
        self._target_server = _TestbedHTTPServer((self.listen_host, 0), self, False)
        self._block_server = _TestbedHTTPServer((self.listen_host, 0), self, True)
        for srv, name in ((self._target_server, "target"), (self._block_server, "block")):
            t = threading.Thread(target=srv.serve_forever, name=f"testbed-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        self.stopping = True
        for srv in (self._target_server, self._block_server):
            if srv is not None:
                srv.shutdown()
                srv.server_close()

    def __enter__(self) -> "Testbed":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- addressing ---------------------------------------------------------

    @property
    def target_port(self) -> int:
        assert self._target_server is not None, "testbed not started"
        return self._target_server.server_address[1]

    @property
    def block_port(self) -> int:
        assert self._block_server is not None, "testbed not started"
        return self._block_server.server_address[1]

    def url(self, path: str) -> str:
        """URL for a testbed path as clients address it (by hostname)."""
        return f"http://{self.hostname}{path}"

    def block_page_url(self) -> str:
        return f"http://{self.listen_host}:{self.block_port}/blocked"

    def mode_for(self, path: str) -> FilterMode:
        return self.mode_map.get(path, FilterMode.NONE)

    # -- resolver hook --------------------------------------------------------

    def resolve_url(self, url: str) -> Optional[tuple[str, int]]:
        """Resolver clients use instead of DNS.

        Returns (host, port) to connect to, or None for hosts this testbed
        does not emulate (callers fall back to the system resolver). Raises
        ResolutionError for DNS-blocked paths.
        """
        parts = urllib.parse.urlsplit(url)
        if (parts.hostname or "").lower() != self.hostname.lower():
            return None
        mode = self.mode_for(parts.path)
        if mode is FilterMode.DNS_NXDOMAIN:
            raise ResolutionError(f"emulated NXDOMAIN for {parts.hostname}")
        if mode is FilterMode.DNS_REDIRECT:
            return (self.listen_host, self.block_port)
        return (self.listen_host, self.target_port)


def load_mode_map(path: Path) -> dict[str, FilterMode]:
    """Mode-map file: one `<path> <mode>` pair per line."""
    modes = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            url_path, mode_name = line.split()
        except ValueError:
            raise ValueError(f"bad mode-map line: {line!r}") from None
        modes[url_path] = FilterMode(mode_name)
    return modes


# -- Optional UDP DNS responder (for real-browser runs) ------------------------


class DnsResponder:
    """Minimal DNS server answering A queries from a fixed host table.

    Hosts mapped to None get NXDOMAIN; unknown hosts get an empty answer.
    Only what a local browser needs to reach the emulated hosts.
    """

    def __init__(self, table: dict[str, Optional[str]], listen_host: str = "127.0.0.1"):
        self.table = {host.lower().rstrip("."): ip for host, ip in table.items()}
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind((listen_host, 0))
        self._sock.settimeout(0.2)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, name="dns-responder", daemon=True)

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1]

    def start(self) -> "DnsResponder":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2)
        self._sock.close()

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                data, addr = self._sock.recvfrom(512)
            except socket.timeout:
                continue
            except OSError:
                break
            try:
                reply = self._answer(data)
            except Exception:  # malformed query; drop it
                logger.debug("ignoring malformed DNS query from %s", addr)
                continue
            if reply:
                self._sock.sendto(reply, addr)

    def _answer(self, query: bytes) -> bytes:
        txid, flags, qdcount = struct.unpack(">HHH", query[:6])
        if qdcount != 1:
            return b""
        # Parse QNAME labels.
        labels = []
        off = 12
        while True:
            length = query[off]
            if length == 0:
                off += 1
                break
            labels.append(query[off + 1 : off + 1 + length].decode("ascii"))
            off += 1 + length
        qtype, qclass = struct.unpack(">HH", query[off : off + 4])
        question = query[12 : off + 4]
        host = ".".join(labels).lower()

        ip = self.table.get(host, "")
        if host in self.table and ip is None:
            rcode = 3  # NXDOMAIN
            answers = b""
            ancount = 0
        elif ip and qtype in (1, 255):  # A / ANY
            rcode = 0
            answers = (
                b"\xc0\x0c"  # pointer to QNAME
                + struct.pack(">HHIH", 1, 1, 60, 4)
                + socket.inet_aton(ip)
            )
            ancount = 1
        else:
            rcode = 0
            answers = b""
            ancount = 0
        header = struct.pack(">HHHHHH", txid, 0x8180 | rcode, 1, ancount, 0, 0)
        return header + question + answers


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="testbed", description="Run the filtering emulation servers."
    )
    parser.add_argument("--listen", default="127.0.0.1", help="address to bind")
    parser.add_argument("--mode-map", type=Path, help="file of '<path> <mode>' lines")
    parser.add_argument("--hostname", default="target.test")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    modes = load_mode_map(args.mode_map) if args.mode_map else {}
    bed = Testbed(mode_map=modes, hostname=args.hostname, listen_host=args.listen)
    bed.start()
    print(f"target server on {args.listen}:{bed.target_port} (host {args.hostname})", flush=True)
    print(f"block-page server on {args.listen}:{bed.block_port}", flush=True)
    for path, mode in sorted(modes.items()):
        print(f"  {path} -> {mode.value}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        bed.stop()
    return 0


if __name__ == "__main__":
    import sys

    sys.exit(main())
