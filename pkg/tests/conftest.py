"""Shared builders for tests: HAR JSON fixtures, client contexts, testbeds."""

from __future__ import annotations

import json
from typing import Any, Optional

import pytest

from crossprobe.model import BrowserFamily, ClientContext, FilterMode
from crossprobe.testbed import Testbed, default_assets


def har_entry(
    url: str,
    status: int = 200,
    mime: str = "image/png",
    size: int = 500,
    headers: Optional[list[dict[str, str]]] = None,
    text: Optional[str] = None,
) -> dict[str, Any]:
    content: dict[str, Any] = {"mimeType": mime, "size": size}
    if text is not None:
        content["text"] = text
    return {
        "request": {"url": url},
        "response": {"status": status, "content": content, "headers": headers or []},
    }


def har_json(page_url: str, entries: list[dict[str, Any]], page_id: str = "page_1") -> bytes:
    for e in entries:
        e.setdefault("pageref", page_id)
    doc = {
        "log": {
            "version": "1.2",
            "pages": [{"id": page_id, "title": page_url}],
            "entries": entries,
        }
    }
    return json.dumps(doc).encode()


CACHE_HEADERS = [{"name": "Cache-Control", "value": "public, max-age=3600"}]


def ctx(
    region: str = "US",
    browser: BrowserFamily = BrowserFamily.CHROME,
    client_id: str = "client-a",
) -> ClientContext:
    return ClientContext(client_id=client_id, region=region, browser_family=browser)


@pytest.fixture
def chrome_ctx() -> ClientContext:
    return ctx()


@pytest.fixture
def firefox_ctx() -> ClientContext:
    return ctx(browser=BrowserFamily.FIREFOX, client_id="client-b")


def pytest_runtest_logreport(report):
    # One visible PASS/FAIL line per acceptance criterion.
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        outcome = "PASS" if report.passed else "FAIL"
        print(f"[ACCEPTANCE] {name}: {outcome}", flush=True)


class FakeClock:
    """Deterministic time source for scheduler tests."""

    def __init__(self, start: float = 1_000_000.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, secs: float) -> None:
        self.now += secs


def make_all_modes_testbed(**kwargs) -> Testbed:
    """A testbed where each mode's copy of the control assets lives under
    the path prefix /<mode>/, so one instance exercises every behavior."""
    assets = {}
    mode_map = {}
    for mode in FilterMode:
        for path, asset in default_assets().items():
            full = f"/{mode.value}{path}"
            assets[full] = asset
            mode_map[full] = mode
    return Testbed(mode_map=mode_map, assets=assets, **kwargs)
