"""Minimal CSS rule scanning for style-sheet probes.

Just enough parsing to pull a verifiable (selector, property, value)
declaration out of a sheet and to check later whether a fetched body still
contains it. Not a CSS engine: at-rules are skipped wholesale because their
effects are conditional and a client could not reliably verify them.
"""

from __future__ import annotations

import re
from typing import Iterator, Optional

from crossprobe.model import StyleProbe

# Properties whose literal values a runner can read back via computed style.
PROBE_PROPERTIES = ("color", "display")

_COMMENT_RE = re.compile(r"/\*.*?\*/", re.S)


def iter_rules(text: str) -> Iterator[tuple[str, str]]:
    """Yield (selector, declaration block) for each top-level style rule."""
    text = _COMMENT_RE.sub(" ", text)
    buf: list[str] = []
    depth = 0
    selector = ""
    body_start = 0
    for i, ch in enumerate(text):
        if depth == 0:
            if ch == "{":
                selector = "".join(buf).strip()
                buf = []
                depth = 1
                body_start = i + 1
            elif ch == ";":
                buf = []  # at-statement like @import
            else:
                buf.append(ch)
        else:
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    if selector and not selector.startswith("@"):
                        yield selector, text[body_start:i]
                    selector = ""


def _declarations(body: str) -> Iterator[tuple[str, str]]:
    for chunk in body.split(";"):
        if ":" not in chunk:
            continue
        prop, _, value = chunk.partition(":")
        value = value.replace("!important", "").strip()
        prop = prop.strip().lower()
        if prop and value and "{" not in value:
            yield prop, value


def _normalize_selector(selector: str) -> str:
    return " ".join(selector.split())


def extract_style_probe(text: str) -> Optional[StyleProbe]:
    """First verifiable declaration in the sheet, or None.

    Only literal color/display values qualify; computed or contextual values
    (var(), inherit, ...) cannot be checked against a fixed expectation.
    """
    for selector, body in iter_rules(text):
        for prop, value in _declarations(body):
            if prop in PROBE_PROPERTIES and "var(" not in value and value not in (
                "inherit",
                "initial",
                "unset",
            ):
                return StyleProbe(_normalize_selector(selector), prop, value)
    return None


def probe_satisfied(text: str, probe: StyleProbe) -> bool:
    """Does the sheet contain the probed declaration under the probed selector?"""
    want = _normalize_selector(probe.selector)
    for selector, body in iter_rules(text):
        if _normalize_selector(selector) != want:
            continue
        for prop, value in _declarations(body):
            if prop == probe.property and value == probe.expected_value:
                return True
    return False
