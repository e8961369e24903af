"""Target expansion, HAR ingestion, and measurement task generation.

The offline pipeline that turns a list of target patterns into concrete
probes: patterns expand to URLs against a local corpus, recorded page loads
(HTTP Archive files) reveal which resources each page fetches, and suitable
resources become tasks under strict size/type rules so probes stay cheap and
invisible to the hosting page. Also emits the amenability statistics used to
judge how much of a corpus is measurable at all.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import random
import uuid
from dataclasses import dataclass, field
from email.utils import parsedate_to_datetime
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, TextIO

from crossprobe import css
from crossprobe.model import (
    HarDocument,
    HarEntry,
    MeasurementTask,
    PatternKind,
    TargetPattern,
    TaskType,
    UrlParseError,
    canonicalize_resource_key,
    pattern_matches,
    url_host,
)

logger = logging.getLogger(__name__)

_TASK_ID_NAMESPACE = uuid.UUID("6ba7b811-9dad-11d1-80b4-00c04fd430c8")  # uuid.NAMESPACE_URL


class HarSchemaError(ValueError):
    """Input JSON is not an HTTP Archive; names the missing field."""

    def __init__(self, missing_field: str):
        super().__init__(f"not a HAR document: missing {missing_field}")
        self.missing_field = missing_field


@dataclass(frozen=True)
class UrlCorpus:
    """Local stand-in for search-engine pattern expansion: a set of known
    URLs that wildcard patterns are matched against."""

    urls: frozenset[str]

    def __post_init__(self) -> None:
        for u in self.urls:
            canonicalize_resource_key(u)  # raises UrlParseError when invalid

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "UrlCorpus":
        return cls(frozenset(line.strip() for line in lines if line.strip()))


@dataclass(frozen=True)
class TaskGenLimits:
    image_max_bytes: int = 1024
    image_relaxed_max_bytes: int = 5120
    page_max_bytes: int = 102400
    max_urls_per_pattern: int = 50
    forbidden_mime_prefixes: tuple[str, ...] = (
        "video/",
        "application/x-shockwave-flash",
        "audio/",
    )

    def __post_init__(self) -> None:
        if not self.image_max_bytes <= self.image_relaxed_max_bytes < self.page_max_bytes:
            raise ValueError("need image_max_bytes <= image_relaxed_max_bytes < page_max_bytes")


def expand_pattern(
    pattern: TargetPattern,
    corpus: UrlCorpus,
    limits: TaskGenLimits = TaskGenLimits(),
    seed: int = 0,
) -> list[str]:
    """Turn one pattern into the URLs that will represent it.

    Exact patterns are trivial and bypass the corpus entirely. Wildcards
    collect matching corpus URLs and, above the per-pattern cap, draw a
    seeded deterministic sample so reruns produce identical task sets.
    """
    if pattern.kind is PatternKind.EXACT_URL:
        return [pattern.value]
    matches = sorted(u for u in corpus.urls if pattern_matches(pattern, u))
    if not matches:
        logger.warning("pattern %r matched nothing in the corpus", pattern.value)
        return []
    if len(matches) <= limits.max_urls_per_pattern:
        return matches
    rng = random.Random(seed)
    return sorted(rng.sample(matches, limits.max_urls_per_pattern))


# -- HAR ingestion -----------------------------------------------------------


def _header_value(headers: Sequence[dict[str, Any]], name: str) -> Optional[str]:
    name = name.lower()
    for h in headers:
        if str(h.get("name", "")).lower() == name:
            return str(h.get("value", ""))
    return None


def derive_cacheable(headers: Sequence[dict[str, Any]]) -> bool:
    """Would a browser cache this response? Positive evidence required.

    no-store/no-cache always wins; otherwise an explicit freshness lifetime
    (max-age, s-maxage, public, immutable) or a future Expires qualifies.
    """
    cc = (_header_value(headers, "Cache-Control") or "").lower()
    directives = {d.strip() for d in cc.split(",") if d.strip()}
    if "no-store" in directives or "no-cache" in directives:
        return False
    for d in directives:
        if d in ("public", "immutable"):
            return True
        if d.startswith(("max-age=", "s-maxage=")):
            try:
                if int(d.split("=", 1)[1]) > 0:
                    return True
            except ValueError:
                pass
    expires = _header_value(headers, "Expires")
    if expires and expires.strip() not in ("0", "-1"):
        try:
            expires_at = parsedate_to_datetime(expires)
        except (TypeError, ValueError):
            return False
        date = _header_value(headers, "Date")
        if date:
            try:
                return expires_at > parsedate_to_datetime(date)
            except (TypeError, ValueError):
                return True
        return True
    return False


def _base_mime(mime: str) -> str:
    return mime.split(";", 1)[0].strip().lower()


def _entry_from_har(raw: dict[str, Any], index: int) -> Optional[HarEntry]:
    try:
        url = raw["request"]["url"]
    except (KeyError, TypeError):
        raise HarSchemaError(f"log.entries[{index}].request.url") from None
    response = raw.get("response")
    if not isinstance(response, dict):
        raise HarSchemaError(f"log.entries[{index}].response")
    status = int(response.get("status", 0))
    if not 100 <= status <= 599:
        # Aborted or failed fetches record status 0; nothing measurable there.
        logger.warning("skipping entry %s with status %s", url, status)
        return None
    content = response.get("content") or {}
    size = int(content.get("size", 0))
    if size < 0:
        logger.warning("clamping negative size %d for %s", size, url)
        size = 0
    headers = response.get("headers") or []
    mime = str(content.get("mimeType", ""))
    text = None
    if _base_mime(mime) == "text/css" and isinstance(content.get("text"), str):
        text = content["text"]
    try:
        return HarEntry(
            url=url,
            status=status,
            mime_type=mime,
            body_size=size,
            cacheable=derive_cacheable(headers),
            is_image=_base_mime(mime).startswith("image/"),
            content_text=text,
            nosniff=(_header_value(headers, "X-Content-Type-Options") or "").strip().lower()
            == "nosniff",
        )
    except UrlParseError:
        logger.warning("skipping entry with unparseable URL %r", url)
        return None


def ingest_har(raw: bytes | str) -> list[HarDocument]:
    """Parse an HTTP Archive 1.2 file into one document per recorded page.

    Byte totals are recomputed from the entries, never read from the file.
    Raises HarSchemaError (naming the missing field) for JSON that is not a
    HAR; plain JSON syntax errors propagate as-is.
    """
    data = json.loads(raw)
    if not isinstance(data, dict) or "log" not in data:
        raise HarSchemaError("log")
    log = data["log"]
    if not isinstance(log, dict) or "entries" not in log:
        raise HarSchemaError("log.entries")
    entries_raw = log["entries"]
    if not isinstance(entries_raw, list):
        raise HarSchemaError("log.entries")

    pages = [p for p in (log.get("pages") or []) if isinstance(p, dict)]
    page_ids = [str(p.get("id", i)) for i, p in enumerate(pages)]
    grouped: dict[str, list[HarEntry]] = {pid: [] for pid in page_ids}
    default_page = page_ids[0] if page_ids else "__single__"
    grouped.setdefault(default_page, [])

    for i, raw_entry in enumerate(entries_raw):
        if not isinstance(raw_entry, dict):
            raise HarSchemaError(f"log.entries[{i}]")
        entry = _entry_from_har(raw_entry, i)
        if entry is None:
            continue
        pid = str(raw_entry.get("pageref", default_page))
        grouped.setdefault(pid, []).append(entry)

    titles = {str(p.get("id", i)): str(p.get("title", "")) for i, p in enumerate(pages)}
    docs = []
    for pid, entries in grouped.items():
        title = titles.get(pid, "")
        if title.startswith(("http://", "https://")):
            page_url = title
        elif entries:
            page_url = entries[0].url
        else:
            logger.warning("skipping page %r with no URL and no entries", pid)
            continue
        docs.append(HarDocument(page_url=page_url, entries=tuple(entries)))
    return docs


# -- Task generation ---------------------------------------------------------


def _task_id(page_url: str, task_type: TaskType, resource_url: str, index: int) -> str:
    # Deterministic template IDs: identical input yields byte-identical
    # output. The coordinator mints a fresh ID per actual assignment.
    return str(
        uuid.uuid5(_TASK_ID_NAMESPACE, f"{page_url}|{task_type.value}|{resource_url}|{index}")
    )


def generate_tasks(doc: HarDocument, limits: TaskGenLimits = TaskGenLimits()) -> list[MeasurementTask]:
    """Emit every task the recorded page supports, in deterministic order.

    Image probes take small rendered images; style-sheet probes need a
    verifiable declaration; at most one inline-frame probe runs per page and
    only for small, side-effect-safe pages with a cacheable image to time;
    script probes take any 200 resource but are Chrome-only. An unsuitable
    document simply yields no tasks.
    """
    tasks: list[MeasurementTask] = []

    for i, e in enumerate(doc.entries):
        if e.is_image and e.status == 200 and 0 < e.body_size <= limits.image_max_bytes:
            tasks.append(
                MeasurementTask(
                    measurement_id=_task_id(doc.page_url, TaskType.IMAGE, e.url, i),
                    task_type=TaskType.IMAGE,
                    resource_url=e.url,
                    max_bytes=e.body_size,
                )
            )

    for i, e in enumerate(doc.entries):
        if _base_mime(e.mime_type) == "text/css" and e.status == 200 and e.body_size > 0:
            probe = css.extract_style_probe(e.content_text) if e.content_text else None
            if probe is None:
                logger.info("no usable probe rule in %s, skipping", e.url)
                continue
            tasks.append(
                MeasurementTask(
                    measurement_id=_task_id(doc.page_url, TaskType.STYLESHEET, e.url, i),
                    task_type=TaskType.STYLESHEET,
                    resource_url=e.url,
                    max_bytes=e.body_size,
                    style_probe=probe,
                )
            )

    frame_task = _inline_frame_task(doc, limits)
    if frame_task is not None:
        tasks.append(frame_task)

    for i, e in enumerate(doc.entries):
        if e.status == 200:
            tasks.append(
                MeasurementTask(
                    measurement_id=_task_id(doc.page_url, TaskType.SCRIPT, e.url, i),
                    task_type=TaskType.SCRIPT,
                    resource_url=e.url,
                    max_bytes=e.body_size,
                    script_safe=e.nosniff,
                )
            )
    return tasks


def _inline_frame_task(doc: HarDocument, limits: TaskGenLimits) -> Optional[MeasurementTask]:
    if not doc.entries or doc.total_bytes > limits.page_max_bytes:
        return None
    for e in doc.entries:
        if _base_mime(e.mime_type).startswith(limits.forbidden_mime_prefixes):
            return None
    candidates = [
        (e.body_size, i, e)
        for i, e in enumerate(doc.entries)
        if e.is_image and e.cacheable and e.status == 200 and e.body_size > 0
    ]
    if not candidates:
        return None
    _, idx, smallest = min(candidates)
    return MeasurementTask(
        measurement_id=_task_id(doc.page_url, TaskType.INLINE_FRAME, smallest.url, idx),
        task_type=TaskType.INLINE_FRAME,
        resource_url=smallest.url,
        max_bytes=doc.total_bytes,
        page_url=doc.page_url,
        needs_review=True,  # frame pages still need human vetting before deployment
    )


# -- Feasibility statistics ---------------------------------------------------

BUCKET_ALL = "all"
PAGE_BYTES_METRIC = "page_bytes"
IMAGES_METRIC = "images"
CACHEABLE_IMAGES_METRIC = "cacheable_images"


@dataclass(frozen=True)
class FeasibilityRow:
    subject: str  # domain (image stats) or page URL (page stats)
    metric: str
    bucket: str
    count: int


@dataclass
class FeasibilityReport:
    rows: list[FeasibilityRow] = field(default_factory=list)

    def to_csv(self, fh: TextIO) -> None:
        writer = csv.writer(fh)
        writer.writerow(["subject", "metric", "bucket", "count"])
        for row in self.rows:
            writer.writerow([row.subject, row.metric, row.bucket, row.count])

    def select(self, metric: str, bucket: str | None = None) -> list[FeasibilityRow]:
        return [
            r
            for r in self.rows
            if r.metric == metric and (bucket is None or r.bucket == bucket)
        ]

    def domains_with_images(self, bucket: str) -> int:
        return sum(1 for r in self.select(IMAGES_METRIC, bucket) if r.count > 0)


def feasibility_stats(
    docs: Sequence[HarDocument], limits: TaskGenLimits = TaskGenLimits()
) -> FeasibilityReport:
    """Tabulate how amenable a corpus is to each probe mechanism.

    Per domain: how many distinct images it hosts under the strict and
    relaxed size caps (an image seen at several sizes counts at its
    smallest). Per page: total bytes, and cacheable-image counts overall and
    within the frame-probe size caps.
    """
    report = FeasibilityReport()
    if not docs:
        return report

    small = f"<={limits.image_max_bytes}"
    relaxed = f"<={limits.image_relaxed_max_bytes}"
    by_domain: dict[str, dict[str, int]] = {}
    for doc in docs:
        domain = url_host(doc.page_url)
        sizes = by_domain.setdefault(domain, {})
        for e in doc.entries:
            if e.is_image and url_host(e.url) == domain:
                prev = sizes.get(e.url)
                if prev is None or e.body_size < prev:
                    sizes[e.url] = e.body_size
    for domain in sorted(by_domain):
        sizes = by_domain[domain]
        for bucket, cap in ((small, limits.image_max_bytes), (relaxed, limits.image_relaxed_max_bytes)):
            n = sum(1 for s in sizes.values() if s <= cap)
            report.rows.append(FeasibilityRow(domain, IMAGES_METRIC, bucket, n))
        report.rows.append(FeasibilityRow(domain, IMAGES_METRIC, BUCKET_ALL, len(sizes)))

    page_cap = f"<={limits.page_max_bytes}"
    page_cap_relaxed = f"<={5 * limits.page_max_bytes}"
    for doc in docs:
        report.rows.append(
            FeasibilityRow(doc.page_url, PAGE_BYTES_METRIC, "total", doc.total_bytes)
        )
        cacheable = sum(1 for e in doc.entries if e.is_image and e.cacheable)
        if doc.total_bytes <= limits.page_max_bytes:
            report.rows.append(
                FeasibilityRow(doc.page_url, CACHEABLE_IMAGES_METRIC, page_cap, cacheable)
            )
        if doc.total_bytes <= 5 * limits.page_max_bytes:
            report.rows.append(
                FeasibilityRow(doc.page_url, CACHEABLE_IMAGES_METRIC, page_cap_relaxed, cacheable)
            )
        report.rows.append(
            FeasibilityRow(doc.page_url, CACHEABLE_IMAGES_METRIC, BUCKET_ALL, cacheable)
        )
    return report


# -- Target list parsing and CLI ----------------------------------------------


def parse_target_line(line: str) -> Optional[TargetPattern]:
    """One pattern per line: '=<url>' exact, 'D <host>' domain, 'P <prefix>'."""
    line = line.strip()
    if not line or line.startswith("#"):
        return None
    if line.startswith("="):
        return TargetPattern(PatternKind.EXACT_URL, line[1:].strip())
    tag, _, value = line.partition(" ")
    value = value.strip()
    if tag == "D" and value:
        if not value.startswith(("http://", "https://")):
            value = f"http://{value}"
        return TargetPattern(PatternKind.DOMAIN_WILDCARD, value)
    if tag == "P" and value:
        return TargetPattern(PatternKind.PREFIX_WILDCARD, value)
    raise ValueError(f"unrecognized target line: {line!r}")


def load_targets(path: Path) -> list[TargetPattern]:
    patterns = []
    for line in path.read_text(encoding="utf-8").splitlines():
        parsed = parse_target_line(line)
        if parsed is not None:
            patterns.append(parsed)
    return patterns


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="taskgen",
        description="Expand target patterns, ingest HAR recordings, emit measurement tasks.",
    )
    parser.add_argument("--targets", required=True, type=Path)
    parser.add_argument("--har-dir", required=True, type=Path)
    parser.add_argument("--corpus", required=True, type=Path)
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    limits = TaskGenLimits()
    corpus = UrlCorpus.from_lines(args.corpus.read_text(encoding="utf-8").splitlines())
    patterns = load_targets(args.targets)

    selected: set[str] = set()
    for pattern in patterns:
        for url in expand_pattern(pattern, corpus, limits, seed=args.seed):
            selected.add(canonicalize_resource_key(url))

    docs = []
    for har_path in sorted(args.har_dir.glob("*.har")):
        try:
            docs.extend(ingest_har(har_path.read_bytes()))
        except (HarSchemaError, json.JSONDecodeError) as exc:
            logger.error("skipping %s: %s", har_path.name, exc)
    matched = [d for d in docs if canonicalize_resource_key(d.page_url) in selected]
    missing = selected - {canonicalize_resource_key(d.page_url) for d in matched}
    if missing:
        logger.warning("%d expanded URLs have no HAR recording", len(missing))

    args.out.mkdir(parents=True, exist_ok=True)
    n_tasks = 0
    with (args.out / "tasks.jsonl").open("w", encoding="utf-8") as fh:
        for doc in matched:
            for task in generate_tasks(doc, limits):
                fh.write(json.dumps(task.to_wire()) + "\n")
                n_tasks += 1
    with (args.out / "feasibility.csv").open("w", encoding="utf-8", newline="") as fh:
        feasibility_stats(matched, limits).to_csv(fh)

    print(
        f"{len(patterns)} patterns -> {len(selected)} URLs, "
        f"{len(matched)} recorded pages, {n_tasks} tasks"
    )
    return 0


if __name__ == "__main__":
    import sys

    sys.exit(main())
