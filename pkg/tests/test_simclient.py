import random
import re
import uuid

import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_all_modes_testbed
from crossprobe.model import (
    FilterMode,
    MeasurementTask,
    ResultState,
    StyleProbe,
    TaskType,
)
from crossprobe.simclient import (
    CACHE_HIT_MS,
    CACHE_MISS_MS,
    Fetcher,
    SimCache,
    build_submit_path,
    execute_task,
    html_subresources,
    looks_like_image,
)
from crossprobe.testbed import BLOCK_PAGE_HTML, make_png

GRAMMAR = re.compile(
    r"^/submit\?cmh-id=[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}"
    r"&cmh-result=(init|success|failure)(&cmh-elapsed=\d+)?$"
)


class TestSubmitWire:
    def test_forms(self):
        mid = "123e4567-e89b-42d3-a456-426614174000"
        assert (
            build_submit_path(mid, ResultState.INIT)
            == f"/submit?cmh-id={mid}&cmh-result=init"
        )
        assert (
            build_submit_path(mid, ResultState.SUCCESS, 12.4)
            == f"/submit?cmh-id={mid}&cmh-result=success&cmh-elapsed=12"
        )
        assert (
            build_submit_path(mid, ResultState.FAILURE)
            == f"/submit?cmh-id={mid}&cmh-result=failure"
        )

    @given(
        st.uuids(version=4),
        st.sampled_from(list(ResultState)),
        st.one_of(st.none(), st.floats(min_value=0, max_value=1e6)),
    )
    @settings(max_examples=200, deadline=None)
    def test_grammar_byte_for_byte(self, mid, state, elapsed):
        path = build_submit_path(str(mid), state, elapsed)
        assert GRAMMAR.match(path)


class TestImageCheck:
    def test_real_formats_pass(self):
        assert looks_like_image(make_png())
        assert looks_like_image(b"GIF89a" + bytes(20))
        assert looks_like_image(b"\xff\xd8\xff\xe0" + bytes(20))
        assert looks_like_image(b"\x00\x00\x01\x00\x01\x00" + bytes(20))

    def test_block_page_fails(self):
        assert not looks_like_image(BLOCK_PAGE_HTML)
        assert not looks_like_image(b"")
        assert not looks_like_image(b"\x89PNG\r\n\x1a\nXXXXWRONG")


def test_html_subresources():
    body = (
        b'<img src="a.png"><script src="/js/lib.js"></script>'
        b'<link rel="stylesheet" href="http://cdn.com/x.css">'
        b'<img src="data:image/gif;base64,AAAA">'
        b"<iframe src='frame.html'></iframe>"
    )
    urls = html_subresources(body, "http://site.com/dir/page.html")
    assert urls == [
        "http://site.com/dir/a.png",
        "http://site.com/js/lib.js",
        "http://cdn.com/x.css",
        "http://site.com/dir/frame.html",
    ]


def test_sim_cache_uses_canonical_keys():
    from crossprobe.simclient import FetchResult

    cache = SimCache()
    cache.store_if_cacheable(
        FetchResult(
            url="HTTP://Site.com:80/img.png?v=1",
            status=200,
            mime_type="image/png",
            headers=[("Cache-Control", "max-age=60")],
            body=b"x",
            elapsed_ms=1.0,
        )
    )
    assert cache.contains("http://site.com/img.png")
    assert cache.contains("http://site.com/img.png?v=2")  # query is cache noise
    assert not cache.contains("http://site.com/other.png")


@pytest.fixture(scope="module")
def bed():
    with make_all_modes_testbed(drop_hold_seconds=1.5) as b:
        yield b


@pytest.fixture(scope="module")
def fetcher(bed):
    return Fetcher(resolver=bed.resolve_url, timeout=0.5)


def image_task(bed, mode):
    return MeasurementTask(
        measurement_id=str(uuid.uuid4()),
        task_type=TaskType.IMAGE,
        resource_url=bed.url(f"/{mode.value}/favicon.ico"),
        max_bytes=1024,
    )


def frame_task(bed, mode):
    return MeasurementTask(
        measurement_id=str(uuid.uuid4()),
        task_type=TaskType.INLINE_FRAME,
        resource_url=bed.url(f"/{mode.value}/cacheable.png"),
        max_bytes=100_000,
        page_url=bed.url(f"/{mode.value}/page.html"),
    )


def test_parse_resolve_rules():
    from crossprobe.simclient import parse_resolve_rules

    resolver = parse_resolve_rules(["target.test:127.0.0.1:8080"])
    assert resolver("http://TARGET.test/x") == ("127.0.0.1", 8080)
    assert resolver("http://other.example/") is None
    assert parse_resolve_rules([]) is None
    with pytest.raises(SystemExit):
        parse_resolve_rules(["nonsense"])


def test_redirect_chain_keyed_by_original_url(bed, fetcher):
    url = bed.url(f"/{FilterMode.HTTP_REDIRECT.value}/favicon.ico")
    result = fetcher.fetch(url)
    assert result.status == 200
    assert result.url == url  # measurement identity ignores the redirect
    assert result.final_url == bed.block_page_url()


class TestExecuteTask:
    def test_image_control_succeeds(self, bed, fetcher):
        state, elapsed = execute_task(image_task(bed, FilterMode.NONE), fetcher)
        assert state is ResultState.SUCCESS
        assert elapsed is None

    def test_image_block_page_fails_decode(self, bed, fetcher):
        state, _ = execute_task(image_task(bed, FilterMode.HTTP_BLOCKPAGE), fetcher)
        assert state is ResultState.FAILURE

    def test_image_nxdomain_fails_transport(self, bed, fetcher):
        state, elapsed = execute_task(image_task(bed, FilterMode.DNS_NXDOMAIN), fetcher)
        assert state is ResultState.FAILURE
        assert elapsed is None

    def test_script_succeeds_on_any_200(self, bed, fetcher):
        # The documented script-task false negative: a block page with HTTP
        # 200 still counts as success for this mechanism.
        task = MeasurementTask(
            measurement_id=str(uuid.uuid4()),
            task_type=TaskType.SCRIPT,
            resource_url=bed.url(f"/{FilterMode.HTTP_BLOCKPAGE.value}/app.js"),
            max_bytes=100,
        )
        state, _ = execute_task(task, fetcher)
        assert state is ResultState.SUCCESS

    def test_stylesheet_checks_probe(self, bed, fetcher):
        probe = StyleProbe("p.probe", "color", "blue")
        ok = MeasurementTask(
            measurement_id=str(uuid.uuid4()),
            task_type=TaskType.STYLESHEET,
            resource_url=bed.url(f"/{FilterMode.NONE.value}/style.css"),
            max_bytes=100,
            style_probe=probe,
        )
        blocked = MeasurementTask(
            measurement_id=str(uuid.uuid4()),
            task_type=TaskType.STYLESHEET,
            resource_url=bed.url(f"/{FilterMode.HTTP_BLOCKPAGE.value}/style.css"),
            max_bytes=100,
            style_probe=probe,
        )
        assert execute_task(ok, fetcher)[0] is ResultState.SUCCESS
        assert execute_task(blocked, fetcher)[0] is ResultState.FAILURE

    def test_frame_control_is_cache_hit(self, bed, fetcher):
        rng = random.Random(1)
        state, elapsed = execute_task(frame_task(bed, FilterMode.NONE), fetcher, rng)
        assert state is ResultState.SUCCESS
        assert CACHE_HIT_MS[0] <= elapsed <= CACHE_HIT_MS[1]

    def test_frame_block_page_is_cache_miss(self, bed, fetcher):
        rng = random.Random(1)
        state, elapsed = execute_task(
            frame_task(bed, FilterMode.HTTP_BLOCKPAGE), fetcher, rng
        )
        assert state is ResultState.FAILURE
        assert CACHE_MISS_MS[0] <= elapsed <= CACHE_MISS_MS[1]

    def test_frame_transport_failure_has_no_elapsed(self, bed, fetcher):
        state, elapsed = execute_task(frame_task(bed, FilterMode.TCP_RESET), fetcher)
        assert state is ResultState.FAILURE
        assert elapsed is None
