import pytest
from hypothesis import given, strategies as st

from crossprobe.model import (
    ClientContext,
    BrowserFamily,
    DetectionConfig,
    HarDocument,
    HarEntry,
    MeasurementResult,
    MeasurementTask,
    PatternKind,
    RegionStats,
    ResultState,
    StyleProbe,
    TargetPattern,
    TaskType,
    UrlParseError,
    canonicalize_resource_key,
    pattern_matches,
)

# A structured URL strategy: always parseable, covers odd but legal shapes.
_hosts = st.from_regex(r"[a-z]([a-z0-9-]{0,8}[a-z0-9])?(\.[a-z]{2,6}){1,2}", fullmatch=True)
_paths = st.from_regex(r"(/[A-Za-z0-9._~%-]{0,10}){0,4}", fullmatch=True)
_urls = st.builds(
    lambda scheme, host, port, path, query: (
        f"{scheme}://{host}{port}{path}{query}"
    ),
    st.sampled_from(["http", "https", "HTTP", "Https"]),
    _hosts,
    st.sampled_from(["", ":80", ":443", ":8080"]),
    _paths,
    st.sampled_from(["", "?a=1", "?utm=x&b=2"]),
)


class TestCanonicalizeResourceKey:
    def test_normalization_rules(self):
        assert canonicalize_resource_key("HTTP://Example.COM:80/a?x=1") == "http://example.com/a"

    def test_already_canonical(self):
        assert canonicalize_resource_key("https://t.co/abc") == "https://t.co/abc"

    def test_malformed_input(self):
        with pytest.raises(UrlParseError):
            canonicalize_resource_key("not a url")

    def test_default_https_port_elided_nondefault_kept(self):
        assert canonicalize_resource_key("https://a.com:443/x") == "https://a.com/x"
        assert canonicalize_resource_key("http://a.com:8080/x") == "http://a.com:8080/x"

    def test_fragment_dropped(self):
        assert canonicalize_resource_key("http://a.com/x#frag") == "http://a.com/x"

    @given(_urls)
    def test_idempotent(self, url):
        once = canonicalize_resource_key(url)
        assert canonicalize_resource_key(once) == once


class TestPatternMatching:
    def test_exact_matches_only_itself(self):
        p = TargetPattern(PatternKind.EXACT_URL, "http://a.com/p")
        assert pattern_matches(p, "http://a.com/p")
        assert not pattern_matches(p, "http://a.com/p2")
        assert not pattern_matches(p, "http://a.com/p?x=1")

    def test_domain_matches_on_host(self):
        p = TargetPattern(PatternKind.DOMAIN_WILDCARD, "http://foo.com")
        assert pattern_matches(p, "http://foo.com/anything?q=1")
        assert pattern_matches(p, "https://FOO.com/other")
        assert not pattern_matches(p, "http://sub.foo.com/")
        assert not pattern_matches(p, "http://bar.com/foo.com")

    def test_prefix_matches_string_prefix(self):
        p = TargetPattern(PatternKind.PREFIX_WILDCARD, "http://foo.com/blog/")
        assert pattern_matches(p, "http://foo.com/blog/post-1")
        assert not pattern_matches(p, "http://foo.com/about")

    @given(_urls, _urls)
    def test_deterministic_pure_function(self, a, b):
        p = TargetPattern(PatternKind.EXACT_URL, a)
        first = pattern_matches(p, b)
        assert pattern_matches(p, b) == first
        assert pattern_matches(p, a) is True

    def test_wildcard_value_rejects_query(self):
        with pytest.raises(ValueError):
            TargetPattern(PatternKind.DOMAIN_WILDCARD, "http://foo.com/?q=1")
        with pytest.raises(UrlParseError):
            TargetPattern(PatternKind.DOMAIN_WILDCARD, "foo.com")  # not absolute


class TestTypeInvariants:
    def test_har_entry_rejects_negative_size(self):
        with pytest.raises(ValueError):
            HarEntry("http://a.com/x", 200, "image/png", -1, False, True)

    def test_har_entry_rejects_bad_status(self):
        with pytest.raises(ValueError):
            HarEntry("http://a.com/x", 0, "image/png", 1, False, True)
        with pytest.raises(ValueError):
            HarEntry("http://a.com/x", 700, "image/png", 1, False, True)

    def test_document_total_recomputed(self):
        doc = HarDocument(
            page_url="http://a.com/",
            entries=(
                HarEntry("http://a.com/1", 200, "image/png", 300, False, True),
                HarEntry("http://a.com/2", 200, "text/css", 700, False, False),
            ),
        )
        assert doc.total_bytes == 1000

    def test_region_stats_bounds(self):
        RegionStats("http://a.com/x", "US", 5, 5)
        with pytest.raises(ValueError):
            RegionStats("http://a.com/x", "US", 5, 6)
        with pytest.raises(ValueError):
            RegionStats("http://a.com/x", "US", -1, 0)

    def test_detection_config_bounds(self):
        with pytest.raises(ValueError):
            DetectionConfig(null_success_rate=1.0)
        with pytest.raises(ValueError):
            DetectionConfig(alpha=0.0)

    def test_region_must_be_iso_or_unknown(self):
        ClientContext("c", "PK", BrowserFamily.CHROME)
        ClientContext("c", "ZZ", BrowserFamily.CHROME)
        with pytest.raises(ValueError):
            ClientContext("c", "zz", BrowserFamily.CHROME)
        with pytest.raises(ValueError):
            ClientContext("c", "XX", BrowserFamily.CHROME)

    def test_measurement_result_rejects_negative_elapsed(self):
        context = ClientContext("c", "US", BrowserFamily.CHROME)
        with pytest.raises(ValueError):
            MeasurementResult("id", ResultState.SUCCESS, 0.0, context, elapsed_ms=-1.0)

    def test_inline_frame_requires_page_url(self):
        with pytest.raises(ValueError):
            MeasurementTask("id", TaskType.INLINE_FRAME, "http://a.com/i.png", 100)

    def test_stylesheet_requires_probe(self):
        with pytest.raises(ValueError):
            MeasurementTask("id", TaskType.STYLESHEET, "http://a.com/s.css", 100)


class TestTaskWire:
    def test_round_trip(self):
        task = MeasurementTask(
            measurement_id="483cd281-1b48-4b0a-95c5-5a2d94ef3f28",
            task_type=TaskType.STYLESHEET,
            resource_url="http://a.com/s.css",
            max_bytes=900,
            style_probe=StyleProbe("p.probe", "color", "blue"),
        )
        assert MeasurementTask.from_wire(task.to_wire()) == task

    def test_script_wire_carries_safety_flags(self):
        task = MeasurementTask(
            measurement_id="483cd281-1b48-4b0a-95c5-5a2d94ef3f28",
            task_type=TaskType.SCRIPT,
            resource_url="http://a.com/lib.js",
            max_bytes=900,
            script_safe=True,
        )
        wire = task.to_wire()
        assert wire["chromeOnly"] is True
        assert wire["scriptSafe"] is True

    def test_noop_is_not_a_task(self):
        with pytest.raises(ValueError):
            MeasurementTask.from_wire({"taskType": "noop", "measurementId": "x"})
