"""Statistical inference over collected region statistics.

Two independent detectors live here: a one-sided exact binomial test that
flags a region when its probe success count is improbably low under the
no-filtering null while every comparison region passes, and a timing
classifier that separates cache-hit from cache-miss loads for the
inline-frame channel.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from statistics import median
from typing import Iterable, Sequence

from crossprobe.model import (
    UNKNOWN_REGION,
    DetectionConfig,
    FilteringVerdict,
    RegionStats,
)

REASON_TOO_FEW_SAMPLES = "insufficient data"
REASON_NO_COMPARISON = "insufficient comparison regions"
REASON_UNKNOWN_REGION = "unknown region excluded"
REASON_OTHERS_ALSO_FAIL = "another region also fails the null"


def _exact_pmf(n: int, p: float, k: int) -> float:
    # Exact rational anchor: Fraction(p) is the float's true value, so the
    # only rounding is the final correctly-rounded float conversion.
    fp = Fraction(p)
    return float(math.comb(n, k) * fp**k * (1 - fp) ** (n - k))


def binomial_pmf_vector(n: int, p: float) -> list[float]:
    """All probabilities Pr[Binomial(n, p) = k] for k = 0..n.

    Anchored exactly at the distribution mode, then extended outward with
    the term ratio recurrence. Working outward from the largest term keeps
    the relative error of every significant term at a few ulps; terms that
    underflow to zero are genuinely negligible.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0, 1)")
    if n == 0:
        return [1.0]
    q = 1.0 - p
    mode = int((n + 1) * p)
    if mode > n:
        mode = n
    pmf = [0.0] * (n + 1)
    pmf[mode] = _exact_pmf(n, p, mode)
    ratio_up = p / q
    t = pmf[mode]
    for k in range(mode, n):
        t *= (n - k) / (k + 1) * ratio_up
        pmf[k + 1] = t
    ratio_down = q / p
    t = pmf[mode]
    for k in range(mode, 0, -1):
        t *= k / (n - k + 1) * ratio_down
        pmf[k - 1] = t
    return pmf


def binomial_cdf(n: int, p: float, x: int) -> float:
    """Exact Pr[Binomial(n, p) <= x], no normal approximation.

    The approximation is unsafe at the small per-region sample counts this
    platform sees, so the tail is always summed exactly.
    """
    if not isinstance(x, int):
        raise ValueError("x must be an integer")
    if x < 0 or x > n:
        raise ValueError(f"x must be in [0, n], got x={x}, n={n}")
    if x == n:
        return 1.0
    s = math.fsum(binomial_pmf_vector(n, p)[: x + 1])
    return min(1.0, max(0.0, s))


def binomial_cdf_all(n: int, p: float) -> list[float]:
    """binomial_cdf for every x = 0..n in one O(n) pass.

    Elementwise equal (to a few ulps) to calling binomial_cdf per x; the
    cumulative sum is compensated so no error accumulates across the sweep.
    """
    pmf = binomial_pmf_vector(n, p)
    out = [0.0] * (n + 1)
    total = 0.0
    comp = 0.0  # Neumaier compensation
    for k, term in enumerate(pmf):
        t = total + term
        if abs(total) >= abs(term):
            comp += (total - t) + term
        else:
            comp += (term - t) + total
        total = t
        out[k] = min(1.0, max(0.0, total + comp))
    out[n] = 1.0
    return out


def detect(stats: Sequence[RegionStats], cfg: DetectionConfig) -> list[FilteringVerdict]:
    """Decide, per region, whether one resource looks filtered there.

    A region is flagged only when it fails the one-sided binomial test at
    cfg.alpha AND every other region with enough samples passes it; the
    strict all-others-pass reading minimizes false positives. Regions with
    unknown geolocation or fewer than cfg.min_samples measurements are never
    flagged and never serve as comparisons.
    """
    if not stats:
        return []
    keys = {s.resource_key for s in stats}
    if len(keys) > 1:
        raise ValueError(f"detect() takes stats for a single resource, got {sorted(keys)}")
    seen: set[str] = set()
    for s in stats:
        if s.region in seen:
            raise ValueError(f"duplicate stats for region {s.region}")
        seen.add(s.region)

    p_values = {
        s.region: binomial_cdf(s.total, cfg.null_success_rate, s.successes) for s in stats
    }
    eligible = [
        s for s in stats if s.region != UNKNOWN_REGION and s.total >= cfg.min_samples
    ]
    eligible_regions = {s.region for s in eligible}

    verdicts = []
    for s in stats:
        pv = p_values[s.region]
        comparisons = tuple(
            (r, p_values[r]) for r in sorted(eligible_regions - {s.region})
        )
        flagged = False
        reason = None
        if s.region == UNKNOWN_REGION:
            reason = REASON_UNKNOWN_REGION
        elif s.region not in eligible_regions:
            reason = REASON_TOO_FEW_SAMPLES
        elif len(eligible) < 2:
            reason = REASON_NO_COMPARISON
        elif pv <= cfg.alpha:
            if all(other_pv > cfg.alpha for _, other_pv in comparisons):
                flagged = True
            else:
                reason = REASON_OTHERS_ALSO_FAIL
        verdicts.append(
            FilteringVerdict(
                resource_key=s.resource_key,
                region=s.region,
                p_value=pv,
                flagged=flagged,
                total=s.total,
                successes=s.successes,
                comparison_regions=comparisons,
                reason=reason,
            )
        )
    return verdicts


class TimingClass(Enum):
    CACHED_LIKELY_LOADED = "cached-likely-loaded"
    UNCACHED_LIKELY_FILTERED = "uncached-likely-filtered"


@dataclass(frozen=True)
class TimingClassifierConfig:
    """Cached loads finish tens of milliseconds faster than uncached ones;
    the threshold is the minimum separation treated as a cache hit."""

    cached_threshold_ms: float = 50.0

    def __post_init__(self) -> None:
        if self.cached_threshold_ms <= 0:
            raise ValueError("cached_threshold_ms must be positive")


def classify_iframe_timing(
    baseline_uncached_ms: Sequence[float],
    observed_ms: float,
    cfg: TimingClassifierConfig = TimingClassifierConfig(),
) -> TimingClass:
    """Was an observed image load a cache hit (page loaded) or a miss?

    With baseline samples of uncached load times, a hit must beat their
    median by the configured threshold; without a baseline the threshold is
    applied to the observation directly.
    """
    if observed_ms < 0:
        raise ValueError("observed_ms must be non-negative")
    if baseline_uncached_ms:
        cutoff = median(baseline_uncached_ms) - cfg.cached_threshold_ms
    else:
        cutoff = cfg.cached_threshold_ms
    if observed_ms < cutoff:
        return TimingClass.CACHED_LIKELY_LOADED
    return TimingClass.UNCACHED_LIKELY_FILTERED


def load_region_stats(lines: Iterable[str]) -> list[RegionStats]:
    """Parse JSON-lines rows of {resourceKey, region, total, successes}."""
    out = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        row = json.loads(line)
        out.append(
            RegionStats(
                resource_key=row["resourceKey"],
                region=row["region"],
                total=int(row["total"]),
                successes=int(row["successes"]),
            )
        )
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="detect", description="Run the per-region filtering test over region stats."
    )
    parser.add_argument("--stats", required=True, help="region stats JSONL file")
    parser.add_argument("--p", type=float, default=0.7, help="null success probability")
    parser.add_argument("--alpha", type=float, default=0.05, help="significance level")
    parser.add_argument("--min-samples", type=int, default=5)
    parser.add_argument("--out", required=True, help="verdict JSON output path")
    args = parser.parse_args(argv)

    cfg = DetectionConfig(
        null_success_rate=args.p, alpha=args.alpha, min_samples=args.min_samples
    )
    with open(args.stats, encoding="utf-8") as fh:
        stats = load_region_stats(fh)

    by_key: dict[str, list[RegionStats]] = {}
    for s in stats:
        by_key.setdefault(s.resource_key, []).append(s)

    verdicts = []
    for key in sorted(by_key):
        verdicts.extend(detect(by_key[key], cfg))
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump([v.to_wire() for v in verdicts], fh, indent=2)
        fh.write("\n")

    flagged = [v for v in verdicts if v.flagged]
    print(f"{len(by_key)} resources, {len(verdicts)} region verdicts, {len(flagged)} flagged")
    for v in flagged:
        print(f"  FLAGGED {v.resource_key} in {v.region} (p={v.p_value:.3g})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
