"""Area statistics, zone hypothesis tests, and class-labeled evaluation.

Covers the downstream numbers of the pipeline: per-area medians and 75th
quantiles of change, zone-vs-rest significance (rank test and permutation
test), per-class distance reports, and the separation comparison between
two embedding sources.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .change import ChangeRecord
from .corpus import location_key
from .errors import AnalyticsError
from .seeding import substream

EXACT_RANK_TEST_LIMIT = 12     # total sample size up to which the U test enumerates
DEFAULT_PERMUTATIONS = 10_000
CLASS_HISTOGRAM_BINS = 50
CLASS_HISTOGRAM_RANGE = (0.0, 1.2)


def quantile(values, q: float) -> float:
    """Order statistic with linear interpolation at position (n-1)*q."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise AnalyticsError("quantile of empty data")
    if not (0.0 <= q <= 1.0):
        raise AnalyticsError(f"q must be in [0, 1], got {q}")
    pos = (v.size - 1) * q
    lo = int(math.floor(pos))
    frac = pos - lo
    if frac == 0.0:
        return float(v[lo])
    return float(v[lo] + frac * (v[lo + 1] - v[lo]))


# ---------------------------------------------------------------------------
# GeoJSON polygons and point-in-polygon


@dataclass
class AreaFeature:
    area_id: str
    polygons: list[list[list[tuple[float, float]]]]  # polygons -> rings -> (lon, lat)
    properties: dict
    is_zone: bool


def _validate_ring(ring, feature_label: str):
    if len(ring) < 4:
        raise AnalyticsError(f"feature {feature_label}: ring has {len(ring)} points, need >= 4")
    if tuple(ring[0]) != tuple(ring[-1]):
        raise AnalyticsError(f"feature {feature_label}: ring is not closed")
    return [(float(x), float(y)) for x, y in ring]


def load_area_features(source) -> list[AreaFeature]:
    """Parse a GeoJSON FeatureCollection of Polygon/MultiPolygon features.

    The area identifier comes from an ``area_id`` or ``zone_id`` property
    (``zone_id`` also marks the feature as a zone), falling back to the
    feature index.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    else:
        doc = source
    if doc.get("type") != "FeatureCollection":
        raise AnalyticsError(f"expected a FeatureCollection, got {doc.get('type')!r}")
    features = []
    for i, feat in enumerate(doc.get("features", [])):
        props = feat.get("properties") or {}
        is_zone = "zone_id" in props
        area_id = str(props.get("area_id", props.get("zone_id", i)))
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        if gtype == "Polygon":
            polys = [geom["coordinates"]]
        elif gtype == "MultiPolygon":
            polys = geom["coordinates"]
        else:
            raise AnalyticsError(f"feature {area_id}: unsupported geometry {gtype!r}")
        validated = [[_validate_ring(ring, area_id) for ring in poly] for poly in polys]
        features.append(AreaFeature(area_id=area_id, polygons=validated,
                                    properties=props, is_zone=is_zone))
    return features


def point_in_rings(lon: float, lat: float, rings) -> bool:
    """Even-odd crossing rule over all rings (holes flip parity)."""
    inside = False
    for ring in rings:
        for (x1, y1), (x2, y2) in zip(ring, ring[1:]):
            if (y1 > lat) != (y2 > lat):
                x_cross = x1 + (lat - y1) * (x2 - x1) / (y2 - y1)
                if lon < x_cross:
                    inside = not inside
    return inside


def feature_contains(feature: AreaFeature, lon: float, lat: float) -> bool:
    return any(point_in_rings(lon, lat, poly) for poly in feature.polygons)


@dataclass
class AreaStats:
    area_id: str
    n_points: int
    mean: float
    median: float
    q75: float
    in_zone: bool


@dataclass
class AggregateResult:
    stats: list[AreaStats]
    outside_count: int


def aggregate_areas(changes: list[ChangeRecord], features: list[AreaFeature]) -> AggregateResult:
    """Per-area change statistics by point-in-polygon assignment.

    Each point counts once, toward the first feature (file order) that
    contains it; points outside every feature are tallied separately, so
    point totals are conserved.
    """
    if not changes:
        raise AnalyticsError("no change records to aggregate")
    buckets: dict[str, list[float]] = {f.area_id: [] for f in features}
    outside = 0
    for rec in changes:
        for feat in features:
            if feature_contains(feat, rec.lon, rec.lat):
                buckets[feat.area_id].append(rec.d_cos)
                break
        else:
            outside += 1
    stats = []
    for feat in features:
        values = buckets[feat.area_id]
        if not values:
            continue
        stats.append(
            AreaStats(
                area_id=feat.area_id,
                n_points=len(values),
                mean=float(np.mean(values)),
                median=quantile(values, 0.5),
                q75=quantile(values, 0.75),
                in_zone=feat.is_zone,
            )
        )
    return AggregateResult(stats=stats, outside_count=outside)


def write_area_stats_csv(path, result: AggregateResult) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["area_id", "n_points", "mean", "median", "q75", "in_zone"])
        for s in result.stats:
            writer.writerow([s.area_id, s.n_points, repr(s.mean), repr(s.median),
                             repr(s.q75), int(s.in_zone)])


def write_area_stats_geojson(path, result: AggregateResult, features: list[AreaFeature]) -> None:
    by_id = {s.area_id: s for s in result.stats}
    out_features = []
    for feat in features:
        s = by_id.get(feat.area_id)
        if s is None:
            continue
        geometry = (
            {"type": "Polygon", "coordinates": [[list(pt) for pt in ring] for ring in feat.polygons[0]]}
            if len(feat.polygons) == 1
            else {"type": "MultiPolygon",
                  "coordinates": [[[list(pt) for pt in ring] for ring in poly] for poly in feat.polygons]}
        )
        out_features.append(
            {
                "type": "Feature",
                "properties": {
                    "area_id": s.area_id, "n_points": s.n_points, "mean": s.mean,
                    "median": s.median, "q75": s.q75, "in_zone": s.in_zone,
                },
                "geometry": geometry,
            }
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"type": "FeatureCollection", "features": out_features}, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Rank and permutation tests


def _u_statistic(x, y) -> float:
    """Count of (x_i > y_j) pairs, ties counting half."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    greater = (x[:, None] > y[None, :]).sum()
    ties = (x[:, None] == y[None, :]).sum()
    return float(greater) + 0.5 * float(ties)


@dataclass
class RankTestResult:
    u: float
    p_value: float
    exact: bool
    alternative: str
    n_x: int
    n_y: int


def mann_whitney_u(x, y, alternative: str = "two_sided", method: str = "auto") -> RankTestResult:
    """Rank-sum test of two independent samples.

    ``method="exact"`` enumerates all C(n_x + n_y, n_x) group assignments
    of the pooled values (ties included); ``"normal"`` uses the
    tie-corrected normal approximation with continuity correction.
    ``"auto"`` picks exact for total sizes up to 12.
    """
    x = list(map(float, x))
    y = list(map(float, y))
    if not x or not y:
        raise AnalyticsError("both samples must be non-empty")
    if alternative not in ("two_sided", "greater", "less"):
        raise AnalyticsError(f"unknown alternative {alternative!r}")
    if method == "auto":
        method = "exact" if len(x) + len(y) <= EXACT_RANK_TEST_LIMIT else "normal"
    u_obs = _u_statistic(x, y)
    n_x, n_y = len(x), len(y)

    if method == "exact":
        pooled = x + y
        total = 0
        count_ge = 0
        count_le = 0
        eps = 1e-12
        for idx in itertools.combinations(range(len(pooled)), n_x):
            xs = [pooled[i] for i in idx]
            rest = [pooled[i] for i in range(len(pooled)) if i not in set(idx)]
            u = _u_statistic(xs, rest)
            total += 1
            if u >= u_obs - eps:
                count_ge += 1
            if u <= u_obs + eps:
                count_le += 1
        p_greater = count_ge / total
        p_less = count_le / total
        if alternative == "greater":
            p = p_greater
        elif alternative == "less":
            p = p_less
        else:
            p = min(1.0, 2.0 * min(p_greater, p_less))
        return RankTestResult(u=u_obs, p_value=p, exact=True, alternative=alternative,
                              n_x=n_x, n_y=n_y)

    pooled = np.concatenate([x, y])
    order = np.argsort(pooled, kind="mergesort")
    ranks = np.empty(len(pooled))
    sorted_vals = pooled[order]
    i = 0
    rank_pos = np.arange(1, len(pooled) + 1, dtype=np.float64)
    tie_term = 0.0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = rank_pos[i : j + 1].mean()
        t = j - i + 1
        tie_term += t**3 - t
        i = j + 1
    n = n_x + n_y
    mu = n_x * n_y / 2.0
    var = n_x * n_y / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        # all values identical: no evidence either way
        return RankTestResult(u=u_obs, p_value=1.0, exact=False, alternative=alternative,
                              n_x=n_x, n_y=n_y)
    sd = math.sqrt(var)

    def sf(z: float) -> float:
        return 0.5 * math.erfc(z / math.sqrt(2.0))

    if alternative == "greater":
        z = (u_obs - mu - 0.5) / sd
        p = sf(z)
    elif alternative == "less":
        z = (u_obs - mu + 0.5) / sd
        p = 1.0 - sf(z)
    else:
        z = (abs(u_obs - mu) - 0.5) / sd
        p = min(1.0, 2.0 * sf(z))
    return RankTestResult(u=u_obs, p_value=p, exact=False, alternative=alternative,
                          n_x=n_x, n_y=n_y)


@dataclass
class PermutationTestResult:
    observed: float
    p_value: float
    n_permutations: int
    statistic: str


def permutation_test(x, y, statistic: str = "median",
                     n_permutations: int = DEFAULT_PERMUTATIONS,
                     seed: int = 0) -> PermutationTestResult:
    """One-sided label-permutation test of stat(x) - stat(y) > 0.

    Uses the add-one estimator p = (1 + #{perm >= observed}) / (N + 1);
    the permutation stream derives from the master seed's ``permtest``
    substream, so results are reproducible and thread-count independent.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise AnalyticsError("both samples must be non-empty")
    stat_q = {"median": 0.5, "q75": 0.75}
    if statistic not in stat_q:
        raise AnalyticsError(f"statistic must be one of {sorted(stat_q)}")
    q = stat_q[statistic]
    observed = quantile(x, q) - quantile(y, q)
    pooled = np.concatenate([x, y])
    rng = substream(seed, "permtest")
    hits = 0
    for _ in range(n_permutations):
        perm = rng.permutation(pooled.size)
        px = pooled[perm[: x.size]]
        py = pooled[perm[x.size :]]
        if quantile(px, q) - quantile(py, q) >= observed:
            hits += 1
    p = (1 + hits) / (n_permutations + 1)
    return PermutationTestResult(observed=observed, p_value=p,
                                 n_permutations=n_permutations, statistic=statistic)


@dataclass
class TestResult:
    statistic: str            # "median" | "q75"
    test: str                 # "mann_whitney_u" | "permutation"
    observed_diff: float      # stat(zone) - stat(rest)
    p_value: float
    n_zone: int
    n_rest: int
    exact: bool | None = None          # rank test only
    u_statistic: float | None = None   # rank test only
    n_permutations: int | None = None  # permutation test only
    seed: int | None = None

    def to_json_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def split_by_zone(changes: list[ChangeRecord], zone_features: list[AreaFeature]):
    zones = [f for f in zone_features if f.is_zone] or zone_features
    inside, outside = [], []
    for rec in changes:
        if any(feature_contains(f, rec.lon, rec.lat) for f in zones):
            inside.append(rec.d_cos)
        else:
            outside.append(rec.d_cos)
    return inside, outside


def zone_test(changes: list[ChangeRecord], zone_features: list[AreaFeature],
              statistic: str = "median", method: str = "mann_whitney_u",
              seed: int = 0, n_permutations: int = DEFAULT_PERMUTATIONS,
              alternative: str = "two_sided") -> TestResult:
    """Test whether point-level change differs between zone and rest."""
    inside, outside = split_by_zone(changes, zone_features)
    if not inside or not outside:
        raise AnalyticsError(
            f"need points on both sides of the zone split (zone={len(inside)}, rest={len(outside)})"
        )
    q = {"median": 0.5, "q75": 0.75}
    if statistic not in q:
        raise AnalyticsError(f"statistic must be one of {sorted(q)}")
    observed = quantile(inside, q[statistic]) - quantile(outside, q[statistic])
    if method == "mann_whitney_u":
        res = mann_whitney_u(inside, outside, alternative=alternative)
        return TestResult(statistic=statistic, test=method, observed_diff=observed,
                          p_value=res.p_value, n_zone=len(inside), n_rest=len(outside),
                          exact=res.exact, u_statistic=res.u)
    if method == "permutation":
        res = permutation_test(inside, outside, statistic=statistic,
                               n_permutations=n_permutations, seed=seed)
        return TestResult(statistic=statistic, test=method, observed_diff=observed,
                          p_value=res.p_value, n_zone=len(inside), n_rest=len(outside),
                          n_permutations=res.n_permutations, seed=seed)
    raise AnalyticsError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# Class-labeled evaluation


@dataclass
class ClassStats:
    label: int
    count: int
    mean: float | None
    std: float | None
    histogram: list[int]


@dataclass
class ClassReport:
    source: str
    classes: dict[int, ClassStats]
    bin_edges: list[float]
    n_pairs: int

    def to_json_dict(self) -> dict:
        return {
            "source": self.source,
            "n_pairs": self.n_pairs,
            "bin_edges": self.bin_edges,
            "classes": {
                str(c): {
                    "count": s.count,
                    "mean": s.mean,
                    "std": s.std,
                    "histogram": s.histogram,
                }
                for c, s in sorted(self.classes.items())
            },
        }


def class_report(changes: list[ChangeRecord], labels: dict, source: str) -> ClassReport:
    """Per-class count/mean/std and histogram of cosine distances.

    ``labels`` maps LocationKey -> class 1..5. Every labeled location must
    have a change record; offenders are reported together. Classes with no
    members appear with count 0 rather than being omitted.
    """
    by_key = {rec.key: rec.d_cos for rec in changes}
    missing = sorted(k for k in labels if k not in by_key)
    if missing:
        shown = ", ".join(str(tuple(k)) for k in missing[:5])
        raise AnalyticsError(
            f"{len(missing)} labeled locations lack change records (first: {shown})"
        )
    values: dict[int, list[float]] = {c: [] for c in range(1, 6)}
    for key, label in labels.items():
        if label not in values:
            raise AnalyticsError(f"class label {label!r} outside 1..5")
        values[label].append(by_key[key])
    edges = np.linspace(*CLASS_HISTOGRAM_RANGE, CLASS_HISTOGRAM_BINS + 1)
    classes = {}
    for c, vals in values.items():
        if vals:
            arr = np.asarray(vals)
            hist, _ = np.histogram(np.clip(arr, *CLASS_HISTOGRAM_RANGE), bins=edges)
            classes[c] = ClassStats(
                label=c, count=len(vals), mean=float(arr.mean()),
                std=float(arr.std(ddof=1)) if len(vals) > 1 else None,
                histogram=hist.tolist(),
            )
        else:
            classes[c] = ClassStats(label=c, count=0, mean=None, std=None,
                                    histogram=[0] * CLASS_HISTOGRAM_BINS)
    return ClassReport(source=source, classes=classes, bin_edges=edges.tolist(),
                       n_pairs=sum(len(v) for v in values.values()))


def labels_from_ground_truth(truth_rows, snap=None) -> dict:
    """Ground truth rows -> {LocationKey: class label}."""
    out = {}
    for row in truth_rows:
        key = location_key(row.lat, row.lon) if snap is None else location_key(row.lat, row.lon, snap)
        out[key] = row.class_label
    return out


@dataclass
class SeparationSummary:
    score_a: float
    score_b: float
    difference: float  # score_a - score_b
    source_a: str
    source_b: str

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)


def separation_score(report: ClassReport) -> float:
    """(mean class 4 - mean class 1) over the pooled std of classes 1 and 4."""
    c1, c4 = report.classes[1], report.classes[4]
    if c1.count < 2 or c4.count < 2:
        raise AnalyticsError("separation needs at least 2 members in classes 1 and 4")
    pooled_var = ((c1.count - 1) * c1.std**2 + (c4.count - 1) * c4.std**2) / (
        c1.count + c4.count - 2
    )
    # 1e-20 absorbs float noise from arithmetically constant inputs
    if pooled_var <= 1e-20:
        raise AnalyticsError("separation undefined: zero variance in classes 1 and 4")
    return (c4.mean - c1.mean) / math.sqrt(pooled_var)


def compare_sources(report_a: ClassReport, report_b: ClassReport) -> SeparationSummary:
    """Separation scores of two reports over the same labeled set."""
    counts_a = {c: s.count for c, s in report_a.classes.items()}
    counts_b = {c: s.count for c, s in report_b.classes.items()}
    if counts_a != counts_b:
        raise AnalyticsError(
            f"reports cover different labeled sets: {counts_a} vs {counts_b}"
        )
    score_a = separation_score(report_a)
    score_b = separation_score(report_b)
    return SeparationSummary(score_a=score_a, score_b=score_b,
                             difference=score_a - score_b,
                             source_a=report_a.source, source_b=report_b.source)
