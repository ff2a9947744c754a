"""Procedural generator of synthetic panorama pairs with change labels.

Scenes are flat building facades on a sky/ground backdrop, rendered onto a
600x2400 strip that is cut into the four 600x600 heading images of one
panorama capture. Each location carries a structural description (buildings
with positions, heights, facade colors, window grids) plus nuisance
parameters (global brightness and hue, season, foreground occluders), and
optionally an anomaly marker (blank/rotated/dark captures).

The change class between two captures of one location is derived
deterministically from the description delta:

    5  either capture is anomalous
    4  building added/removed, or a height changed by more than 40%
    3  a facade color or window grid changed
    2  season differs, snow present, or occluder coverage moved by > 0.1
    1  anything else (brightness/hue drift only)

Deliberately low-fidelity: what matters downstream is that nuisance and
structural variation are cleanly separable, not photorealism.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .imaging import save_image
from .seeding import substream

STRIP_HEIGHT = 600
STRIP_WIDTH = 2400
TILE = 600
HORIZON = 430
N_SLOTS = 4

SEASONS = ("summer", "autumn", "winter")
ANOMALIES = ("blank", "rotated", "dark")

FACADE_PALETTE = (
    (0.62, 0.36, 0.28),  # brick
    (0.82, 0.78, 0.66),  # cream
    (0.55, 0.57, 0.60),  # slate
    (0.70, 0.52, 0.36),  # tan
    (0.44, 0.30, 0.26),  # brown
    (0.75, 0.68, 0.55),  # sand
    (0.58, 0.62, 0.55),  # sage
    (0.78, 0.56, 0.44),  # terracotta
    (0.50, 0.44, 0.52),  # mauve
    (0.66, 0.70, 0.74),  # pale gray
)

VEHICLE_PALETTE = (
    (0.72, 0.12, 0.14),
    (0.16, 0.22, 0.55),
    (0.80, 0.80, 0.82),
    (0.15, 0.15, 0.17),
    (0.55, 0.57, 0.60),
    (0.22, 0.42, 0.26),
)

# Season palettes are kept close on purpose: the seasonal footprint must
# read as nuisance, not rival a facade rebuild in pixel mass.
SKY_TOP = {"summer": (0.42, 0.55, 0.78), "autumn": (0.48, 0.55, 0.72), "winter": (0.54, 0.58, 0.68)}
SKY_HORIZON = {"summer": (0.72, 0.80, 0.90), "autumn": (0.78, 0.78, 0.78), "winter": (0.78, 0.80, 0.84)}
GROUND = {"summer": (0.42, 0.47, 0.36), "autumn": (0.46, 0.42, 0.33), "winter": (0.70, 0.71, 0.76)}
VERGE = {"summer": (0.26, 0.46, 0.24), "autumn": (0.54, 0.38, 0.18), "winter": (0.52, 0.51, 0.50)}
CANOPY = {"summer": (0.20, 0.42, 0.20), "autumn": (0.52, 0.35, 0.14), "winter": (0.38, 0.36, 0.34)}

STRUCTURAL_HEIGHT_RATIO = 1.4     # beyond: major change (class 4)
OCCLUDER_DELTA_THRESHOLD = 0.1    # beyond: noticeable occlusion change (class 2)
MAX_OCCLUDER_COVERAGE = 0.5


@dataclass(frozen=True)
class BuildingSpec:
    """One flat facade on the strip."""

    x0: int
    width: int
    height: int
    facade_color: tuple[float, float, float]
    roof_style: str  # "flat" | "banded"
    win_rows: int
    win_cols: int


@dataclass(frozen=True)
class OccluderSpec:
    """A foreground vehicle or tree rectangle."""

    kind: str  # "vehicle" | "tree"
    x0: int
    width: int
    height: int
    color: tuple[float, float, float]

    @property
    def area(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to render one capture of one location."""

    location_id: int
    buildings: tuple[BuildingSpec, ...]
    brightness: float
    hue_shift: float
    season: str
    occluders: tuple[OccluderSpec, ...]
    anomaly: str | None = None

    def __post_init__(self):
        spans = sorted((b.x0, b.x0 + b.width) for b in self.buildings)
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ValueError(f"overlapping building strips at {a1} > {b0}")
        if not (0.0 <= self.occluder_coverage <= MAX_OCCLUDER_COVERAGE):
            raise ValueError(f"occluder coverage {self.occluder_coverage:.3f} outside [0, 0.5]")
        if self.season not in SEASONS:
            raise ValueError(f"unknown season {self.season!r}")
        if self.anomaly is not None and self.anomaly not in ANOMALIES:
            raise ValueError(f"unknown anomaly {self.anomaly!r}")

    @property
    def occluder_coverage(self) -> float:
        return sum(o.area for o in self.occluders) / (STRIP_HEIGHT * STRIP_WIDTH)


@dataclass(frozen=True)
class LabeledPair:
    spec_a: SceneSpec
    spec_b: SceneSpec
    class_label: int


def derive_class(spec_a: SceneSpec, spec_b: SceneSpec) -> int:
    """Change class 1..5 between two captures of the same location.

    Symmetric in its arguments; only the rule-relevant fields are inspected
    (brightness and hue drift alone never raise the class above 1).
    """
    if spec_a.location_id != spec_b.location_id:
        raise ValueError(
            f"location mismatch: {spec_a.location_id} vs {spec_b.location_id}"
        )
    if spec_a.anomaly or spec_b.anomaly:
        return 5

    a = sorted(spec_a.buildings, key=lambda b: b.x0)
    b = sorted(spec_b.buildings, key=lambda b: b.x0)
    if len(a) != len(b) or any(x.x0 != y.x0 for x, y in zip(a, b)):
        return 4
    for x, y in zip(a, b):
        hi, lo = max(x.height, y.height), min(x.height, y.height)
        if hi / lo > STRUCTURAL_HEIGHT_RATIO:
            return 4
    for x, y in zip(a, b):
        if x.facade_color != y.facade_color or (x.win_rows, x.win_cols) != (y.win_rows, y.win_cols):
            return 3

    if spec_a.season != spec_b.season:
        return 2
    if "winter" in (spec_a.season, spec_b.season):
        return 2
    if abs(spec_a.occluder_coverage - spec_b.occluder_coverage) > OCCLUDER_DELTA_THRESHOLD:
        return 2
    return 1


# ---------------------------------------------------------------------------
# Random scene construction


def _round_color(color) -> tuple[float, float, float]:
    return tuple(round(float(c), 4) for c in color)


def _random_building(rng: np.random.Generator, slot: int) -> BuildingSpec:
    width = int(rng.integers(300, 520))
    x0 = int(rng.integers(slot * TILE + 24, (slot + 1) * TILE - 24 - width))
    height = int(rng.integers(140, 380))
    base = FACADE_PALETTE[int(rng.integers(len(FACADE_PALETTE)))]
    color = _round_color(np.clip(np.array(base) + rng.uniform(-0.03, 0.03, 3), 0.05, 0.95))
    return BuildingSpec(
        x0=x0,
        width=width,
        height=height,
        facade_color=color,
        roof_style=str(rng.choice(["flat", "banded"])),
        win_rows=int(rng.integers(2, 7)),
        win_cols=int(rng.integers(3, 10)),
    )


def _random_occluders(rng: np.random.Generator, target_coverage: float) -> tuple[OccluderSpec, ...]:
    occluders = []
    area_budget = target_coverage * STRIP_HEIGHT * STRIP_WIDTH
    used = 0.0
    while used < area_budget and len(occluders) < 10:
        if rng.random() < 0.5:
            kind, width, height = "vehicle", int(rng.integers(90, 200)), int(rng.integers(60, 110))
            base = VEHICLE_PALETTE[int(rng.integers(len(VEHICLE_PALETTE)))]
            color = _round_color(np.clip(np.array(base) + rng.uniform(-0.04, 0.04, 3), 0.02, 0.98))
        else:
            kind, width, height = "tree", int(rng.integers(90, 180)), int(rng.integers(140, 260))
            color = (0.0, 0.0, 0.0)  # canopy color comes from the season at render time
        x0 = int(rng.integers(0, STRIP_WIDTH - width))
        occluders.append(OccluderSpec(kind=kind, x0=x0, width=width, height=height, color=color))
        used += width * height
    return tuple(occluders)


def _draw_nuisance(rng: np.random.Generator) -> tuple[float, float]:
    return float(rng.uniform(-0.2, 0.2)), float(rng.uniform(-0.1, 0.1))


def random_scene(location_id: int, rng: np.random.Generator, season: str | None = None) -> SceneSpec:
    """A fresh base scene: 1-4 buildings in distinct slots plus nuisance."""
    n_buildings = int(rng.integers(1, N_SLOTS + 1))
    slots = sorted(rng.choice(N_SLOTS, size=n_buildings, replace=False).tolist())
    buildings = tuple(_random_building(rng, s) for s in slots)
    brightness, hue = _draw_nuisance(rng)
    occluders = _random_occluders(rng, float(rng.uniform(0.0, 0.25)))
    return SceneSpec(
        location_id=location_id,
        buildings=buildings,
        brightness=brightness,
        hue_shift=hue,
        season=season or str(rng.choice(SEASONS)),
        occluders=occluders,
        anomaly=None,
    )


def _evolve_nuisance(spec: SceneSpec, rng: np.random.Generator,
                     season_change_prob: float, occluder_churn_prob: float) -> SceneSpec:
    brightness, hue = _draw_nuisance(rng)
    season = spec.season
    if rng.random() < season_change_prob:
        season = str(rng.choice([s for s in SEASONS if s != spec.season]))
    occluders = spec.occluders
    if rng.random() < occluder_churn_prob:
        occluders = _random_occluders(rng, float(rng.uniform(0.0, 0.25)))
    return replace(spec, brightness=brightness, hue_shift=hue, season=season, occluders=occluders)


def _distant_repaint(color, rng: np.random.Generator) -> tuple[float, float, float]:
    """A palette color clearly different from ``color`` (renovations must show)."""
    while True:
        base = FACADE_PALETTE[int(rng.integers(len(FACADE_PALETTE)))]
        cand = _round_color(np.clip(np.array(base) + rng.uniform(-0.03, 0.03, 3), 0.05, 0.95))
        dist = math.sqrt(sum((a - b) ** 2 for a, b in zip(cand, color)))
        if dist >= 0.3:
            return cand


def _minor_change(spec: SceneSpec, rng: np.random.Generator) -> SceneSpec:
    """Renovate: repaint and/or regrid one or two buildings (class 3)."""
    buildings = list(spec.buildings)
    n_touch = 1 if len(buildings) == 1 or rng.random() < 0.5 else 2
    for idx in rng.choice(len(buildings), size=n_touch, replace=False):
        b = buildings[idx]
        mode = str(rng.choice(["repaint", "rewindow", "both"]))
        new_color, new_grid = b.facade_color, (b.win_rows, b.win_cols)
        if mode in ("repaint", "both"):
            new_color = _distant_repaint(b.facade_color, rng)
        if mode in ("rewindow", "both"):
            while True:
                new_grid = (int(rng.integers(2, 7)), int(rng.integers(3, 10)))
                if new_grid != (b.win_rows, b.win_cols):
                    break
        buildings[idx] = replace(b, facade_color=new_color, win_rows=new_grid[0], win_cols=new_grid[1])
    return replace(spec, buildings=tuple(buildings))


def _major_change(spec: SceneSpec, rng: np.random.Generator) -> SceneSpec:
    """Add/remove/rebuild a building (class 4)."""
    buildings = list(spec.buildings)
    used_slots = {b.x0 // TILE for b in buildings}
    options = ["rebuild"]
    if len(buildings) < N_SLOTS:
        options.append("add")
    if len(buildings) >= 2:
        options.append("remove")
    choice = str(rng.choice(options))
    if choice == "add":
        free = sorted(set(range(N_SLOTS)) - used_slots)
        slot = int(rng.choice(free))
        buildings.append(_random_building(rng, slot))
        buildings.sort(key=lambda b: b.x0)
    elif choice == "remove":
        buildings.pop(int(rng.integers(len(buildings))))
    else:
        idx = int(rng.integers(len(buildings)))
        b = buildings[idx]
        if b.height <= 230:
            factor = float(rng.uniform(1.55, 1.65))
        else:
            factor = float(rng.uniform(0.38, 0.6))
        new_height = int(np.clip(round(b.height * factor), 60, 388))
        base = FACADE_PALETTE[int(rng.integers(len(FACADE_PALETTE)))]
        color = _round_color(np.clip(np.array(base) + rng.uniform(-0.03, 0.03, 3), 0.05, 0.95))
        buildings[idx] = replace(
            b,
            height=new_height,
            facade_color=color,
            roof_style="banded" if b.roof_style == "flat" else "flat",
            win_rows=int(rng.integers(2, 7)),
            win_cols=int(rng.integers(3, 10)),
        )
    return replace(spec, buildings=tuple(buildings))


def make_pair(spec_a: SceneSpec, target_class: int, rng: np.random.Generator) -> SceneSpec:
    """Construct a second capture realizing exactly ``target_class``."""
    if target_class == 1:
        brightness, hue = _draw_nuisance(rng)
        return replace(spec_a, brightness=brightness, hue_shift=hue)
    if target_class == 2:
        out = replace(spec_a, brightness=_draw_nuisance(rng)[0], hue_shift=float(rng.uniform(-0.1, 0.1)))
        trigger = str(rng.choice(["season", "occluders"]))
        if trigger == "season":
            out = replace(out, season=str(rng.choice([s for s in SEASONS if s != spec_a.season])))
        else:
            cov = spec_a.occluder_coverage
            low = cov + OCCLUDER_DELTA_THRESHOLD + 0.03 <= 0.4
            target = cov + 0.13 + float(rng.uniform(0, 0.1)) if low else max(cov - 0.13 - float(rng.uniform(0, 0.1)), 0.0)
            out = replace(out, occluders=_random_occluders(rng, target))
            if abs(out.occluder_coverage - cov) <= OCCLUDER_DELTA_THRESHOLD:
                out = replace(out, season=str(rng.choice([s for s in SEASONS if s != spec_a.season])))
        return out
    if target_class == 3:
        return _evolve_nuisance(_minor_change(spec_a, rng), rng, 0.5, 0.5)
    if target_class == 4:
        return _evolve_nuisance(_major_change(spec_a, rng), rng, 0.5, 0.5)
    if target_class == 5:
        out = _evolve_nuisance(spec_a, rng, 0.5, 0.5)
        return replace(out, anomaly=str(rng.choice(list(ANOMALIES))))
    raise ValueError(f"target_class must be 1..5, got {target_class}")


# ---------------------------------------------------------------------------
# Rendering

_SEASON_BASE_CACHE: dict[str, np.ndarray] = {}


def _season_base(season: str) -> np.ndarray:
    """Sky gradient + ground + verge band for one season (float32 strip)."""
    cached = _SEASON_BASE_CACHE.get(season)
    if cached is None:
        strip = np.empty((STRIP_HEIGHT, STRIP_WIDTH, 3), dtype=np.float32)
        t = np.linspace(0.0, 1.0, HORIZON, dtype=np.float32)[:, None]
        top = np.array(SKY_TOP[season], dtype=np.float32)
        bottom = np.array(SKY_HORIZON[season], dtype=np.float32)
        strip[:HORIZON] = ((1 - t) * top + t * bottom)[:, None, :]
        ground = np.array(GROUND[season], dtype=np.float32)
        shade = np.linspace(1.0, 0.82, STRIP_HEIGHT - HORIZON, dtype=np.float32)[:, None, None]
        strip[HORIZON:] = ground * shade
        strip[HORIZON - 16 : HORIZON] = np.array(VERGE[season], dtype=np.float32)
        _SEASON_BASE_CACHE[season] = strip
        cached = strip
    return cached.copy()


def _paint_building(strip: np.ndarray, b: BuildingSpec) -> None:
    top = HORIZON - b.height
    x1 = b.x0 + b.width
    facade = np.array(b.facade_color, dtype=np.float32)
    strip[top:HORIZON, b.x0:x1] = facade
    # roof band
    roof_top = max(top - 12, 0)
    if b.roof_style == "flat":
        strip[roof_top:top, b.x0:x1] = np.array([0.22, 0.22, 0.24], dtype=np.float32)
    else:
        strip[roof_top:top, b.x0:x1] = facade * 0.5
    # window grid, inset 8% each side
    my, mx = max(int(0.08 * b.height), 2), max(int(0.06 * b.width), 2)
    gy0, gy1 = top + my, HORIZON - int(0.18 * b.height)
    gx0, gx1 = b.x0 + mx, x1 - mx
    if gy1 > gy0 and gx1 > gx0:
        cell_h = (gy1 - gy0) / b.win_rows
        cell_w = (gx1 - gx0) / b.win_cols
        win = np.array([0.08, 0.09, 0.13], dtype=np.float32)
        for r in range(b.win_rows):
            wy0 = gy0 + int(r * cell_h + 0.22 * cell_h)
            wy1 = gy0 + int(r * cell_h + 0.78 * cell_h)
            for c in range(b.win_cols):
                wx0 = gx0 + int(c * cell_w + 0.22 * cell_w)
                wx1 = gx0 + int(c * cell_w + 0.78 * cell_w)
                strip[wy0:wy1, wx0:wx1] = win
    # sign patch near street level; tied to the facade color so that a
    # repaint also reads as a storefront change
    sign = np.clip(0.95 - facade[::-1] * 0.8, 0.05, 0.95).astype(np.float32)
    sy0 = HORIZON - int(0.14 * b.height)
    sx0 = b.x0 + int(0.25 * b.width)
    sx1 = b.x0 + int(0.75 * b.width)
    strip[sy0 : HORIZON - int(0.04 * b.height), sx0:sx1] = sign


def _paint_occluder(strip: np.ndarray, o: OccluderSpec, season: str) -> None:
    if o.kind == "vehicle":
        y0 = HORIZON - int(o.height * 0.75)
        y1 = y0 + o.height
        body = np.array(o.color, dtype=np.float32)
        strip[y0:y1, o.x0 : o.x0 + o.width] = body
        cab_h = max(int(o.height * 0.3), 2)
        strip[y0 : y0 + cab_h, o.x0 + int(0.15 * o.width) : o.x0 + int(0.85 * o.width)] = body * 0.45
    else:
        trunk_w = max(int(o.width * 0.12), 4)
        trunk_x = o.x0 + (o.width - trunk_w) // 2
        strip[HORIZON - int(o.height * 0.45) : HORIZON + 10, trunk_x : trunk_x + trunk_w] = np.array(
            [0.26, 0.18, 0.12], dtype=np.float32
        )
        canopy = np.array(CANOPY[season], dtype=np.float32)
        cy0 = HORIZON - o.height
        cy1 = HORIZON - int(o.height * 0.35)
        strip[cy0:cy1, o.x0 : o.x0 + o.width] = canopy


def _hue_rotation_matrix(shift: float) -> np.ndarray:
    """Rotation of the RGB cube about the gray axis by ``shift`` turns.

    Grays are fixed points; chromatic colors rotate their hue. Linear, so it
    is cheap on a full strip and commutes with the sky-gradient blending.
    """
    theta = 2.0 * math.pi * shift
    c, s = math.cos(theta), math.sin(theta)
    a = c + (1.0 - c) / 3.0
    b = (1.0 - c) / 3.0 - s / math.sqrt(3.0)
    d = (1.0 - c) / 3.0 + s / math.sqrt(3.0)
    return np.array([[a, b, d], [d, a, b], [b, d, a]], dtype=np.float32)


def render_strip(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Render the full 600x2400 strip (float32 in [0, 1], before anomalies)."""
    strip = _season_base(spec.season)
    if spec.season == "winter":
        speckle = rng.uniform(-0.06, 0.06, size=(STRIP_HEIGHT - HORIZON, STRIP_WIDTH, 1)).astype(np.float32)
        strip[HORIZON:] += speckle
    for b in sorted(spec.buildings, key=lambda b: b.x0):
        _paint_building(strip, b)
    for o in spec.occluders:
        _paint_occluder(strip, o, spec.season)
    if spec.hue_shift != 0.0:
        rot = _hue_rotation_matrix(spec.hue_shift)
        strip = (strip.reshape(-1, 3) @ rot.T).reshape(strip.shape)
    if spec.brightness != 0.0:
        np.add(strip, np.float32(spec.brightness), out=strip)
    np.clip(strip, 0.0, 1.0, out=strip)
    return strip


def render(spec: SceneSpec, seed: int) -> list[np.ndarray]:
    """Render the four 600x600 heading images of one capture.

    Pure function of (spec, seed): the seed drives only stochastic texture
    (winter speckle). Anomalies transform the finished headings: blank
    captures are all black, rotated ones are turned 90 degrees, dark ones
    are scaled to 5% brightness.
    """
    rng = substream(int(seed), "render", spec.location_id)
    strip = render_strip(spec, rng)
    tiles = [strip[:, i * TILE : (i + 1) * TILE].copy() for i in range(N_SLOTS)]
    if spec.anomaly == "blank":
        tiles = [np.zeros_like(t) for t in tiles]
    elif spec.anomaly == "rotated":
        tiles = [np.ascontiguousarray(np.rot90(t)) for t in tiles]
    elif spec.anomaly == "dark":
        tiles = [t * np.float32(0.05) for t in tiles]
    return tiles


# ---------------------------------------------------------------------------
# Corpus generation


@dataclass
class SynthConfig:
    """Knobs for one synthetic corpus."""

    locations: int
    years: tuple[int, ...]
    zones: int = 2
    seed: int = 0
    zone_fraction: float = 0.25
    p_structural_in: float = 0.6   # per first->last interval, inside zones
    p_structural_out: float = 0.1
    p_minor: float = 0.5           # structural changes that are minor (class 3)
    anomaly_rate: float = 0.02     # applied to the final capture of a location
    season_change_prob: float = 2.0 / 3.0
    occluder_churn_prob: float = 0.5
    class_mix: tuple[float, float, float, float, float] | None = None
    origin_lat: float = 51.30
    origin_lon: float = -0.18
    spacing: float = 1e-3          # grid step in degrees; >> location snap
    compress_level: int = 1

    def validate(self) -> None:
        if self.locations < 1:
            raise ConfigError("locations must be >= 1")
        years = sorted(set(int(y) for y in self.years))
        if len(years) < 2:
            raise ConfigError("need at least 2 distinct years")
        if any(y < 2000 or y > 2100 for y in years):
            raise ConfigError("years must lie in [2000, 2100]")
        if self.zones < 0:
            raise ConfigError("zones must be >= 0")
        for name in ("zone_fraction", "p_structural_in", "p_structural_out", "p_minor",
                     "anomaly_rate", "season_change_prob", "occluder_churn_prob"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.class_mix is not None:
            if len(self.class_mix) != 5 or any(p < 0 for p in self.class_mix):
                raise ConfigError("class_mix needs 5 non-negative weights")
            if not math.isclose(sum(self.class_mix), 1.0, rel_tol=1e-9):
                raise ConfigError("class_mix must sum to 1")

    @property
    def sorted_years(self) -> tuple[int, ...]:
        return tuple(sorted(set(int(y) for y in self.years)))


@dataclass
class GroundTruthRow:
    location_id: int
    lat: float
    lon: float
    in_zone: bool
    class_label: int


@dataclass
class CorpusResult:
    out_dir: str
    manifest_path: str
    ground_truth_path: str
    zones_path: str
    images_dir: str
    class_counts: dict[int, int]
    n_locations: int
    years: tuple[int, ...]


def _grid_shape(n: int) -> tuple[int, int]:
    ncols = int(math.ceil(math.sqrt(n)))
    nrows = int(math.ceil(n / ncols))
    return nrows, ncols


def _place_zones(config: SynthConfig, nrows: int, ncols: int) -> list[tuple[int, int, int, int]]:
    """K axis-aligned index-space rectangles (r0, r1, c0, c1), half-open."""
    if config.zones == 0 or config.zone_fraction <= 0:
        return []
    rng = substream(config.seed, "synth", "zones")
    per_zone = config.zone_fraction / config.zones
    h = max(1, round(nrows * math.sqrt(per_zone)))
    w = max(1, round(ncols * math.sqrt(per_zone)))
    rects: list[tuple[int, int, int, int]] = []
    for _ in range(config.zones):
        placed = None
        for _attempt in range(200):
            r0 = int(rng.integers(0, max(nrows - h, 0) + 1))
            c0 = int(rng.integers(0, max(ncols - w, 0) + 1))
            cand = (r0, r0 + h, c0, c0 + w)
            if all(cand[1] <= o[0] or cand[0] >= o[1] or cand[3] <= o[2] or cand[2] >= o[3] for o in rects):
                placed = cand
                break
        rects.append(placed if placed is not None else cand)
    return rects


def _in_any_rect(r: int, c: int, rects) -> bool:
    return any(r0 <= r < r1 and c0 <= c < c1 for r0, r1, c0, c1 in rects)


def _location_specs(config: SynthConfig, loc_id: int, in_zone: bool) -> dict[int, SceneSpec]:
    """Scene specs for every year of one location (independent substream)."""
    rng = substream(config.seed, "synth", "scene", loc_id)
    years = config.sorted_years

    if config.class_mix is not None:
        target = int(rng.choice(np.arange(1, 6), p=np.asarray(config.class_mix, dtype=float)))
        season = str(rng.choice(["summer", "autumn"])) if target == 1 else None
        first = random_scene(loc_id, rng, season=season)
        last = make_pair(first, target, rng)
        structural_at = len(years) - 1
    else:
        first = random_scene(loc_id, rng)
        p_structural = config.p_structural_in if in_zone else config.p_structural_out
        last = first
        structural_at = len(years) - 1
        if rng.random() < p_structural:
            if rng.random() < config.p_minor:
                last = _minor_change(first, rng)
            else:
                last = _major_change(first, rng)
            structural_at = int(rng.integers(1, len(years)))
        last = _evolve_nuisance(last, rng, config.season_change_prob, config.occluder_churn_prob)
        if rng.random() < config.anomaly_rate:
            last = replace(last, anomaly=str(rng.choice(list(ANOMALIES))))

    specs = {years[0]: first, years[-1]: last}
    for i, year in enumerate(years[1:-1], start=1):
        base = last if i >= structural_at else first
        base = replace(base, anomaly=None)
        specs[year] = _evolve_nuisance(
            base, rng, config.season_change_prob, config.occluder_churn_prob
        )
    return specs


def _emit_location(config: SynthConfig, loc_id: int, lat: float, lon: float,
                   in_zone: bool, out_dir: str | None) -> tuple[int, list[dict]]:
    """Render and save one location's captures; return its label and manifest entries."""
    years = config.sorted_years
    specs = _location_specs(config, loc_id, in_zone)
    label = derive_class(specs[years[0]], specs[years[-1]])
    entries = []
    if out_dir is None:  # labels-only corpus
        return label, entries
    for year in years:
        pano_id = f"loc{loc_id:05d}_y{year}"
        seed_y = int(substream(config.seed, "synth", "render-seed", loc_id, year).integers(0, 2**31))
        tiles = render(specs[year], seed_y)
        entry = {"pano_id": pano_id, "lat": lat, "lon": lon, "year": year}
        for heading, tile in zip((0, 90, 180, 270), tiles):
            rel = f"images/{pano_id}_{heading:03d}.png"
            save_image(os.path.join(out_dir, rel), tile, compress_level=config.compress_level)
            entry[f"img_{heading:03d}"] = rel
        entries.append(entry)
    return label, entries


def generate_corpus(config: SynthConfig, out_dir, workers: int = 1,
                    render_images: bool = True) -> CorpusResult:
    """Write a manifest-driven corpus plus ground truth and zone polygons.

    Deterministic: identical config produces byte-identical output. Every
    per-location draw comes from a substream keyed by location id, so the
    result is independent of generation order and of ``workers``.

    With ``render_images=False`` only the ground truth and zone files are
    written (no manifest, no images): cheap for statistical checks on the
    label process alone.
    """
    config.validate()
    out_dir = os.fspath(out_dir)
    images_dir = os.path.join(out_dir, "images")
    if render_images:
        os.makedirs(images_dir, exist_ok=True)
    else:
        os.makedirs(out_dir, exist_ok=True)
    years = config.sorted_years
    nrows, ncols = _grid_shape(config.locations)
    rects = _place_zones(config, nrows, ncols)

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    truth_path = os.path.join(out_dir, "ground_truth.csv")
    zones_path = os.path.join(out_dir, "zones.geojson")

    sites = []
    for loc_id in range(config.locations):
        r, c = loc_id // ncols, loc_id % ncols
        lat = config.origin_lat + r * config.spacing
        lon = config.origin_lon + c * config.spacing
        sites.append((loc_id, lat, lon, _in_any_rect(r, c, rects)))

    emit_dir = out_dir if render_images else None
    if workers > 1 and render_images:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(lambda s: _emit_location(config, *s, emit_dir), sites, chunksize=4)
            )
    else:
        results = [_emit_location(config, *s, emit_dir) for s in sites]

    class_counts = {c: 0 for c in range(1, 6)}
    mf = open(manifest_path, "w", encoding="utf-8", newline="\n") if render_images else None
    try:
        with open(truth_path, "w", encoding="utf-8", newline="") as tf:
            truth = csv.writer(tf, lineterminator="\n")
            truth.writerow(["location_id", "lat", "lon", "in_zone", "class_label"])
            for (loc_id, lat, lon, in_zone), (label, entries) in zip(sites, results):
                class_counts[label] += 1
                truth.writerow([loc_id, repr(lat), repr(lon), int(in_zone), label])
                if mf is not None:
                    for entry in entries:
                        mf.write(json.dumps(entry) + "\n")
    finally:
        if mf is not None:
            mf.close()

    _write_zones_geojson(zones_path, rects, config)
    return CorpusResult(
        out_dir=out_dir,
        manifest_path=manifest_path if render_images else "",
        ground_truth_path=truth_path,
        zones_path=zones_path,
        images_dir=images_dir if render_images else "",
        class_counts=class_counts,
        n_locations=config.locations,
        years=years,
    )


def _write_zones_geojson(path, rects, config: SynthConfig) -> None:
    features = []
    for zone_id, (r0, r1, c0, c1) in enumerate(rects):
        lat0 = config.origin_lat + (r0 - 0.5) * config.spacing
        lat1 = config.origin_lat + (r1 - 0.5) * config.spacing
        lon0 = config.origin_lon + (c0 - 0.5) * config.spacing
        lon1 = config.origin_lon + (c1 - 0.5) * config.spacing
        ring = [[lon0, lat0], [lon1, lat0], [lon1, lat1], [lon0, lat1], [lon0, lat0]]
        features.append(
            {
                "type": "Feature",
                "properties": {"zone_id": zone_id},
                "geometry": {"type": "Polygon", "coordinates": [ring]},
            }
        )
    doc = {"type": "FeatureCollection", "features": features}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_ground_truth(path) -> list[GroundTruthRow]:
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                GroundTruthRow(
                    location_id=int(rec["location_id"]),
                    lat=float(rec["lat"]),
                    lon=float(rec["lon"]),
                    in_zone=rec["in_zone"] in ("1", "true", "True"),
                    class_label=int(rec["class_label"]),
                )
            )
    return rows
