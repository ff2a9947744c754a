"""Training batch construction: same-location pairs across years.

For each sampled location the first branch draws a panorama from a uniform
year; the second branch draws uniformly from the remaining years. Locations
observed in only one year fall back to a color-jittered copy of the first
branch. An epoch is one pass over all locations in a seeded shuffled order,
so every location anchors branch A exactly once per epoch.

All sampling randomness is counter-based: the batch at (seed, epoch, index)
has the same contents no matter which worker materializes it or in what
order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import LocationKey, PanoRecord
from .imaging import hsv_to_rgb, rgb_to_hsv
from .seeding import substream

DEFAULT_BATCH_SIZE = 48


@dataclass(frozen=True)
class JitterConfig:
    """Maximum magnitudes of the four color jitters (all >= 0)."""

    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    hue: float = 0.05

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} jitter must be >= 0")


def color_jitter(pano: np.ndarray, config: JitterConfig, rng: np.random.Generator) -> np.ndarray:
    """Randomly jitter brightness, contrast, saturation, and hue.

    Brightness is additive, contrast scales about the global mean, and
    saturation/hue operate in HSV space (saturation multiplicative, hue an
    additive shift that wraps). Applied in that order, then clipped to
    [0, 1]. Four deltas are always drawn, so the stream position does not
    depend on the config; an all-zero config returns the input
    bit-identically.
    """
    d_bright = float(rng.uniform(-config.brightness, config.brightness))
    d_contrast = float(rng.uniform(-config.contrast, config.contrast))
    d_sat = float(rng.uniform(-config.saturation, config.saturation))
    d_hue = float(rng.uniform(-config.hue, config.hue))

    out = np.asarray(pano, dtype=np.float32).copy()
    if d_bright != 0.0:
        out = out + np.float32(d_bright)
    if d_contrast != 0.0:
        mean = np.float32(out.mean())
        out = mean + (np.float32(1.0) + np.float32(d_contrast)) * (out - mean)
    if d_sat != 0.0 or d_hue != 0.0:
        hsv = rgb_to_hsv(np.clip(out, 0.0, 1.0))
        if d_sat != 0.0:
            hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + d_sat), 0.0, 1.0)
        if d_hue != 0.0:
            hsv[..., 0] = (hsv[..., 0] + d_hue) % 1.0
        out = hsv_to_rgb(hsv).astype(np.float32)
    if d_bright != 0.0 or d_contrast != 0.0 or d_sat != 0.0 or d_hue != 0.0:
        out = np.clip(out, 0.0, 1.0)
    return out


@dataclass
class PairBatch:
    """Two aligned panorama branches plus provenance."""

    panos_a: np.ndarray  # (N, 128, 512, 3) float32
    panos_b: np.ndarray
    keys: list[LocationKey]
    years_a: list[int]
    years_b: list[int]
    provenance: list[str] = field(default_factory=list)  # "cross_year" | "jittered"

    def __len__(self) -> int:
        return self.panos_a.shape[0]

    @property
    def jitter_fraction(self) -> float:
        if not self.provenance:
            return 0.0
        return sum(p == "jittered" for p in self.provenance) / len(self.provenance)


CorpusIndex = dict[LocationKey, dict[int, list[PanoRecord]]]


def _draw_pair(years_map: dict[int, list[PanoRecord]], rng: np.random.Generator):
    years = sorted(years_map)
    year_a = int(years[rng.integers(len(years))])
    rec_a = years_map[year_a][int(rng.integers(len(years_map[year_a])))]
    others = [y for y in years if y != year_a]
    if others:
        year_b = int(others[rng.integers(len(others))])
        rec_b = years_map[year_b][int(rng.integers(len(years_map[year_b])))]
        return rec_a, rec_b, "cross_year"
    return rec_a, rec_a, "jittered"


def _build_batch(index: CorpusIndex, keys, rng, loader, jitter: JitterConfig) -> PairBatch:
    panos_a, panos_b = [], []
    years_a, years_b, provenance = [], [], []
    for key in keys:
        rec_a, rec_b, kind = _draw_pair(index[key], rng)
        pano_a = loader(rec_a)
        if kind == "cross_year":
            pano_b = loader(rec_b)
        else:
            pano_b = color_jitter(pano_a, jitter, rng)
        panos_a.append(pano_a)
        panos_b.append(pano_b)
        years_a.append(rec_a.year)
        years_b.append(rec_b.year)
        provenance.append(kind)
    return PairBatch(
        panos_a=np.stack(panos_a),
        panos_b=np.stack(panos_b),
        keys=list(keys),
        years_a=years_a,
        years_b=years_b,
        provenance=provenance,
    )


def sample_pair_batch(
    index: CorpusIndex,
    batch_size: int,
    rng: np.random.Generator,
    loader,
    jitter: JitterConfig | None = None,
) -> PairBatch:
    """One ad-hoc batch: locations drawn without replacement.

    ``loader`` maps a PanoRecord to its assembled panorama (see
    ``PanoramaStack.for_record``).
    """
    if not index:
        raise ValueError("empty corpus index")
    keys = sorted(index)
    take = min(batch_size, len(keys))
    chosen = [keys[i] for i in rng.choice(len(keys), size=take, replace=False)]
    return _build_batch(index, chosen, rng, loader, jitter or JitterConfig())


def epoch_batch_count(n_locations: int, batch_size: int) -> int:
    if n_locations <= batch_size:
        return 1
    n_full = n_locations // batch_size
    rem = n_locations - n_full * batch_size
    # a single leftover cannot form a train batch; it rides with the last one
    return n_full + (1 if rem >= 2 else 0)


def epoch_batches(
    index: CorpusIndex,
    batch_size: int,
    master_seed: int,
    epoch: int,
    loader,
    jitter: JitterConfig | None = None,
    start_batch: int = 0,
):
    """Yield (batch_index, PairBatch) over one epoch.

    Every location appears exactly once as a branch-A anchor. Batch contents
    are a pure function of (master_seed, epoch, batch_index); ``start_batch``
    resumes mid-epoch without replaying earlier batches.
    """
    if not index:
        raise ValueError("empty corpus index")
    jitter = jitter or JitterConfig()
    keys = sorted(index)
    order = substream(master_seed, "sampler", "order", epoch).permutation(len(keys))
    n_batches = epoch_batch_count(len(keys), batch_size)
    for b in range(start_batch, n_batches):
        lo = b * batch_size
        hi = min(lo + batch_size, len(keys))
        if b == n_batches - 1:
            hi = len(keys)  # absorb a single leftover location
        chosen = [keys[i] for i in order[lo:hi]]
        rng = substream(master_seed, "sampler", "batch", epoch, b)
        yield b, _build_batch(index, chosen, rng, loader, jitter)
