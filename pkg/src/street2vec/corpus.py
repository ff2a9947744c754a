"""Data model and ingestion for geolocated, timestamped panoramas.

A corpus lives on disk as a JSON-lines manifest plus image files. Each
manifest line describes one panorama observation: an opaque ``pano_id``,
WGS84 coordinates, a calendar year, and four heading images (0/90/180/270
degrees) whose paths resolve relative to the manifest's directory.

Records from the same physical place are grouped through a quantized
coordinate key, and model inputs are built by resizing each heading image
to 128x128 and concatenating the four headings left to right into a
128x512x3 panorama with values in [0, 1].
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ManifestError, PanoramaError
from .imaging import area_resize, load_image, to_unit_float

log = logging.getLogger(__name__)

HEADINGS = (0, 90, 180, 270)
HEADING_FIELDS = {h: f"img_{h:03d}" for h in HEADINGS}

PANORAMA_HEIGHT = 128
PANORAMA_WIDTH = 512
TILE_SIZE = 128

DEFAULT_SNAP_DEGREES = 1e-5  # ~1.1 m at the equator


class LocationKey(NamedTuple):
    """Quantized (lat, lon): records with equal keys count as one location."""

    ilat: int
    ilon: int


def location_key(lat: float, lon: float, snap: float = DEFAULT_SNAP_DEGREES) -> LocationKey:
    return LocationKey(int(round(lat / snap)), int(round(lon / snap)))


@dataclass(frozen=True)
class PanoRecord:
    """One panorama observation: place, year, and four orientation images."""

    pano_id: str
    lat: float
    lon: float
    year: int
    images: dict[int, str | None] = field(compare=False)

    @property
    def complete(self) -> bool:
        return all(self.images.get(h) for h in HEADINGS)

    def key(self, snap: float = DEFAULT_SNAP_DEGREES) -> LocationKey:
        return location_key(self.lat, self.lon, snap)


@dataclass
class ManifestResult:
    """Parsed manifest: valid records (complete or flagged) plus skip log."""

    records: list[PanoRecord]
    skipped: list[tuple[int, str]]  # (1-based line number, reason)

    @property
    def complete_records(self) -> list[PanoRecord]:
        return [r for r in self.records if r.complete]

    @property
    def incomplete_records(self) -> list[PanoRecord]:
        return [r for r in self.records if not r.complete]


def _parse_line(obj: dict, base_dir: str) -> PanoRecord:
    pano_id = obj.get("pano_id")
    if not isinstance(pano_id, str) or not pano_id:
        raise ValueError("missing or non-string pano_id")
    lat, lon = obj.get("lat"), obj.get("lon")
    if not isinstance(lat, (int, float)) or not isinstance(lon, (int, float)):
        raise ValueError("lat/lon must be numbers")
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise ValueError(f"coordinates out of range: ({lat}, {lon})")
    year = obj.get("year")
    if not isinstance(year, int) or isinstance(year, bool):
        raise ValueError("year must be an integer")
    if not (2000 <= year <= 2100):
        raise ValueError(f"year {year} outside [2000, 2100]")
    images: dict[int, str | None] = {}
    for heading, fieldname in HEADING_FIELDS.items():
        rel = obj.get(fieldname)
        if rel is None:
            images[heading] = None
        elif isinstance(rel, str) and rel:
            images[heading] = os.path.join(base_dir, rel)
        else:
            raise ValueError(f"{fieldname} must be a non-empty string or absent")
    return PanoRecord(pano_id=pano_id, lat=float(lat), lon=float(lon), year=year, images=images)


def load_manifest(path) -> ManifestResult:
    """Read a JSON-lines manifest.

    Malformed lines are skipped with a logged warning carrying the line
    number; records missing one or more heading images are returned flagged
    incomplete rather than dropped, so downstream stages can report
    coverage gaps.
    """
    path = os.fspath(path)
    base_dir = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc

    records: list[PanoRecord] = []
    skipped: list[tuple[int, str]] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("line is not a JSON object")
            records.append(_parse_line(obj, base_dir))
        except ValueError as exc:
            skipped.append((lineno, str(exc)))
            log.warning("manifest %s line %d skipped: %s", path, lineno, exc)
    return ManifestResult(records=records, skipped=skipped)


def index_by_location(
    records: Iterable[PanoRecord], snap: float = DEFAULT_SNAP_DEGREES
) -> dict[LocationKey, dict[int, list[PanoRecord]]]:
    """Group records as location -> year -> observations.

    Every input record appears exactly once; keys and years iterate in
    sorted order so downstream passes are deterministic.
    """
    grouped: dict[LocationKey, dict[int, list[PanoRecord]]] = {}
    for rec in records:
        grouped.setdefault(rec.key(snap), {}).setdefault(rec.year, []).append(rec)
    return {
        key: {year: grouped[key][year] for year in sorted(grouped[key])}
        for key in sorted(grouped)
    }


def assemble_panorama(record: PanoRecord) -> np.ndarray:
    """Build the (128, 512, 3) float32 model input for one record.

    Each heading image is box-resampled to 128x128 and the four headings are
    concatenated left to right in fixed order 0, 90, 180, 270. Deterministic:
    the same files always produce a bit-identical tensor.
    """
    if not record.complete:
        raise PanoramaError(record.pano_id, "record is incomplete (missing heading images)")
    tiles = []
    for heading in HEADINGS:
        path = record.images[heading]
        try:
            raw = load_image(path)
        except Exception as exc:
            raise PanoramaError(record.pano_id, f"heading {heading} unreadable ({path}): {exc}") from exc
        tiles.append(area_resize(to_unit_float(raw), TILE_SIZE, TILE_SIZE))
    pano = np.concatenate(tiles, axis=1).astype(np.float32)
    if not np.isfinite(pano).all():
        raise PanoramaError(record.pano_id, "non-finite pixel values after assembly")
    return pano


class PanoramaStack:
    """Assembled panoramas for a record list, row-aligned with the list.

    Backs onto a float32 memmap when ``path`` is given (one .npy file),
    otherwise an in-memory array. ``skipped`` holds (row, pano_id, reason)
    for records that failed to assemble when ``on_error="skip"``.
    """

    def __init__(self, records: list[PanoRecord], panos: np.ndarray,
                 valid: np.ndarray, skipped: list[tuple[int, str, str]]):
        self.records = records
        self.panos = panos
        self.valid = valid
        self.skipped = skipped
        self._row_by_id = {}
        for i, rec in enumerate(records):
            self._row_by_id.setdefault(rec.pano_id, i)

    @classmethod
    def build(cls, records: list[PanoRecord], path=None, on_error: str = "raise",
              workers: int = 1) -> "PanoramaStack":
        records = list(records)
        shape = (len(records), PANORAMA_HEIGHT, PANORAMA_WIDTH, 3)
        if path is not None:
            panos = np.lib.format.open_memmap(os.fspath(path), mode="w+", dtype=np.float32, shape=shape)
        else:
            panos = np.zeros(shape, dtype=np.float32)
        valid = np.zeros(len(records), dtype=bool)
        skipped: list[tuple[int, str, str]] = []

        def _fill(i: int) -> tuple[int, str | None]:
            try:
                panos[i] = assemble_panorama(records[i])
                return i, None
            except PanoramaError as exc:
                if on_error == "raise":
                    raise
                return i, str(exc)

        if workers > 1 and len(records) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(_fill, range(len(records)), chunksize=8))
        else:
            outcomes = [_fill(i) for i in range(len(records))]
        for i, err in outcomes:
            if err is None:
                valid[i] = True
            else:
                skipped.append((i, records[i].pano_id, err))
                log.warning("panorama %s skipped: %s", records[i].pano_id, err)
        if path is not None:
            panos.flush()
        return cls(records, panos, valid, skipped)

    @classmethod
    def open(cls, records: list[PanoRecord], path) -> "PanoramaStack":
        """Reopen a previously built memmap for the same record list."""
        panos = np.load(os.fspath(path), mmap_mode="r")
        if panos.shape != (len(records), PANORAMA_HEIGHT, PANORAMA_WIDTH, 3):
            raise ManifestError(
                f"panorama cache {path} has shape {panos.shape}, "
                f"expected ({len(records)}, {PANORAMA_HEIGHT}, {PANORAMA_WIDTH}, 3)"
            )
        return cls(records, panos, np.ones(len(records), dtype=bool), [])

    def __len__(self) -> int:
        return len(self.records)

    def row(self, i: int) -> np.ndarray:
        return np.asarray(self.panos[i])

    def for_record(self, record: PanoRecord) -> np.ndarray:
        """Panorama for a record, looked up by pano_id (first occurrence)."""
        try:
            return self.row(self._row_by_id[record.pano_id])
        except KeyError:
            raise PanoramaError(record.pano_id, "record not present in this stack") from None
