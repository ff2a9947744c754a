"""Embed a corpus with a trained encoder and map per-location change.

Change between two chosen years is the cosine distance between the two
captures' embeddings at each location present in both years. Locations with
several captures in one year are mean-pooled before the distance and the
resulting record is flagged.

Embedding stores persist as a small binary file: magic ``S2V1``, u32 row
count, u32 embedding dimension, u8 source tag, then row-major
little-endian float32. A sidecar CSV (``<store>.index.csv``) carries
``row,pano_id,lat,lon,year``. Change maps persist as CSV
``lat,lon,year_a,year_b,d_cos,flags``.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .corpus import (
    DEFAULT_SNAP_DEGREES,
    LocationKey,
    PanoRecord,
    PanoramaStack,
    load_manifest,
    location_key,
)
from .encoder import Encoder
from .errors import AnalyticsError, Street2VecError

STORE_MAGIC = b"S2V1"
SOURCE_TAGS = ("street2vec", "baseline", "imported")
_TAG_TO_BYTE = {name: i for i, name in enumerate(SOURCE_TAGS)}

FEATURE_SOURCES = ("backbone", "projector")


@dataclass
class StoreRow:
    pano_id: str
    lat: float
    lon: float
    year: int


@dataclass
class EmbeddingStore:
    """N embedding rows plus their location/year index and provenance tag."""

    embeddings: np.ndarray  # (N, D) float32
    rows: list[StoreRow]
    source: str = "street2vec"

    def __post_init__(self):
        if self.source not in SOURCE_TAGS:
            raise ValueError(f"source must be one of {SOURCE_TAGS}, got {self.source!r}")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.rows):
            raise ValueError(
                f"embeddings {self.embeddings.shape} do not match {len(self.rows)} index rows"
            )

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def save(self, path) -> None:
        path = os.fspath(path)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        emb = np.ascontiguousarray(self.embeddings, dtype="<f4")
        with open(path, "wb") as fh:
            fh.write(STORE_MAGIC)
            fh.write(struct.pack("<I", emb.shape[0]))
            fh.write(struct.pack("<I", emb.shape[1]))
            fh.write(struct.pack("<B", _TAG_TO_BYTE[self.source]))
            fh.write(emb.tobytes())
        with open(index_sidecar_path(path), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["row", "pano_id", "lat", "lon", "year"])
            for i, row in enumerate(self.rows):
                writer.writerow([i, row.pano_id, repr(row.lat), repr(row.lon), row.year])

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        path = os.fspath(path)
        try:
            fh = open(path, "rb")
        except OSError as exc:
            raise Street2VecError(f"cannot open embedding store {path}: {exc}") from exc
        with fh:
            magic = fh.read(4)
            if magic != STORE_MAGIC:
                raise Street2VecError(f"{path} is not an embedding store (magic {magic!r})")
            header = fh.read(9)
            if len(header) != 9:
                raise Street2VecError(f"truncated store header in {path}")
            n, d = struct.unpack("<II", header[:8])
            tag_byte = header[8]
            if tag_byte >= len(SOURCE_TAGS):
                raise Street2VecError(f"unknown source tag byte {tag_byte} in {path}")
            raw = fh.read(4 * n * d)
            if len(raw) != 4 * n * d:
                raise Street2VecError(f"truncated store data in {path}")
            if fh.read(1):
                raise Street2VecError(f"trailing bytes in {path}")
        emb = np.frombuffer(raw, dtype="<f4").reshape(n, d).copy()
        rows = []
        with open(index_sidecar_path(path), "r", encoding="utf-8", newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(
                    StoreRow(pano_id=rec["pano_id"], lat=float(rec["lat"]),
                             lon=float(rec["lon"]), year=int(rec["year"]))
                )
        if len(rows) != n:
            raise Street2VecError(
                f"store {path} has {n} rows but sidecar lists {len(rows)}"
            )
        return cls(embeddings=emb, rows=rows, source=SOURCE_TAGS[tag_byte])


def index_sidecar_path(store_path) -> str:
    return os.fspath(store_path) + ".index.csv"


def concat_stores(stores: list[EmbeddingStore]) -> EmbeddingStore:
    """Stack stores of the same source and dimension (row order preserved)."""
    if not stores:
        raise ValueError("no stores to concatenate")
    if len({s.dim for s in stores}) != 1 or len({s.source for s in stores}) != 1:
        raise ValueError("stores differ in dimension or source tag")
    return EmbeddingStore(
        embeddings=np.concatenate([s.embeddings for s in stores], axis=0),
        rows=[r for s in stores for r in s.rows],
        source=stores[0].source,
    )


@dataclass
class EmbedResult:
    store: EmbeddingStore
    skipped: list[tuple[str, str]]  # (pano_id, reason)


def embed_records(
    records: list[PanoRecord],
    encoder: Encoder,
    feature_source: str = "projector",
    source_tag: str = "street2vec",
    batch_size: int = 64,
    loader=None,
) -> EmbedResult:
    """Embed every complete record once, in record order, eval mode.

    Records whose images fail to load are skipped and reported, never
    zero-filled. ``loader`` may supply pre-assembled panoramas (such as
    ``PanoramaStack.row``); by default images are read from disk.
    """
    if feature_source not in FEATURE_SOURCES:
        raise ValueError(f"feature_source must be one of {FEATURE_SOURCES}")
    complete = [r for r in records if r.complete]
    if loader is None:
        stack = PanoramaStack.build(complete, on_error="skip")
        usable = [r for r, ok in zip(complete, stack.valid) if ok]
        skipped = [(pid, reason) for _, pid, reason in stack.skipped]
        get = stack.for_record
    else:
        usable, skipped, get = complete, [], loader

    dim = encoder.config.embedding_dim if feature_source == "projector" else encoder.config.feature_dim
    emb = np.zeros((len(usable), dim), dtype=np.float32)
    for lo in range(0, len(usable), batch_size):
        chunk = usable[lo : lo + batch_size]
        batch = np.stack([get(r) for r in chunk])
        fwd = encoder.forward(batch, mode="eval")
        emb[lo : lo + len(chunk)] = fwd.embeddings if feature_source == "projector" else fwd.features
    rows = [StoreRow(pano_id=r.pano_id, lat=r.lat, lon=r.lon, year=r.year) for r in usable]
    return EmbedResult(store=EmbeddingStore(embeddings=emb, rows=rows, source=source_tag),
                       skipped=skipped)


def embed_manifest(manifest_path, checkpoint_path, feature_source: str = "projector",
                   source_tag: str = "street2vec", batch_size: int = 64, loader=None) -> EmbedResult:
    encoder = Encoder.from_checkpoint(checkpoint_path)
    records = load_manifest(manifest_path).records
    return embed_records(records, encoder, feature_source=feature_source,
                         source_tag=source_tag, batch_size=batch_size, loader=loader)


def cosine_distance(x: np.ndarray, y: np.ndarray) -> float:
    """1 - cos(angle between x and y); in [0, 2], symmetric, scale-free.

    Zero-norm inputs are an error: a zero embedding means a dead network or
    corrupt input, and a silent sentinel would poison area statistics.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise AnalyticsError("cosine distance undefined for zero-norm input")
    d = 1.0 - float(x @ y) / (nx * ny)
    return float(min(max(d, 0.0), 2.0))


@dataclass
class ChangeRecord:
    key: LocationKey
    lat: float
    lon: float
    year_a: int
    year_b: int
    d_cos: float
    flags: tuple[str, ...] = ()


@dataclass
class ChangeMapResult:
    records: list[ChangeRecord]
    n_missing_year: int  # locations observed in only one of the two years
    n_pooled: int        # locations where some year had several captures


def change_map(store: EmbeddingStore, year_a: int, year_b: int,
               snap: float = DEFAULT_SNAP_DEGREES) -> ChangeMapResult:
    """One ChangeRecord per location with embeddings in both years.

    Results are sorted by location key. Years are reported with
    year_a < year_b regardless of argument order.
    """
    if year_a == year_b:
        raise AnalyticsError("year_a and year_b must differ")
    year_a, year_b = min(year_a, year_b), max(year_a, year_b)
    years_present = {row.year for row in store.rows}
    for year in (year_a, year_b):
        if year not in years_present:
            raise AnalyticsError(f"year {year} absent from store (has {sorted(years_present)})")

    grouped: dict[LocationKey, dict[int, list[int]]] = {}
    coords: dict[LocationKey, list[tuple[float, float]]] = {}
    for i, row in enumerate(store.rows):
        key = location_key(row.lat, row.lon, snap)
        grouped.setdefault(key, {}).setdefault(row.year, []).append(i)
        coords.setdefault(key, []).append((row.lat, row.lon))

    records: list[ChangeRecord] = []
    n_missing = 0
    n_pooled = 0
    for key in sorted(grouped):
        years = grouped[key]
        if year_a not in years or year_b not in years:
            n_missing += 1
            continue
        flags = []
        vecs = {}
        for year in (year_a, year_b):
            idx = years[year]
            v = store.embeddings[idx].astype(np.float64)
            if len(idx) > 1:
                flags.append("pooled")
                v = v.mean(axis=0)
            else:
                v = v[0]
            vecs[year] = v
        if "pooled" in flags:
            n_pooled += 1
        pts = coords[key]
        lat = sum(p[0] for p in pts) / len(pts)
        lon = sum(p[1] for p in pts) / len(pts)
        records.append(
            ChangeRecord(
                key=key, lat=lat, lon=lon, year_a=year_a, year_b=year_b,
                d_cos=cosine_distance(vecs[year_a], vecs[year_b]),
                flags=tuple(sorted(set(flags))),
            )
        )
    return ChangeMapResult(records=records, n_missing_year=n_missing, n_pooled=n_pooled)


def write_changes_csv(path, records: list[ChangeRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lat", "lon", "year_a", "year_b", "d_cos", "flags"])
        for r in records:
            writer.writerow([repr(r.lat), repr(r.lon), r.year_a, r.year_b,
                             repr(r.d_cos), ";".join(r.flags)])


def read_changes_csv(path, snap: float = DEFAULT_SNAP_DEGREES) -> list[ChangeRecord]:
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            lat, lon = float(rec["lat"]), float(rec["lon"])
            records.append(
                ChangeRecord(
                    key=location_key(lat, lon, snap), lat=lat, lon=lon,
                    year_a=int(rec["year_a"]), year_b=int(rec["year_b"]),
                    d_cos=float(rec["d_cos"]),
                    flags=tuple(f for f in rec["flags"].split(";") if f),
                )
            )
    return records
