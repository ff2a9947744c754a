import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from street2vec.corpus import (
    HEADINGS,
    LocationKey,
    PanoramaStack,
    assemble_panorama,
    index_by_location,
    load_manifest,
    location_key,
)
from street2vec.errors import ManifestError, PanoramaError
from street2vec.imaging import save_image


def write_record_images(root, pano_id, colors):
    """Write four 600x600 constant-color heading images; return manifest fields."""
    fields = {}
    for heading, color in zip(HEADINGS, colors):
        rel = f"images/{pano_id}_{heading:03d}.png"
        img = np.full((600, 600, 3), color, dtype=np.uint8)
        save_image(root / rel, img)
        fields[f"img_{heading:03d}"] = rel
    return fields


def write_manifest(root, entries):
    path = root / "manifest.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(entry if isinstance(entry, str) else json.dumps(entry))
            fh.write("\n")
    return path


@pytest.fixture
def small_corpus(tmp_path):
    entries = []
    for i, year in [(0, 2008), (0, 2018), (1, 2008)]:
        pano_id = f"p{i}_{year}"
        fields = write_record_images(tmp_path, pano_id, [128, 128, 128, 128])
        entries.append(
            {"pano_id": pano_id, "lat": 51.5 + i * 1e-3, "lon": -0.1, "year": year, **fields}
        )
    return write_manifest(tmp_path, entries), entries


class TestLoadManifest:
    def test_three_complete_records(self, small_corpus):
        path, _ = small_corpus
        result = load_manifest(path)
        assert len(result.records) == 3
        assert len(result.incomplete_records) == 0
        assert len(result.skipped) == 0

    def test_missing_heading_flags_incomplete(self, tmp_path):
        fields = write_record_images(tmp_path, "x", [100] * 4)
        del fields["img_180"]
        path = write_manifest(
            tmp_path, [{"pano_id": "x", "lat": 0.0, "lon": 0.0, "year": 2010, **fields}]
        )
        result = load_manifest(path)
        assert len(result.records) == 1
        assert not result.records[0].complete
        assert result.incomplete_records == result.records

    def test_malformed_lines_skipped_with_line_numbers(self, tmp_path):
        good = {"pano_id": "ok", "lat": 1.0, "lon": 2.0, "year": 2012}
        path = write_manifest(
            tmp_path,
            [
                good,
                "{not json",
                {"pano_id": "bad_lat", "lat": 666.0, "lon": 0.0, "year": 2012},
                {"pano_id": "bad_year", "lat": 0.0, "lon": 0.0, "year": 1900},
                {"pano_id": 7, "lat": 0.0, "lon": 0.0, "year": 2012},
            ],
        )
        result = load_manifest(path)
        assert len(result.records) == 1
        assert [line for line, _ in result.skipped] == [2, 3, 4, 5]

    def test_unreadable_file_is_fatal(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "missing.jsonl")

    def test_paths_resolve_relative_to_manifest_dir(self, small_corpus):
        path, _ = small_corpus
        rec = load_manifest(path).records[0]
        assert all(p and p.startswith(str(path.parent)) for p in rec.images.values())


class TestIndexByLocation:
    def test_same_location_two_years(self, small_corpus):
        path, _ = small_corpus
        records = load_manifest(path).records
        index = index_by_location(records)
        assert len(index) == 2
        (key0, years0), (key1, years1) = list(index.items())
        assert sorted(years0) == [2008, 2018]
        assert sorted(years1) == [2008]

    def test_snap_separates_points_two_steps_apart(self):
        recs = [
            _rec("a", 0.0, 0.0, 2008),
            _rec("b", 2e-5, 0.0, 2008),
        ]
        assert len(index_by_location(recs, snap=1e-5)) == 2

    def test_snap_merges_points_below_half_step(self):
        recs = [_rec("a", 0.0, 0.0, 2008), _rec("b", 4e-6, 0.0, 2018)]
        assert len(index_by_location(recs, snap=1e-5)) == 1

    def test_partition_property(self):
        rng = np.random.default_rng(0)
        recs = [
            _rec(f"r{i}", float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)), 2008 + i % 3)
            for i in range(57)
        ]
        index = index_by_location(recs)
        total = sum(len(v) for years in index.values() for v in years.values())
        assert total == len(recs)

    def test_iteration_sorted(self):
        recs = [_rec("b", 1.0, 1.0, 2010), _rec("a", -1.0, -1.0, 2010)]
        keys = list(index_by_location(recs))
        assert keys == sorted(keys)


def _rec(pano_id, lat, lon, year, images=None):
    from street2vec.corpus import PanoRecord

    return PanoRecord(
        pano_id=pano_id,
        lat=lat,
        lon=lon,
        year=year,
        images=images or {h: f"/nowhere/{pano_id}_{h}.png" for h in HEADINGS},
    )


class TestAssemblePanorama:
    def test_constant_gray_resizes_to_constant(self, tmp_path):
        fields = write_record_images(tmp_path, "g", [128] * 4)
        path = write_manifest(tmp_path, [{"pano_id": "g", "lat": 0.0, "lon": 0.0, "year": 2010, **fields}])
        pano = assemble_panorama(load_manifest(path).records[0])
        assert pano.shape == (128, 512, 3)
        assert pano.dtype == np.float32
        assert np.abs(pano - 128 / 255).max() < 1e-6

    def test_heading_concatenation_order(self, tmp_path):
        fields = write_record_images(tmp_path, "h", [0, 255, 0, 0])  # heading 90 white
        path = write_manifest(tmp_path, [{"pano_id": "h", "lat": 0.0, "lon": 0.0, "year": 2010, **fields}])
        pano = assemble_panorama(load_manifest(path).records[0])
        assert np.all(pano[:, 128:256, :] > 0.99)
        assert np.all(pano[:, :128, :] < 0.01)
        assert np.all(pano[:, 256:, :] < 0.01)

    def test_mean_preserved_by_resize(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(600, 600, 3), dtype=np.uint8)
        rel = "images/noise.png"
        save_image(tmp_path / rel, img)
        fields = {f"img_{h:03d}": rel for h in HEADINGS}
        path = write_manifest(tmp_path, [{"pano_id": "n", "lat": 0.0, "lon": 0.0, "year": 2010, **fields}])
        pano = assemble_panorama(load_manifest(path).records[0])
        assert abs(pano.mean() - img.mean() / 255.0) < 1e-3

    def test_deterministic_bit_identical(self, tmp_path):
        rng = np.random.default_rng(2)
        root = tmp_path
        fields = {}
        for h in HEADINGS:
            rel = f"images/d_{h}.png"
            save_image(root / rel, rng.integers(0, 256, size=(600, 600, 3), dtype=np.uint8))
            fields[f"img_{h:03d}"] = rel
        path = write_manifest(root, [{"pano_id": "d", "lat": 0.0, "lon": 0.0, "year": 2010, **fields}])
        rec = load_manifest(path).records[0]
        np.testing.assert_array_equal(assemble_panorama(rec), assemble_panorama(rec))

    def test_corrupt_image_reports_pano_id(self, tmp_path):
        fields = write_record_images(tmp_path, "c", [10] * 4)
        (tmp_path / fields["img_090"]).write_bytes(b"not a png")
        path = write_manifest(tmp_path, [{"pano_id": "c", "lat": 0.0, "lon": 0.0, "year": 2010, **fields}])
        with pytest.raises(PanoramaError) as err:
            assemble_panorama(load_manifest(path).records[0])
        assert err.value.pano_id == "c"

    def test_incomplete_record_rejected(self):
        rec = _rec("i", 0.0, 0.0, 2010, images={0: "/x.png", 90: None, 180: None, 270: None})
        with pytest.raises(PanoramaError):
            assemble_panorama(rec)


class TestPanoramaStack:
    def test_build_skip_collects_failures(self, tmp_path):
        fields_ok = write_record_images(tmp_path, "ok", [50] * 4)
        fields_bad = write_record_images(tmp_path, "bad", [60] * 4)
        (tmp_path / fields_bad["img_000"]).write_bytes(b"junk")
        path = write_manifest(
            tmp_path,
            [
                {"pano_id": "ok", "lat": 0.0, "lon": 0.0, "year": 2010, **fields_ok},
                {"pano_id": "bad", "lat": 0.1, "lon": 0.0, "year": 2010, **fields_bad},
            ],
        )
        records = load_manifest(path).records
        stack = PanoramaStack.build(records, on_error="skip")
        assert stack.valid.tolist() == [True, False]
        assert [s[1] for s in stack.skipped] == ["bad"]

    def test_memmap_roundtrip(self, tmp_path, small_corpus):
        path, _ = small_corpus
        records = load_manifest(path).records
        cache = tmp_path / "cache.npy"
        stack = PanoramaStack.build(records, path=cache)
        reopened = PanoramaStack.open(records, cache)
        np.testing.assert_array_equal(stack.row(1), reopened.row(1))
        np.testing.assert_array_equal(
            reopened.for_record(records[2]), stack.row(2)
        )


class TestLocationKey:
    @given(
        lat=st.floats(-90, 90, allow_nan=False),
        lon=st.floats(-180, 180, allow_nan=False),
    )
    @settings(max_examples=80, deadline=None)
    def test_quantization_idempotent(self, lat, lon):
        snap = 1e-5
        key = location_key(lat, lon, snap)
        again = location_key(key.ilat * snap, key.ilon * snap, snap)
        assert again == key

    def test_is_named_tuple(self):
        key = location_key(51.5, -0.1)
        assert isinstance(key, LocationKey)
        assert key == (5150000, -10000)
