import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from street2vec.change import (
    ChangeRecord,
    EmbeddingStore,
    StoreRow,
    change_map,
    concat_stores,
    cosine_distance,
    embed_records,
    read_changes_csv,
    write_changes_csv,
)
from street2vec.corpus import HEADINGS, PanoRecord
from street2vec.encoder import Encoder, EncoderConfig
from street2vec.errors import AnalyticsError, Street2VecError


class TestCosineDistance:
    def test_identical_vectors(self):
        assert cosine_distance([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0

    def test_orthogonal(self):
        assert cosine_distance([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0, abs=1e-15)

    def test_opposite(self):
        assert cosine_distance([1.0, 0.0], [-1.0, 0.0]) == pytest.approx(2.0, abs=1e-15)

    def test_zero_norm_is_an_error(self):
        with pytest.raises(AnalyticsError):
            cosine_distance([0.0, 0.0], [1.0, 0.0])

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=8), rng.normal(size=8)
        assert cosine_distance(x, y) == cosine_distance(y, x)

    @given(
        st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=6),
        st.floats(0.01, 100.0),
        st.floats(0.01, 100.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_scale_invariance(self, vals, alpha, beta):
        x = np.array(vals)
        y = x[::-1].copy() + 0.5
        if np.linalg.norm(x) == 0 or np.linalg.norm(y) == 0:
            return
        base = cosine_distance(x, y)
        scaled = cosine_distance(alpha * x, beta * y)
        assert scaled == pytest.approx(base, abs=1e-10)

    def test_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            d = cosine_distance(rng.normal(size=16), rng.normal(size=16))
            assert 0.0 <= d <= 2.0


def make_store(entries, source="street2vec", dim=4, seed=0):
    rng = np.random.default_rng(seed)
    rows, vecs = [], []
    for pano_id, lat, lon, year, vec in entries:
        rows.append(StoreRow(pano_id=pano_id, lat=lat, lon=lon, year=year))
        vecs.append(vec if vec is not None else rng.normal(size=dim))
    return EmbeddingStore(embeddings=np.array(vecs, dtype=np.float32), rows=rows, source=source)


class TestStoreFormat:
    def test_roundtrip_bit_exact(self, tmp_path):
        store = make_store([(f"p{i}", 51.0 + i * 1e-3, -0.1, 2008 + i % 2, None) for i in range(7)],
                           source="baseline")
        path = tmp_path / "emb.s2v"
        store.save(path)
        loaded = EmbeddingStore.load(path)
        np.testing.assert_array_equal(loaded.embeddings, store.embeddings)
        assert loaded.source == "baseline"
        assert [r.pano_id for r in loaded.rows] == [r.pano_id for r in store.rows]
        assert loaded.rows[3].year == store.rows[3].year

    def test_magic_bytes(self, tmp_path):
        store = make_store([("p", 0.0, 0.0, 2010, None)])
        path = tmp_path / "emb.s2v"
        store.save(path)
        assert path.read_bytes()[:4] == b"S2V1"

    def test_truncation_detected(self, tmp_path):
        store = make_store([("p", 0.0, 0.0, 2010, None), ("q", 1.0, 0.0, 2010, None)])
        path = tmp_path / "emb.s2v"
        store.save(path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(Street2VecError):
            EmbeddingStore.load(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.s2v"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        (tmp_path / "junk.s2v.index.csv").write_text("row,pano_id,lat,lon,year\n")
        with pytest.raises(Street2VecError):
            EmbeddingStore.load(path)

    def test_unknown_source_rejected(self):
        with pytest.raises(ValueError):
            make_store([("p", 0.0, 0.0, 2010, None)], source="mystery")

    def test_concat(self):
        a = make_store([("p", 0.0, 0.0, 2008, None)], seed=1)
        b = make_store([("q", 1.0, 0.0, 2018, None)], seed=2)
        merged = concat_stores([a, b])
        assert len(merged) == 2
        np.testing.assert_array_equal(merged.embeddings[0], a.embeddings[0])


class TestEmbedRecords:
    def test_embeds_complete_records_in_order(self, tmp_path):
        from street2vec.imaging import save_image

        records = []
        for i in range(3):
            images = {}
            for h in HEADINGS:
                p = tmp_path / f"r{i}_{h}.png"
                save_image(p, np.full((600, 600, 3), 40 * (i + 1), dtype=np.uint8))
                images[h] = str(p)
            records.append(PanoRecord(pano_id=f"r{i}", lat=i * 1e-3, lon=0.0, year=2008, images=images))
        enc = Encoder.initialize(EncoderConfig(channels=(4, 8), feature_dim=8, hidden_dim=8, embedding_dim=4))
        result = embed_records(records, enc)
        assert len(result.store) == 3
        assert result.store.dim == 4
        assert [r.pano_id for r in result.store.rows] == ["r0", "r1", "r2"]
        assert result.skipped == []

    def test_duplicate_records_give_identical_rows(self, tmp_path):
        from street2vec.imaging import save_image

        images = {}
        for h in HEADINGS:
            p = tmp_path / f"d_{h}.png"
            save_image(p, np.full((600, 600, 3), 90, dtype=np.uint8))
            images[h] = str(p)
        rec = PanoRecord(pano_id="d", lat=0.0, lon=0.0, year=2008, images=images)
        enc = Encoder.initialize(EncoderConfig(channels=(4, 8), feature_dim=8, hidden_dim=8, embedding_dim=4))
        result = embed_records([rec, rec], enc)
        assert len(result.store) == 2
        np.testing.assert_array_equal(result.store.embeddings[0], result.store.embeddings[1])

    def test_corrupt_image_skipped_not_zero_filled(self, tmp_path):
        from street2vec.imaging import save_image

        def rec_with_images(pid, corrupt=False):
            images = {}
            for h in HEADINGS:
                p = tmp_path / f"{pid}_{h}.png"
                save_image(p, np.full((600, 600, 3), 120, dtype=np.uint8))
                images[h] = str(p)
            if corrupt:
                (tmp_path / f"{pid}_90.png").write_bytes(b"broken")
            return PanoRecord(pano_id=pid, lat=0.0, lon=0.0, year=2008, images=images)

        good, bad = rec_with_images("good"), rec_with_images("bad", corrupt=True)
        enc = Encoder.initialize(EncoderConfig(channels=(4, 8), feature_dim=8, hidden_dim=8, embedding_dim=4))
        result = embed_records([good, bad], enc)
        assert len(result.store) == 1
        assert result.skipped[0][0] == "bad"
        assert not np.all(result.store.embeddings[0] == 0)

    def test_feature_source_changes_dim(self, tmp_path):
        from street2vec.imaging import save_image

        images = {}
        for h in HEADINGS:
            p = tmp_path / f"f_{h}.png"
            save_image(p, np.full((600, 600, 3), 77, dtype=np.uint8))
            images[h] = str(p)
        rec = PanoRecord(pano_id="f", lat=0.0, lon=0.0, year=2008, images=images)
        enc = Encoder.initialize(EncoderConfig(channels=(4, 8), feature_dim=8, hidden_dim=8, embedding_dim=4))
        proj = embed_records([rec], enc, feature_source="projector")
        back = embed_records([rec], enc, feature_source="backbone")
        assert proj.store.dim == 4
        assert back.store.dim == 8


class TestChangeMap:
    def test_identical_vectors_give_zero(self):
        v = np.array([0.3, 0.4, 0.5, 0.6], dtype=np.float32)
        store = make_store([
            ("a08", 51.5, -0.1, 2008, v),
            ("a18", 51.5, -0.1, 2018, v),
        ])
        result = change_map(store, 2008, 2018)
        assert len(result.records) == 1
        assert result.records[0].d_cos == 0.0
        assert result.records[0].flags == ()

    def test_same_year_rejected(self):
        store = make_store([("a", 0.0, 0.0, 2008, None)])
        with pytest.raises(AnalyticsError):
            change_map(store, 2008, 2008)

    def test_absent_year_is_an_error(self):
        store = make_store([("a", 0.0, 0.0, 2008, None)])
        with pytest.raises(AnalyticsError):
            change_map(store, 2008, 2018)

    def test_partial_coverage_counted_not_fatal(self):
        store = make_store([
            ("a08", 0.0, 0.0, 2008, None),
            ("a18", 0.0, 0.0, 2018, None),
            ("b08", 1.0, 0.0, 2008, None),
            ("c18", 2.0, 0.0, 2018, None),
        ])
        result = change_map(store, 2008, 2018)
        assert len(result.records) == 1
        assert result.n_missing_year == 2

    def test_multi_capture_mean_pooled_and_flagged(self):
        v1 = np.array([1.0, 0.0, 0.0, 0.0], dtype=np.float32)
        v2 = np.array([0.0, 1.0, 0.0, 0.0], dtype=np.float32)
        pooled = (v1 + v2) / 2
        v_b = np.array([1.0, 1.0, 0.0, 0.0], dtype=np.float32)
        store = make_store([
            ("x1", 0.0, 0.0, 2008, v1),
            ("x2", 0.0, 0.0, 2008, v2),
            ("y", 0.0, 0.0, 2018, v_b),
        ])
        result = change_map(store, 2008, 2018)
        rec = result.records[0]
        assert rec.flags == ("pooled",)
        assert result.n_pooled == 1
        assert rec.d_cos == pytest.approx(cosine_distance(pooled, v_b), abs=1e-7)

    def test_year_order_normalized(self):
        store = make_store([
            ("a08", 0.0, 0.0, 2008, None),
            ("a18", 0.0, 0.0, 2018, None),
        ])
        fwd = change_map(store, 2008, 2018)
        rev = change_map(store, 2018, 2008)
        assert fwd.records[0].d_cos == rev.records[0].d_cos
        assert rev.records[0].year_a == 2008 and rev.records[0].year_b == 2018

    def test_sorted_output(self):
        entries = []
        for i in (3, 1, 2, 0):
            entries.append((f"p{i}_08", i * 1e-3, 0.0, 2008, None))
            entries.append((f"p{i}_18", i * 1e-3, 0.0, 2018, None))
        store = make_store(entries)
        result = change_map(store, 2008, 2018)
        keys = [r.key for r in result.records]
        assert keys == sorted(keys)

    def test_csv_roundtrip(self, tmp_path):
        store = make_store([
            ("a08", 51.5, -0.1, 2008, None),
            ("a18", 51.5, -0.1, 2018, None),
            ("b08", 51.6, -0.2, 2008, None),
            ("b18", 51.6, -0.2, 2018, None),
        ])
        records = change_map(store, 2008, 2018).records
        path = tmp_path / "changes.csv"
        write_changes_csv(path, records)
        loaded = read_changes_csv(path)
        assert len(loaded) == 2
        for orig, back in zip(records, loaded):
            assert back.d_cos == orig.d_cos
            assert back.key == orig.key
            assert back.flags == orig.flags
