import numpy as np
import pytest

from street2vec.corpus import HEADINGS, PanoRecord, index_by_location
from street2vec.sampler import (
    JitterConfig,
    color_jitter,
    epoch_batch_count,
    epoch_batches,
    sample_pair_batch,
)
from street2vec.seeding import substream


def rec(pano_id, lat, lon, year):
    return PanoRecord(pano_id=pano_id, lat=lat, lon=lon, year=year,
                      images={h: f"/x/{pano_id}_{h}.png" for h in HEADINGS})


def synthetic_loader(seed_salt=0):
    """Deterministic fake panoramas keyed by pano_id (no disk access)."""

    def load(record):
        rng = substream(hash(record.pano_id) & 0xFFFF, "fake", seed_salt)
        return rng.uniform(0, 1, size=(128, 512, 3)).astype(np.float32)

    return load


def grid_index(n_locations, years):
    records = []
    for i in range(n_locations):
        for y in years:
            records.append(rec(f"p{i}_{y}", i * 1e-3, 0.0, y))
    return index_by_location(records)


class TestColorJitter:
    def test_zero_config_is_bit_identical(self):
        rng = substream(0, "j")
        pano = rng.uniform(0, 1, (128, 512, 3)).astype(np.float32)
        out = color_jitter(pano, JitterConfig(0.0, 0.0, 0.0, 0.0), substream(1, "j"))
        np.testing.assert_array_equal(out, pano)

    def test_brightness_only_on_constant(self):
        pano = np.full((8, 16, 3), 0.5, dtype=np.float32)
        cfg = JitterConfig(brightness=0.4, contrast=0.0, saturation=0.0, hue=0.0)
        rng = substream(3, "j")
        expected_delta = np.random.default_rng(
            np.random.SeedSequence(3, spawn_key=(__import__("zlib").crc32(b"j"),))
        ).uniform(-0.4, 0.4)
        out = color_jitter(pano, cfg, rng)
        target = np.clip(np.float32(0.5) + np.float32(expected_delta), 0, 1)
        np.testing.assert_allclose(out, target, atol=1e-7)
        assert np.ptp(out) == 0.0

    def test_hue_shift_leaves_gray_unchanged(self):
        pano = np.full((4, 8, 3), 0.37, dtype=np.float32)
        cfg = JitterConfig(brightness=0.0, contrast=0.0, saturation=0.0, hue=0.05)
        out = color_jitter(pano, cfg, substream(5, "j"))
        np.testing.assert_array_equal(out, pano)

    def test_output_clipped(self):
        rng = substream(7, "j")
        pano = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        cfg = JitterConfig(brightness=0.9, contrast=0.9, saturation=0.9, hue=0.4)
        for i in range(5):
            out = color_jitter(pano, cfg, substream(i, "clip"))
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic_given_stream(self):
        pano = substream(9, "j").uniform(0, 1, (16, 16, 3)).astype(np.float32)
        a = color_jitter(pano, JitterConfig(), substream(11, "j"))
        b = color_jitter(pano, JitterConfig(), substream(11, "j"))
        np.testing.assert_array_equal(a, b)

    def test_negative_config_rejected(self):
        with pytest.raises(ValueError):
            JitterConfig(brightness=-0.1)


class TestPairSampling:
    def test_two_year_corpus_is_all_cross_year(self):
        index = grid_index(10, [2008, 2018])
        batch = sample_pair_batch(index, 10, substream(0, "s"), synthetic_loader())
        assert all(p == "cross_year" for p in batch.provenance)
        for ya, yb in zip(batch.years_a, batch.years_b):
            assert {ya, yb} == {2008, 2018}
        assert batch.jitter_fraction == 0.0

    def test_single_year_corpus_is_all_jittered(self):
        index = grid_index(10, [2012])
        batch = sample_pair_batch(index, 10, substream(0, "s"), synthetic_loader())
        assert all(p == "jittered" for p in batch.provenance)
        assert batch.jitter_fraction == 1.0
        assert batch.years_a == batch.years_b

    def test_batch_shapes_and_key_alignment(self):
        index = grid_index(20, [2008, 2018])
        batch = sample_pair_batch(index, 8, substream(1, "s"), synthetic_loader())
        assert len(batch) == 8
        assert batch.panos_a.shape == (8, 128, 512, 3)
        assert len(set(batch.keys)) == 8  # without replacement

    def test_empty_index_rejected(self):
        with pytest.raises(ValueError):
            sample_pair_batch({}, 4, substream(0, "s"), synthetic_loader())

    def test_three_year_pair_frequencies_uniform(self):
        index = grid_index(1, [2008, 2013, 2018])
        loader = synthetic_loader()
        rng = substream(42, "mc")
        counts = {}
        n = 10_000
        for _ in range(n):
            batch = sample_pair_batch(index, 1, rng, loader)
            pair = frozenset((batch.years_a[0], batch.years_b[0]))
            counts[pair] = counts.get(pair, 0) + 1
        assert len(counts) == 3
        for c in counts.values():
            assert abs(c / n - 1 / 3) < 0.03

    def test_duplicate_year_observations_still_pair_across_years(self):
        records = [rec(f"a{i}", 0.0, 0.0, 2008) for i in range(3)]
        records += [rec("b", 0.0, 0.0, 2018)]
        index = index_by_location(records)
        loader = synthetic_loader()
        rng = substream(0, "multi-structure")
        for _ in range(200):
            batch = sample_pair_batch(index, 1, rng, loader)
            assert {batch.years_a[0], batch.years_b[0]} == {2008, 2018}

    def test_multiple_panoramas_per_year_drawn_uniformly(self):
        records = [rec(f"a{i}", 0.0, 0.0, 2008) for i in range(3)]
        records += [rec("b", 0.0, 0.0, 2018)]
        index = index_by_location(records)
        from street2vec.sampler import _draw_pair

        rng = substream(0, "multi")
        seen = {f"a{i}": 0 for i in range(3)}
        for _ in range(900):
            ra, rb, _ = _draw_pair(index[list(index)[0]], rng)
            for r in (ra, rb):
                if r.year == 2008:
                    seen[r.pano_id] += 1
        total = sum(seen.values())
        for c in seen.values():
            assert abs(c / total - 1 / 3) < 0.05


class TestEpochs:
    def test_epoch_batch_count(self):
        assert epoch_batch_count(100, 48) == 3   # 48, 48, 4
        assert epoch_batch_count(97, 48) == 2    # 48, 49
        assert epoch_batch_count(96, 48) == 2
        assert epoch_batch_count(30, 48) == 1
        assert epoch_batch_count(2, 48) == 1

    def test_epoch_covers_every_location_once(self):
        index = grid_index(23, [2008, 2018])
        seen = []
        for _, batch in epoch_batches(index, 5, master_seed=1, epoch=0, loader=synthetic_loader()):
            seen.extend(batch.keys)
        assert sorted(seen) == sorted(index.keys())
        assert len(seen) == 23

    def test_leftover_location_rides_with_last_batch(self):
        index = grid_index(11, [2008, 2018])
        sizes = [len(b) for _, b in epoch_batches(index, 5, 1, 0, synthetic_loader())]
        assert sizes == [5, 6]

    def test_reproducible_stream(self):
        index = grid_index(12, [2008, 2018])
        def run():
            out = []
            for _, b in epoch_batches(index, 4, master_seed=9, epoch=0, loader=synthetic_loader()):
                out.append((tuple(b.keys), tuple(b.years_a), b.panos_a.copy()))
            return out
        r1, r2 = run(), run()
        for (k1, y1, p1), (k2, y2, p2) in zip(r1, r2):
            assert k1 == k2 and y1 == y2
            np.testing.assert_array_equal(p1, p2)

    def test_start_batch_resumes_mid_epoch(self):
        index = grid_index(12, [2008, 2018])
        full = list(epoch_batches(index, 4, 3, 0, synthetic_loader()))
        tail = list(epoch_batches(index, 4, 3, 0, synthetic_loader(), start_batch=1))
        assert [b for b, _ in tail] == [1, 2]
        np.testing.assert_array_equal(full[1][1].panos_a, tail[0][1].panos_a)
        assert full[2][1].keys == tail[1][1].keys

    def test_epochs_shuffle_differently(self):
        index = grid_index(16, [2008, 2018])
        k0 = [b.keys for _, b in epoch_batches(index, 16, 5, 0, synthetic_loader())][0]
        k1 = [b.keys for _, b in epoch_batches(index, 16, 5, 1, synthetic_loader())][0]
        assert k0 != k1
        assert sorted(k0) == sorted(k1)

    def test_provenance_matches_year_availability(self):
        records = []
        for i in range(6):
            records.append(rec(f"m{i}_08", i * 1e-3, 0.0, 2008))
            if i % 2 == 0:
                records.append(rec(f"m{i}_18", i * 1e-3, 0.0, 2018))
        index = index_by_location(records)
        for _, batch in epoch_batches(index, 6, 0, 0, synthetic_loader()):
            for key, prov in zip(batch.keys, batch.provenance):
                expected = "cross_year" if len(index[key]) >= 2 else "jittered"
                assert prov == expected
