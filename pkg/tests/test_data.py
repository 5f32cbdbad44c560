import numpy as np
import pytest

from emphyseg.data import (
    CtVolume,
    DatasetManifest,
    ManifestRecord,
    lung_slice_indices,
    percent_emphysema,
    read_manifest,
    read_volume,
    sample_slice_indices,
    sample_slices,
    write_manifest,
    write_volume,
)
from emphyseg.errors import (
    DegenerateInputError,
    DimensionMismatchError,
    MalformedHeaderError,
    TruncatedPayloadError,
    VolumeFormatError,
)

from helpers import random_volume


class TestCtVolume:
    def test_grids_coerced_and_immutable_shape(self):
        rng = np.random.default_rng(0)
        v = random_volume(rng)
        assert v.hu.dtype == np.int16
        assert v.lung_mask.dtype == bool
        assert v.shape == v.hu.shape == v.lung_mask.shape

    def test_emphysema_outside_lung_rejected(self):
        hu = np.full((2, 4, 4), -800, dtype=np.int16)
        lung = np.zeros((2, 4, 4), dtype=bool)
        lung[0] = True
        emph = np.zeros((2, 4, 4), dtype=bool)
        emph[1, 0, 0] = True
        with pytest.raises(ValueError):
            CtVolume(hu=hu, lung_mask=lung, emph_mask=emph,
                     scanner="S", scan_id="a")

    def test_shape_mismatch_rejected(self):
        hu = np.zeros((2, 4, 4), dtype=np.int16)
        with pytest.raises(DimensionMismatchError):
            CtVolume(hu=hu, lung_mask=np.zeros((2, 4, 5), dtype=bool),
                     emph_mask=np.zeros((2, 4, 4), dtype=bool),
                     scanner="S", scan_id="a")

    def test_hu_range_enforced(self):
        hu = np.full((1, 2, 2), -2000, dtype=np.int16)
        masks = np.zeros((1, 2, 2), dtype=bool)
        with pytest.raises(ValueError):
            CtVolume(hu=hu, lung_mask=masks, emph_mask=masks,
                     scanner="S", scan_id="a")

    def test_empty_identifiers_rejected(self):
        hu = np.zeros((1, 2, 2), dtype=np.int16)
        masks = np.zeros((1, 2, 2), dtype=bool)
        with pytest.raises(ValueError):
            CtVolume(hu=hu, lung_mask=masks, emph_mask=masks,
                     scanner="", scan_id="a")
        with pytest.raises(ValueError):
            CtVolume(hu=hu, lung_mask=masks, emph_mask=masks,
                     scanner="S", scan_id="")

    def test_slice_extraction(self):
        rng = np.random.default_rng(1)
        v = random_volume(rng, shape=(3, 5, 6))
        s = v.slice(1)
        assert np.array_equal(s.hu, v.hu[1])
        assert np.array_equal(s.lung_mask, v.lung_mask[1])
        assert s.scan_id == v.scan_id
        assert s.index == 1


class TestVolumeIO:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(42)
        for case in range(30):
            shape = tuple(int(x) for x in rng.integers(1, 7, size=3))
            v = random_volume(rng, shape=shape, scan_id=f"rt-{case:03d}",
                              scanner=f"SC-{case % 3}")
            path = tmp_path / "vol.ctph"
            write_volume(v, path)
            blob1 = path.read_bytes()
            w = read_volume(path)
            assert np.array_equal(v.hu, w.hu)
            assert np.array_equal(v.lung_mask, w.lung_mask)
            assert np.array_equal(v.emph_mask, w.emph_mask)
            assert (v.scan_id, v.scanner) == (w.scan_id, w.scanner)
            write_volume(w, path)
            assert path.read_bytes() == blob1

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ctph"
        p.write_bytes(b"NOPE" + bytes(100))
        with pytest.raises(MalformedHeaderError):
            read_volume(p)

    def test_short_file(self, tmp_path):
        p = tmp_path / "x.ctph"
        p.write_bytes(b"CT")
        with pytest.raises(MalformedHeaderError):
            read_volume(p)

    def test_bad_version(self, tmp_path):
        rng = np.random.default_rng(0)
        p = tmp_path / "x.ctph"
        write_volume(random_volume(rng), p)
        blob = bytearray(p.read_bytes())
        blob[4] = 9
        p.write_bytes(bytes(blob))
        with pytest.raises(MalformedHeaderError):
            read_volume(p)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(0)
        p = tmp_path / "x.ctph"
        write_volume(random_volume(rng), p)
        blob = p.read_bytes()
        p.write_bytes(blob[: len(blob) - 5])
        with pytest.raises(TruncatedPayloadError):
            read_volume(p)

    def test_trailing_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        p = tmp_path / "x.ctph"
        write_volume(random_volume(rng), p)
        p.write_bytes(p.read_bytes() + b"\x00")
        with pytest.raises(VolumeFormatError):
            read_volume(p)

    def test_zero_dimension_rejected(self, tmp_path):
        rng = np.random.default_rng(0)
        p = tmp_path / "x.ctph"
        write_volume(random_volume(rng, shape=(1, 2, 2)), p)
        blob = bytearray(p.read_bytes())
        blob[6:10] = (0).to_bytes(4, "little")  # slice count field
        p.write_bytes(bytes(blob))
        with pytest.raises(DimensionMismatchError):
            read_volume(p)

    def test_mask_bytes_validated(self, tmp_path):
        rng = np.random.default_rng(0)
        v = random_volume(rng, shape=(1, 2, 2))
        p = tmp_path / "x.ctph"
        write_volume(v, p)
        blob = bytearray(p.read_bytes())
        # first lung mask byte sits right after header + HU payload
        offset = 4 + 14 + 2 * v.hu.size
        blob[offset] = 2
        p.write_bytes(bytes(blob))
        with pytest.raises(VolumeFormatError):
            read_volume(p)


class TestManifest:
    def _records(self, tmp_path, rng, n=4):
        records = []
        for i in range(n):
            v = random_volume(rng, scan_id=f"m-{i:03d}",
                              scanner="SC-A" if i < n - 1 else "SC-B")
            path = tmp_path / f"m-{i:03d}.ctph"
            write_volume(v, path)
            split = ("train", "val", "test_id", "test_ood")[i % 4]
            records.append(ManifestRecord(
                scan_id=v.scan_id, scanner=v.scanner, split=split,
                path=path, never_smoker=(i % 2 == 0),
                pct950=None if i == 0 else 1.25 * i,
            ))
        return records

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        manifest = DatasetManifest(records=self._records(tmp_path, rng))
        path = tmp_path / "manifest.tsv"
        write_manifest(manifest, path)
        back = read_manifest(path)
        assert len(back.records) == len(manifest.records)
        for a, b in zip(manifest.records, back.records):
            assert (a.scan_id, a.scanner, a.split, a.never_smoker) == \
                   (b.scan_id, b.scanner, b.split, b.never_smoker)
            assert a.pct950 == b.pct950
            assert b.path.exists()

    def test_comments_and_blank_lines_skipped(self, tmp_path):
        rng = np.random.default_rng(5)
        manifest = DatasetManifest(records=self._records(tmp_path, rng))
        path = tmp_path / "manifest.tsv"
        write_manifest(manifest, path)
        text = path.read_text()
        path.write_text("# a comment\n\n" + text + "\n# trailing\n")
        assert len(read_manifest(path).records) == len(manifest.records)

    def test_duplicate_ids_rejected(self, tmp_path):
        rng = np.random.default_rng(5)
        records = self._records(tmp_path, rng)
        records.append(records[0])
        with pytest.raises(ValueError):
            DatasetManifest(records=records)

    def test_ood_scanner_must_not_train(self, tmp_path):
        rng = np.random.default_rng(5)
        records = self._records(tmp_path, rng)
        # give the OOD record the same scanner as a training record
        bad = ManifestRecord(
            scan_id="m-999", scanner="SC-A", split="test_ood",
            path=records[0].path, never_smoker=False,
        )
        with pytest.raises(ValueError):
            DatasetManifest(records=records[:3] + [bad])

    def test_split_filter_and_lookup(self, tmp_path):
        rng = np.random.default_rng(5)
        manifest = DatasetManifest(records=self._records(tmp_path, rng))
        assert [r.scan_id for r in manifest.split("train")] == ["m-000"]
        assert manifest.by_id("m-002").split == "test_id"
        with pytest.raises(KeyError):
            manifest.by_id("nope")
        with pytest.raises(ValueError):
            manifest.split("bogus")

    def test_unknown_split_rejected(self):
        with pytest.raises(ValueError):
            ManifestRecord(scan_id="a", scanner="s", split="holdout",
                           path="x.ctph", never_smoker=False)

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("a\tb\tc\n")
        with pytest.raises(ValueError):
            read_manifest(path)


class TestMeasurements:
    def test_percent_emphysema_exact(self):
        hu = np.full((1, 2, 4), -800, dtype=np.int16)
        lung = np.ones((1, 2, 4), dtype=bool)
        emph = np.zeros((1, 2, 4), dtype=bool)
        emph[0, 0, :2] = True
        v = CtVolume(hu=hu, lung_mask=lung, emph_mask=emph,
                     scanner="S", scan_id="a")
        assert percent_emphysema(v, emph) == 25.0
        assert percent_emphysema(v, np.zeros_like(emph)) == 0.0
        assert percent_emphysema(v, lung) == 100.0

    def test_percent_emphysema_monotone(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            v = random_volume(rng, shape=(3, 6, 6))
            mask = v.lung_mask & (rng.random(v.shape) < 0.4)
            base = percent_emphysema(v, mask)
            candidates = np.argwhere(v.lung_mask & ~mask)
            if candidates.size == 0:
                continue
            grown = mask.copy()
            grown[tuple(candidates[0])] = True
            assert percent_emphysema(v, grown) >= base

    def test_mask_outside_lung_ignored(self):
        rng = np.random.default_rng(12)
        v = random_volume(rng)
        everywhere = np.ones(v.shape, dtype=bool)
        assert percent_emphysema(v, everywhere) == 100.0

    def test_empty_lung_raises(self):
        hu = np.zeros((1, 2, 2), dtype=np.int16)
        masks = np.zeros((1, 2, 2), dtype=bool)
        v = CtVolume(hu=hu, lung_mask=masks, emph_mask=masks,
                     scanner="S", scan_id="a")
        with pytest.raises(DegenerateInputError):
            percent_emphysema(v, masks)

    def test_shape_mismatch_raises(self):
        rng = np.random.default_rng(13)
        v = random_volume(rng)
        with pytest.raises(DimensionMismatchError):
            percent_emphysema(v, np.zeros((9, 9, 9), dtype=bool))


class TestSliceSampling:
    def _volume_with_gaps(self, rng):
        hu = rng.integers(-1000, -700, size=(8, 4, 4)).astype(np.int16)
        lung = np.zeros((8, 4, 4), dtype=bool)
        for z in (1, 3, 4, 6):
            lung[z, 1:3, 1:3] = True
        emph = np.zeros_like(lung)
        return CtVolume(hu=hu, lung_mask=lung, emph_mask=emph,
                        scanner="S", scan_id="gaps")

    def test_samples_only_lung_slices(self):
        rng = np.random.default_rng(21)
        v = self._volume_with_gaps(rng)
        assert list(lung_slice_indices(v)) == [1, 3, 4, 6]
        for seed in range(25):
            for s in sample_slices(v, 3, seed):
                assert s.lung_mask.any()

    def test_deterministic_and_sorted(self):
        rng = np.random.default_rng(22)
        v = self._volume_with_gaps(rng)
        a = sample_slice_indices(v, 3, 123)
        b = sample_slice_indices(v, 3, 123)
        assert np.array_equal(a, b)
        assert np.all(np.diff(a) > 0)

    def test_capped_at_available(self):
        rng = np.random.default_rng(23)
        v = self._volume_with_gaps(rng)
        idx = sample_slice_indices(v, 99, 0)
        assert np.array_equal(idx, [1, 3, 4, 6])

    def test_no_lung_raises(self):
        hu = np.zeros((2, 4, 4), dtype=np.int16)
        masks = np.zeros((2, 4, 4), dtype=bool)
        v = CtVolume(hu=hu, lung_mask=masks, emph_mask=masks,
                     scanner="S", scan_id="a")
        with pytest.raises(DegenerateInputError):
            sample_slices(v, 1, 0)

    def test_invalid_count_raises(self):
        rng = np.random.default_rng(24)
        v = self._volume_with_gaps(rng)
        with pytest.raises(ValueError):
            sample_slices(v, 0, 0)
