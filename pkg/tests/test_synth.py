"""Synthetic-lesion generator tests.

The directional claim (learned encoding beats gray replication) lives in
the acceptance suite; here we pin down the construction itself: the class
signal must be a pure sign flip of a zero-mean texture, so that nothing
first-order separates the classes, and the set must be patient-grouped
and bit-for-bit reproducible.
"""

import numpy as np
import pytest

from mammochrome.imaging import load_png16
from mammochrome.pipeline import read_manifest
from mammochrome.synth import (
    RegimeComparison,
    SynthConfig,
    _partition_arrays,
    compare_regimes,
    generate_dataset,
    make_pattern,
    write_synthetic_dataset,
)


def small_cfg(**kw):
    base = dict(n_patients=12, size=(16, 16), pattern_size=6, n_patches=2,
                amplitude=0.25, seed=3)
    base.update(kw)
    return SynthConfig(**base)


class TestPattern:
    def test_exactly_zero_mean(self):
        pat = make_pattern(10, np.random.default_rng(0))
        assert pat.sum() == 0.0

    def test_balanced_plus_minus_one(self):
        pat = make_pattern(8, np.random.default_rng(5))
        values, counts = np.unique(pat, return_counts=True)
        assert list(values) == [-1.0, 1.0]
        assert counts[0] == counts[1] == 32

    def test_odd_cell_count_rejected(self):
        with pytest.raises(ValueError):
            make_pattern(3, np.random.default_rng(0))

    def test_deterministic_under_seed(self):
        a = make_pattern(6, np.random.default_rng(9))
        b = make_pattern(6, np.random.default_rng(9))
        assert np.array_equal(a, b)


class TestConfigValidation:
    def test_pattern_must_fit(self):
        with pytest.raises(ValueError):
            SynthConfig(n_patients=4, size=(8, 8), pattern_size=10)

    def test_at_least_one_patch(self):
        with pytest.raises(ValueError):
            small_cfg(n_patches=0)

    def test_positive_fraction_bounds(self):
        with pytest.raises(ValueError):
            small_cfg(positive_fraction=1.0)


class TestGenerate:
    def test_shapes_and_alignment(self):
        ds = generate_dataset(small_cfg())
        n = 12 * 4
        assert ds.x.shape == (n, 1, 16, 16)
        assert ds.y.shape == (n,)
        assert len(ds.records) == n

    def test_values_clipped_to_unit_range(self):
        ds = generate_dataset(small_cfg(amplitude=0.9))
        assert ds.x.min() >= 0.0 and ds.x.max() <= 1.0

    def test_deterministic(self):
        a = generate_dataset(small_cfg())
        b = generate_dataset(small_cfg())
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.y, b.y)

    def test_seed_changes_content(self):
        a = generate_dataset(small_cfg())
        b = generate_dataset(small_cfg(seed=4))
        assert not np.array_equal(a.x, b.x)

    def test_every_view_shares_the_patient_label(self):
        ds = generate_dataset(small_cfg())
        by_patient = {}
        for rec, label in zip(ds.records, ds.y):
            by_patient.setdefault(rec.patient_id, set()).add(int(label))
        assert all(len(v) == 1 for v in by_patient.values())
        assert all(len([r for r in ds.records if r.patient_id == p]) == 4
                   for p in by_patient)

    def test_label_balance(self):
        ds = generate_dataset(small_cfg(positive_fraction=0.25))
        assert ds.y.sum() == 3 * 4  # 3 of 12 patients, 4 views each

    def test_birads_tracks_label(self):
        ds = generate_dataset(small_cfg())
        for rec, label in zip(ds.records, ds.y):
            assert rec.birads == ("5" if label else "1")

    def test_image_paths_unique(self):
        ds = generate_dataset(small_cfg())
        paths = [r.image_path for r in ds.records]
        assert len(set(paths)) == len(paths)

    def test_no_first_order_class_signal(self):
        # sign-flipped zero-mean patches: with clutter and noise off, the
        # per-image mean is base_level exactly, for both classes alike.
        # 24x24 leaves room for two disjoint 6x6 patches from any first
        # placement, so no overlap can push a pixel into the clip range.
        cfg = small_cfg(n_patients=40, size=(24, 24),
                        noise_scale=0.0, blob_scale=0.0)
        ds = generate_dataset(cfg)
        means = ds.x.mean(axis=(1, 2, 3))
        assert np.allclose(means, cfg.base_level, atol=1e-12)

    def test_patch_energy_identical_between_classes(self):
        # |x - base| is label-blind by construction
        cfg = small_cfg(n_patients=40, size=(24, 24),
                        noise_scale=0.0, blob_scale=0.0)
        ds = generate_dataset(cfg)
        dev = np.abs(ds.x - cfg.base_level).sum(axis=(1, 2, 3))
        pos, neg = dev[ds.y == 1], dev[ds.y == 0]
        assert abs(pos.mean() - neg.mean()) / pos.mean() < 1e-12

    def test_patches_disjoint_when_room(self):
        # with room guaranteed, per-image touched-pixel count is exactly
        # n_patches * k * k
        cfg = small_cfg(size=(24, 24), noise_scale=0.0, blob_scale=0.0)
        ds = generate_dataset(cfg)
        touched = (ds.x[:, 0] != cfg.base_level).sum(axis=(1, 2))
        assert np.all(touched == 2 * 6 * 6)


class TestWriteDataset:
    def test_manifest_and_pngs_round_trip(self, tmp_path):
        cfg = small_cfg(n_patients=3)
        manifest = write_synthetic_dataset(cfg, tmp_path)
        records = read_manifest(manifest)
        assert len(records) == 12
        ds = generate_dataset(cfg)
        raw = load_png16(tmp_path / records[0].image_path)
        assert raw.bit_depth == 16
        decoded = raw.pixels / 65535.0
        assert np.allclose(decoded, ds.x[0, 0], atol=1.0 / 65535.0)

    def test_manifest_fields_survive(self, tmp_path):
        manifest = write_synthetic_dataset(small_cfg(n_patients=2), tmp_path)
        records = read_manifest(manifest)
        assert {r.laterality for r in records} == {"L", "R"}
        assert {r.view for r in records} == {"CC", "MLO"}
        assert all(r.density in "ABCD" for r in records)


def patients_per_part(ds, parts):
    """Map each partition row back to its patient via the pixel bytes."""
    owner = {ds.x[i].tobytes(): ds.records[i].patient_id
             for i in range(len(ds.records))}
    return {name: {owner[row.tobytes()] for row in x}
            for name, (x, y) in parts.items()}


class TestPartition:
    def test_zero_patient_overlap(self):
        ds = generate_dataset(small_cfg(n_patients=30))
        parts = _partition_arrays(ds, seed=7)
        seen = patients_per_part(ds, parts)
        assert not (seen["train"] & seen["val"]
                    or seen["train"] & seen["test"]
                    or seen["val"] & seen["test"])

    def test_patients_kept_whole(self):
        ds = generate_dataset(small_cfg(n_patients=20))
        parts = _partition_arrays(ds, seed=1)
        seen = patients_per_part(ds, parts)
        # all 4 views of a patient must land in the same part, so the
        # partition sizes are multiples of 4 and the patient sets tile
        assert all(len(x) == 4 * len(seen[name])
                   for name, (x, y) in parts.items())
        assert sum(len(s) for s in seen.values()) == 20

    def test_labels_stay_aligned(self):
        ds = generate_dataset(small_cfg(n_patients=20))
        truth = {ds.x[i].tobytes(): ds.y[i] for i in range(len(ds.y))}
        for x, y in _partition_arrays(ds, seed=2).values():
            assert all(truth[row.tobytes()] == lab for row, lab in zip(x, y))

    def test_ratio_split_sizes(self):
        ds = generate_dataset(small_cfg(n_patients=20))
        parts = _partition_arrays(ds, seed=0, ratios=(0.5, 0.25, 0.25))
        assert [len(parts[k][0]) for k in ("train", "val", "test")] \
            == [40, 20, 20]

    def test_deterministic(self):
        ds = generate_dataset(small_cfg(n_patients=20))
        a = _partition_arrays(ds, seed=3)
        b = _partition_arrays(ds, seed=3)
        for name in a:
            assert np.array_equal(a[name][0], b[name][0])


class TestCompareRegimes:
    def test_smoke_returns_complete_comparison(self):
        # tiny run; directionality is asserted in the acceptance suite
        cfg = SynthConfig(n_patients=16, size=(16, 16), pattern_size=6,
                          n_patches=2, seed=0)
        r = compare_regimes(0, data_cfg=cfg, epochs=2, gray_epochs=1,
                            batch_size=8, ratios=(0.5, 0.25, 0.25))
        assert isinstance(r, RegimeComparison)
        assert 0.0 <= r.auc_tdce <= 1.0 and 0.0 <= r.auc_gray <= 1.0
        assert r.n_test == 16
        assert 0.0 <= r.delong.p <= 1.0
        d = r.to_dict()
        assert d["delta"] == pytest.approx(r.auc_tdce - r.auc_gray)
        assert set(d) >= {"seed", "auc_tdce", "auc_gray", "delong_p",
                          "train_seconds"}
