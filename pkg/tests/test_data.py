"""Ingestion, splitting, normalization, and windowing contracts."""

import json
from datetime import timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import START, raw_table, registry_entry, synthetic_values, write_csv
from metatst.data import (
    CsvParseError,
    DatasetDescriptor,
    SplitSpec,
    SplitError,
    ingest,
    load_csv,
    load_registry,
    split_and_normalize,
    window_count,
    window_stream,
)


class TestLoadCsv:
    def test_small_csv_parses(self, tmp_path):
        path = write_csv(tmp_path / "t.csv", synthetic_values(4, 2), columns=["a", "b"])
        table = load_csv(path)
        assert table.n_rows == 4
        assert table.n_variates == 2
        assert table.columns == ("a", "b")
        assert table.timestamps[0] == START

    def test_ett_sized_file_yields_expected_train_windows(self, ett_table_path):
        # 17,420 hourly rows; the fixed 8640/2880/2880 borders give the standard
        # per-split window counts under a 96-step look-back.
        table = load_csv(ett_table_path)
        assert table.n_rows == 17_420
        spec = SplitSpec.fixed(8640, 2880, 2880)
        train, val, test, _ = split_and_normalize(table, spec, look_back=96)
        assert window_count(train.n_rows, 96, 0) == 8_545
        assert window_count(val.n_rows, 96, 0) == 2_881
        assert window_count(test.n_rows, 96, 0) == 2_881

    def test_non_numeric_cell_named(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("date,a,b\n2015-01-01 00:00:00,1.0,2.0\n2015-01-01 01:00:00,oops,2.0\n")
        with pytest.raises(CsvParseError, match=r"row 3.*'a'"):
            load_csv(path)

    def test_non_monotonic_timestamps_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("date,a\n2015-01-02 00:00:00,1.0\n2015-01-01 00:00:00,2.0\n")
        with pytest.raises(CsvParseError, match="non-monotonic"):
            load_csv(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_csv(tmp_path / "nope.csv")

    def test_header_must_start_with_date(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time,a\n2015-01-01 00:00:00,1.0\n")
        with pytest.raises(CsvParseError, match="'date'"):
            load_csv(path)

    def test_ragged_row_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("date,a,b\n2015-01-01 00:00:00,1.0\n")
        with pytest.raises(CsvParseError, match="row 2"):
            load_csv(path)

    def test_bad_timestamp_format_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("date,a\n01/02/2015 00:00,1.0\n")
        with pytest.raises(CsvParseError, match="timestamp"):
            load_csv(path)


@pytest.fixture(scope="module")
def ett_table_path(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ett")
    values = synthetic_values(17_420, 7, seed=3)
    return write_csv(tmp / "ett.csv", values)


class TestSplitAndNormalize:
    def test_epf_ratio_borders_match_published_counts(self):
        # 52,416 hourly rows split 7:1:2; window counts include the 24-step horizon.
        table = raw_table(52_416, 3, seed=1)
        train, val, test, _ = split_and_normalize(table, SplitSpec(), look_back=168)
        assert window_count(train.n_rows, 168, 24) == 36_500
        assert window_count(val.n_rows, 168, 24) == 5_219
        assert window_count(test.n_rows, 168, 24) == 10_460

    def test_val_test_prefixed_with_look_back(self):
        table = raw_table(200, 2)
        train, val, test, _ = split_and_normalize(table, SplitSpec(), look_back=10)
        assert val.timestamps[0] == train.timestamps[-10]
        assert test.timestamps[0] == val.timestamps[-10]

    def test_constant_column_flagged_and_zeroed(self):
        table = raw_table(100, 3)
        table.values[:, 1] = 5.0
        with pytest.warns(UserWarning, match="constant"):
            train, _, _, stats = split_and_normalize(table, SplitSpec(), look_back=5)
        assert stats.degenerate[1]
        assert stats.std[1] == 1.0
        assert np.allclose(train.normalized[:, 1], 0.0)

    def test_round_trip_identity(self):
        table = raw_table(150, 4, seed=9)
        train, val, test, stats = split_and_normalize(table, SplitSpec(), look_back=8)
        for seg in (train, val, test):
            restored = stats.denormalize(seg.normalized)
            rel = np.abs(restored - seg.raw) / np.maximum(np.abs(seg.raw), 1.0)
            assert rel.max() < 1e-9

    def test_train_too_short_raises(self):
        table = raw_table(30, 2)
        with pytest.raises(SplitError):
            split_and_normalize(table, SplitSpec(), look_back=25)

    def test_normalization_statistics_come_from_train_only(self):
        table = raw_table(300, 2, seed=5)
        train, _, _, stats = split_and_normalize(table, SplitSpec(), look_back=8)
        np.testing.assert_allclose(stats.mean, train.raw.mean(axis=0))
        np.testing.assert_allclose(stats.std, train.raw.std(axis=0))

    @given(
        n_rows=st.integers(min_value=60, max_value=400),
        n_cols=st.integers(min_value=1, max_value=4),
        seed=st.integers(min_value=0, max_value=50),
    )
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, n_rows, n_cols, seed):
        table = raw_table(n_rows, n_cols, seed=seed)
        train, val, test, stats = split_and_normalize(table, SplitSpec(), look_back=5)
        for seg in (train, val, test):
            restored = stats.denormalize(seg.normalized)
            rel = np.abs(restored - seg.raw) / np.maximum(np.abs(seg.raw), 1.0)
            assert rel.max() < 1e-9


class TestWindowStream:
    def _segment(self, n_rows, n_cols=3, dataset_id="demo"):
        table = raw_table(n_rows, n_cols)
        train, _, _, _ = split_and_normalize(table, SplitSpec(0.8, 0.1, 0.1), look_back=5,
                                             dataset_id=dataset_id)
        return train

    def test_single_window(self):
        seg = self._segment(150)
        seg = seg.__class__(seg.dataset_id, seg.split, seg.timestamps[:120], seg.raw[:120],
                            seg.normalized[:120])
        samples = list(window_stream(seg, t_en=96, s=24))
        assert len(samples) == 1  # 120 - 96 - 24 + 1

    def test_epf_shapes(self):
        seg = self._segment(400, n_cols=3)
        samples = list(window_stream(seg, t_en=168, t_ex=168, s=24))
        assert len(samples) == seg.n_rows - 168 - 24 + 1
        assert samples[0].x_ex.shape == (168, 2)
        assert samples[0].x_en.shape == (168,)
        assert samples[0].y_en.shape == (24,)

    def test_endogenous_is_last_variate(self):
        seg = self._segment(160, n_cols=7)
        sample = next(window_stream(seg, t_en=96, s=8))
        np.testing.assert_array_equal(sample.x_en, seg.normalized[:96, -1].astype(np.float32))
        np.testing.assert_array_equal(sample.x_ex, seg.normalized[:96, :6].astype(np.float32))
        assert sample.x_ex.shape[1] == 6

    def test_t_ex_longer_than_t_en_rejected(self):
        seg = self._segment(120)
        with pytest.raises(ValueError, match="right-aligned"):
            list(window_stream(seg, t_en=24, t_ex=48, s=8))

    def test_exogenous_window_right_aligned(self):
        seg = self._segment(120)
        sample = next(window_stream(seg, t_en=48, t_ex=24, s=8))
        np.testing.assert_array_equal(sample.x_ex, seg.normalized[24:48, :-1].astype(np.float32))

    def test_target_follows_history_in_time(self):
        seg = self._segment(200)
        for sample in window_stream(seg, t_en=24, s=8, stride=13):
            assert sample.target_start_timestamp == sample.start_timestamp + timedelta(hours=24)

    @given(
        n_rows=st.integers(min_value=40, max_value=240),
        t_en=st.integers(min_value=4, max_value=48),
        s=st.integers(min_value=1, max_value=24),
    )
    @settings(max_examples=40, deadline=None)
    def test_window_count_formula(self, n_rows, t_en, s):
        seg = self._segment(max(n_rows, 60))
        expected = max(0, seg.n_rows - t_en - s + 1)
        if expected == 0:
            with pytest.raises(SplitError):
                list(window_stream(seg, t_en=t_en, s=s))
        else:
            assert len(list(window_stream(seg, t_en=t_en, s=s))) == expected
            assert window_count(seg.n_rows, t_en, s) == expected

    def test_split_target_rows_disjoint(self):
        table = raw_table(300, 2)
        t_en, s = 24, 8
        train, val, test, _ = split_and_normalize(table, SplitSpec(), look_back=t_en)
        covered = {}
        for seg in (train, val, test):
            rows = set()
            for sample in window_stream(seg, t_en=t_en, s=s):
                start = sample.target_start_timestamp
                rows.update(start + timedelta(hours=i) for i in range(s))
            covered[seg.split] = rows
        assert not covered["train"] & covered["val"]
        assert not covered["val"] & covered["test"]
        assert not covered["train"] & covered["test"]


class TestDescriptorsAndRegistry:
    def test_descriptor_requires_endo_last(self):
        with pytest.raises(ValueError, match="last column"):
            DatasetDescriptor(
                name="x", domain="d", frequency="1 Hour",
                variate_names=("a", "b"), endogenous_name="a",
                exogenous_descriptions="e", source_note="s",
            )

    def test_descriptor_rejects_duplicates(self):
        with pytest.raises(ValueError, match="duplicate"):
            DatasetDescriptor(
                name="x", domain="d", frequency="1 Hour",
                variate_names=("a", "a"), endogenous_name="a",
                exogenous_descriptions="e", source_note="s",
            )

    def test_split_spec_validation(self):
        with pytest.raises(ValueError):
            SplitSpec(0.5, 0.1, 0.1)
        with pytest.raises(ValueError):
            SplitSpec(-0.5, 0.7, 0.8)
        assert SplitSpec.ratio(6, 2, 2).train_ratio == pytest.approx(0.6)

    def test_registry_round_trip(self, tmp_path):
        entry = registry_entry(tmp_path, "demo", 200, 3)
        registry = {
            "demo": {
                "path": "demo.csv",
                "domain": entry.domain,
                "frequency": entry.frequency,
                "exogenous_descriptions": entry.exogenous_descriptions,
                "source_note": entry.source_note,
                "split": [7, 1, 2],
            }
        }
        reg_path = tmp_path / "registry.json"
        reg_path.write_text(json.dumps(registry))
        loaded = load_registry(reg_path)
        assert loaded["demo"].path == tmp_path / "demo.csv"
        assert loaded["demo"].split.train_ratio == pytest.approx(0.7)

    def test_registry_missing_keys(self, tmp_path):
        reg_path = tmp_path / "registry.json"
        reg_path.write_text(json.dumps({"demo": {"path": "demo.csv"}}))
        with pytest.raises(ValueError, match="missing keys"):
            load_registry(reg_path)

    def test_ingest_reorders_endogenous(self, tmp_path):
        entry = registry_entry(tmp_path, "demo", 200, 3)
        entry = entry.__class__(**{**entry.__dict__, "endogenous": "v0"})
        ingested = ingest(entry, look_back=24)
        assert ingested.descriptor.endogenous_name == "v0"
        assert ingested.descriptor.variate_names == ("v1", "v2", "v0")

    def test_ingest_whole_pipeline(self, tmp_path):
        entry = registry_entry(tmp_path, "demo", 300, 4)
        ingested = ingest(entry, look_back=24)
        assert ingested.descriptor.n_exogenous == 3
        assert ingested.train.n_rows == 210
        samples = list(window_stream(ingested.train, t_en=24, s=8))
        assert len(samples) == 210 - 24 - 8 + 1
