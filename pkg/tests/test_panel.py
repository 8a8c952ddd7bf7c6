from datetime import date, timedelta

import numpy as np
import pandas as pd
import pytest

from psmdid.panel import (
    VariableDescriptor,
    center_by_date,
    correlation_matrix,
    extract_window,
    impute_forward,
    load_panel,
    load_panel_wide,
    save_panel,
    summarize,
)

from conftest import toy_panel
from oracles import pearson_by_hand


def write_long(tmp_path, rows, header="country,date,variable,value"):
    path = tmp_path / "panel.csv"
    path.write_text(header + "\n" + "\n".join(rows) + ("\n" if rows else ""))
    return path


SCHEMA = [
    VariableDescriptor("C3", "events", 0, 2),
    VariableDescriptor("NCSM", "cases", 0, float("inf")),
]


class TestLoadPanel:
    def test_round_trip_preserves_cells(self, tmp_path):
        ds = toy_panel(n_countries=3, n_days=12, seed=5)
        # punch a few holes so missing cells round-trip too
        ds.values["NCSM"][1, 3] = np.nan
        ds.values["C3"][0, 0] = np.nan
        out = tmp_path / "roundtrip.csv"
        save_panel(ds, out)
        back = load_panel(out, schema=ds.variables)
        again = tmp_path / "again.csv"
        save_panel(back, again)
        assert out.read_text() == again.read_text()
        for name in ds.variable_names:
            a, b = ds.values[name], back.values[name]
            assert np.array_equal(np.isnan(a), np.isnan(b))
            assert np.array_equal(a[~np.isnan(a)], b[~np.isnan(b)])

    def test_empty_file_errors(self, tmp_path):
        path = write_long(tmp_path, [])
        with pytest.raises(ValueError, match="no data rows"):
            load_panel(path, schema=SCHEMA)
        empty = tmp_path / "zero.csv"
        empty.write_text("")
        with pytest.raises(ValueError, match="no data rows"):
            load_panel(empty, schema=SCHEMA)

    def test_bound_violation_is_fatal_and_named(self, tmp_path):
        path = write_long(tmp_path, [
            "AAA,2021-01-01,C3,1",
            "AAA,2021-01-02,C3,5",
        ])
        with pytest.raises(ValueError, match=r"C3.*5\.0.*AAA.*2021-01-02"):
            load_panel(path, schema=SCHEMA)

    def test_unknown_variable_warns_and_ignores(self, tmp_path):
        path = write_long(tmp_path, [
            "AAA,2021-01-01,C3,1",
            "AAA,2021-01-01,BOGUS,9",
        ])
        with pytest.warns(UserWarning, match="BOGUS"):
            ds = load_panel(path, schema=SCHEMA)
        assert "BOGUS" not in ds.values

    def test_malformed_date(self, tmp_path):
        path = write_long(tmp_path, ["AAA,01/02/2021,C3,1"])
        with pytest.raises(ValueError, match="malformed date"):
            load_panel(path, schema=SCHEMA)

    def test_blank_cells_become_missing(self, tmp_path):
        path = write_long(tmp_path, [
            "AAA,2021-01-01,C3,1",
            "AAA,2021-01-02,C3,",
            "AAA,2021-01-03,C3,2",
        ])
        ds = load_panel(path, schema=SCHEMA)
        assert np.isnan(ds.value("AAA", date(2021, 1, 2), "C3"))

    def test_wide_reader_matches_long(self, tmp_path):
        long_path = write_long(tmp_path, [
            "AAA,2021-01-01,C3,1",
            "AAA,2021-01-02,C3,2",
            "BBB,2021-01-01,C3,0",
            "BBB,2021-01-02,C3,1",
        ])
        wide_path = tmp_path / "wide.csv"
        wide_path.write_text(
            "country,date,C3\nAAA,2021-01-01,1\nAAA,2021-01-02,2\n"
            "BBB,2021-01-01,0\nBBB,2021-01-02,1\n"
        )
        a = load_panel(long_path, schema=SCHEMA)
        b = load_panel_wide(wide_path, schema=SCHEMA)
        assert a.countries == b.countries and a.dates == b.dates
        assert np.array_equal(a.values["C3"], b.values["C3"])


class TestImputeForward:
    def make(self, series):
        n = len(series)
        schema = [VariableDescriptor("C3", "events", 0, 10)]
        return toy_panel(n_countries=1, n_days=n, schema=schema,
                         fill={"C3": [series]})

    def test_short_gap_filled(self):
        ds = self.make([1, np.nan, np.nan, 2])
        out = impute_forward(ds, max_gap=2)
        assert out.values["C3"][0].tolist() == [1, 1, 1, 2]

    def test_leading_gap_preserved(self):
        ds = self.make([np.nan, 1, 1, 1])
        out = impute_forward(ds, max_gap=99)
        assert np.isnan(out.values["C3"][0, 0])

    def test_long_gap_preserved(self):
        ds = self.make([1, np.nan, np.nan, np.nan, np.nan, np.nan, 2])
        out = impute_forward(ds, max_gap=3)
        assert np.isnan(out.values["C3"][0, 1:6]).all()

    def test_original_untouched(self):
        ds = self.make([1, np.nan, 2, 2])
        impute_forward(ds, max_gap=1)
        assert np.isnan(ds.values["C3"][0, 1])


class TestSummarize:
    def test_single_cell(self):
        schema = [VariableDescriptor("X", "x", 0, 100)]
        ds = toy_panel(n_countries=1, n_days=1, schema=schema, fill={"X": [[7.0]]})
        row = summarize(ds).iloc[0]
        assert row["mean"] == 7 and row["min"] == 7 and row["max"] == 7 and row["n"] == 1
        assert np.isnan(row["sd"])

    def test_row_order_invariance(self, tmp_path):
        rows = [
            "AAA,2021-01-01,C3,1",
            "BBB,2021-01-01,C3,2",
            "AAA,2021-01-02,C3,0",
            "BBB,2021-01-02,C3,2",
        ]
        a = summarize(load_panel(write_long(tmp_path, rows), schema=SCHEMA))
        b = summarize(load_panel(write_long(tmp_path, rows[::-1]), schema=SCHEMA))
        pd.testing.assert_frame_equal(a, b)

    def test_sample_sd(self):
        schema = [VariableDescriptor("X", "x", 0, 100)]
        ds = toy_panel(n_countries=1, n_days=4, schema=schema,
                       fill={"X": [[1.0, 2.0, 3.0, 4.0]]})
        row = summarize(ds).iloc[0]
        assert row["sd"] == pytest.approx(np.std([1, 2, 3, 4], ddof=1))

    def test_all_missing_flagged(self):
        schema = [VariableDescriptor("X", "x", 0, 100)]
        ds = toy_panel(n_countries=1, n_days=2, schema=schema,
                       fill={"X": [[np.nan, np.nan]]})
        row = summarize(ds).iloc[0]
        assert row["n"] == 0 and np.isnan(row["mean"])


class TestCorrelationMatrix:
    def make_two(self, x, y):
        schema = [VariableDescriptor("X", "x", -100, 100),
                  VariableDescriptor("Y", "y", -100, 100)]
        return toy_panel(n_countries=1, n_days=len(x), schema=schema,
                         fill={"X": [x], "Y": [y]})

    def test_unit_diagonal_and_symmetry(self):
        ds = toy_panel(n_countries=3, n_days=40, seed=2)
        corr = correlation_matrix(ds, ["C3", "NCSM", "R"])
        assert np.allclose(np.diag(corr.to_numpy()), 1.0)
        assert np.array_equal(corr.to_numpy(), corr.to_numpy().T)
        assert np.nanmax(np.abs(corr.to_numpy())) <= 1.0

    def test_exact_linearity(self):
        corr = correlation_matrix(self.make_two([1, 2, 3], [2, 4, 6]), ["X", "Y"])
        assert corr.loc["X", "Y"] == pytest.approx(1.0)

    def test_hand_computed_value(self):
        # pearson_by_hand([1,2,3,4], [3,1,4,2]) == 0.0 (cross products cancel)
        x, y = [1, 2, 3, 4], [3, 1, 4, 2]
        expected = pearson_by_hand(x, y)
        assert expected == pytest.approx(0.0, abs=1e-12)
        corr = correlation_matrix(self.make_two(x, y), ["X", "Y"])
        assert corr.loc["X", "Y"] == pytest.approx(expected, abs=1e-12)

    def test_constant_variable_flagged(self):
        corr = correlation_matrix(self.make_two([5, 5, 5], [1, 2, 3]), ["X", "Y"])
        assert np.isnan(corr.loc["X", "Y"]) and np.isnan(corr.loc["Y", "X"])

    def test_too_few_variables(self):
        ds = toy_panel()
        with pytest.raises(ValueError, match="two variables"):
            correlation_matrix(ds, ["C3"])


class TestExtractWindow:
    def test_offsets_and_anchor(self):
        ds = toy_panel(n_countries=2, n_days=90, start=date(2021, 1, 1))
        anchor = date(2021, 2, 15)
        win = extract_window(ds, anchor, "NCSM")
        assert win.offset_date(30) == anchor
        assert win.offset_date(1) == anchor - timedelta(days=29)
        assert win.offset_date(60) == anchor + timedelta(days=30)
        assert all(len(win.series[c]) == 60 for c in win.countries)

    def test_boundary_error(self):
        ds = toy_panel(n_days=90, start=date(2021, 1, 1))
        with pytest.raises(ValueError, match="needs data"):
            extract_window(ds, date(2021, 1, 10), "NCSM")

    def test_missing_country_dropped_and_counted(self):
        ds = toy_panel(n_countries=3, n_days=90, start=date(2021, 1, 1))
        ds.values["NCSM"][1, 40] = np.nan
        win = extract_window(ds, date(2021, 2, 15), "NCSM")
        assert "A01" in win.dropped and "A01" not in win.countries
        assert len(win.countries) + len(win.dropped) == 3


class TestCenterByDate:
    def test_two_countries(self):
        schema = [VariableDescriptor("X", "x", 0, 100)]
        ds = toy_panel(n_countries=2, n_days=1, schema=schema,
                       fill={"X": [[10.0], [20.0]]})
        out = center_by_date(ds, "X", ["A00", "A01"])
        assert out.iloc[0].tolist() == [-5.0, 5.0]

    def test_country_at_mean_is_zero(self):
        schema = [VariableDescriptor("X", "x", 0, 100)]
        ds = toy_panel(n_countries=3, n_days=5, schema=schema,
                       fill={"X": [[10.0] * 5, [20.0] * 5, [15.0] * 5]})
        out = center_by_date(ds, "X", ["A00", "A01", "A02"])
        assert np.allclose(out["A02"], 0.0)

    def test_rows_sum_to_zero(self):
        ds = toy_panel(n_countries=6, n_days=50, seed=9)
        out = center_by_date(ds, "NCSM", ds.countries)
        assert np.nanmax(np.abs(out.sum(axis=1).to_numpy())) < 1e-9
