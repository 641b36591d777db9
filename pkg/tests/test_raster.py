import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gevr.errors import InvalidConfigError, InvalidInputError, RasterFormatError
from gevr.raster import (
    GeoGrid,
    RasterSeries,
    load_raster,
    load_response,
    make_folds,
    save_raster,
    save_response,
    standardize_apply,
    standardize_fit,
)
from gevr.spatial import Circle, circle_members
from gevr.synthetic import GeneratorConfig, generate_synthetic


class TestFolds:
    def test_nine_year_layout(self):
        # 1935 days over 2003-2011, 215 days per year
        day_year = np.repeat(np.arange(2003, 2012), 215)
        folds = make_folds(day_year)
        assert len(folds) == 9
        f2003 = next(f for f in folds if f.test_year == 2003)
        assert len(f2003.train_days) == 1720
        assert sorted(np.unique(day_year[f2003.train_days])) == list(range(2004, 2012))

    def test_two_year_case(self):
        folds = make_folds([1999, 1999, 2000])
        assert len(folds) == 2
        fb = next(f for f in folds if f.test_year == 2000)
        assert list(fb.train_days) == [0, 1]

    def test_single_year_rejected(self):
        with pytest.raises(InvalidInputError):
            make_folds([2005, 2005, 2005])

    @given(st.lists(st.integers(2000, 2006), min_size=4, max_size=60))
    def test_partition_property(self, years):
        years = sorted(years)
        if len(set(years)) < 2:
            return
        folds = make_folds(years)
        all_days = set(range(len(years)))
        for f in folds:
            train, test = set(f.train_days), set(f.test_days)
            assert train.isdisjoint(test)
            assert train | test == all_days
            assert {years[d] for d in test} == {f.test_year}


class TestStandardize:
    def test_symmetric_pair(self):
        p = standardize_fit([1.0, 3.0], [0, 1])
        assert p.mean == 2.0 and p.std == 1.0

    def test_constant(self):
        p = standardize_fit([5.0, 5.0, 5.0], [0, 1, 2])
        assert p.mean == 5.0 and p.std == 0.0

    def test_against_two_pass_oracle(self):
        vals = np.array([1.0, 2.0, 3.0, 4.0])
        p = standardize_fit(vals, np.arange(4))
        # independent two-pass computation
        m = sum(vals) / 4
        var = sum((v - m) ** 2 for v in vals) / 4
        assert p.mean == pytest.approx(m)
        assert p.std == pytest.approx(var**0.5)

    def test_apply(self):
        p = standardize_fit([1.0, 3.0], [0, 1])
        assert standardize_apply(2.0, p) == 0.0
        assert standardize_apply(3.0, p) == 1.0
        pz = standardize_fit([5.0, 5.0], [0, 1])
        assert standardize_apply(123.0, pz) == 0.0

    def test_empty_training_rejected(self):
        with pytest.raises(InvalidInputError):
            standardize_fit([1.0, 2.0], [])

    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=30))
    @settings(max_examples=50)
    def test_unit_variance_property(self, vals):
        vals = np.array(vals)
        if vals.std() == 0:
            return
        days = np.arange(len(vals))
        p = standardize_fit(vals, days)
        z = standardize_apply(vals, p)
        assert abs(z[days].mean()) < 1e-9
        assert abs(z[days].var() - 1.0) < 1e-9


class TestSynthetic:
    def test_noiseless_identity(self):
        config = GeneratorConfig(
            rows=12, cols=12, n_days=40, years=(2000, 2001), noise_std=0.0,
            formula_id="identity",
        )
        raster, resp, truth = generate_synthetic(config, 3)
        mask = circle_members(truth.circles[0], raster.grid)
        daily_mean = raster.values[:, mask.rows, mask.cols, 0].mean(axis=1)
        np.testing.assert_array_equal(resp.values, daily_mean)

    def test_determinism(self):
        config = GeneratorConfig(rows=10, cols=10, n_days=30, years=(2000, 2001))
        a = generate_synthetic(config, 99)
        b = generate_synthetic(config, 99)
        np.testing.assert_array_equal(a[0].values, b[0].values)
        np.testing.assert_array_equal(a[1].values, b[1].values)
        assert a[2] == b[2]

    def test_reaggregation_oracle(self):
        """Recompute the response from the returned raster and truth."""
        config = GeneratorConfig(
            rows=32, cols=32, n_days=400, years=(2000, 2001, 2002, 2003),
            noise_std=0.0, formula_id="cross_term",
        )
        raster, resp, truth = generate_synthetic(config, 11)
        # independent brute-force aggregation: scan every cell per circle
        latlons = raster.grid.cell_latlons()
        A = []
        for k, c in enumerate(truth.circles):
            from gevr.spatial import haversine_km

            d = haversine_km(latlons[:, 0], latlons[:, 1], c.lat, c.lon)
            flat = np.flatnonzero(d <= c.radius_km)
            rows, cols = flat // 32, flat % 32
            A.append(raster.values[:, rows, cols, k].mean(axis=1))
        expected = 3.0 * A[0] * A[1] + 0.5 * A[2]
        np.testing.assert_array_equal(resp.values, expected)

    def test_circle_outside_grid_rejected(self):
        config = GeneratorConfig(
            rows=10, cols=10, n_days=20, years=(2000, 2001),
            circles=(Circle(-60.0, -120.0, 10.0),) * 3,
        )
        with pytest.raises(InvalidConfigError):
            generate_synthetic(config, 0)


class TestRasterIO:
    def test_round_trip(self, tmp_path, small_dataset):
        raster, _, _ = small_dataset
        path = tmp_path / "r.gevr"
        save_raster(raster, path)
        loaded = load_raster(path)
        # payload narrows to float32 on the first write; thereafter exact
        np.testing.assert_array_equal(
            loaded.values, raster.values.astype(np.float32).astype(np.float64)
        )
        save_raster(loaded, path)
        again = load_raster(path)
        np.testing.assert_array_equal(again.values, loaded.values)
        assert again.grid == raster.grid
        np.testing.assert_array_equal(again.day_year, raster.day_year)

    def test_truncated_file(self, tmp_path, small_dataset):
        raster, _, _ = small_dataset
        path = tmp_path / "r.gevr"
        save_raster(raster, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(RasterFormatError):
            load_raster(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.gevr"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(RasterFormatError):
            load_raster(path)

    def test_payload_counting_rule_113_grid(self, tmp_path):
        # header declares the 113x113x3x1935 shape; the loader must demand
        # exactly 113*113*3*1935 payload entries
        header = b"GEVR" + struct.pack(
            "<B4I4d", 1, 1935, 113, 113, 3, 30.0, 70.0, 0.1, 0.1
        )
        path = tmp_path / "big.gevr"
        path.write_bytes(header)
        with pytest.raises(RasterFormatError) as err:
            load_raster(path)
        expected = len(header) + 1935 * 4 + 113 * 113 * 3 * 1935 * 4
        assert str(expected) in str(err.value)

    def test_response_round_trip(self, tmp_path, small_dataset):
        _, resp, _ = small_dataset
        path = tmp_path / "resp.csv"
        save_response(resp, path)
        loaded = load_response(path)
        np.testing.assert_array_equal(loaded.values, resp.values)
        np.testing.assert_array_equal(loaded.day_year, resp.day_year)


class TestGridValidation:
    def test_bad_spacing(self):
        with pytest.raises(InvalidInputError):
            GeoGrid(4, 4, 0.0, 0.0, -1.0, 1.0)

    def test_latitude_bounds(self):
        with pytest.raises(InvalidInputError):
            GeoGrid(100, 4, 80.0, 0.0, 0.5, 1.0)

    def test_nonfinite_values_rejected(self):
        grid = GeoGrid(2, 2, 0.0, 0.0, 1.0, 1.0)
        vals = np.ones((3, 2, 2, 1))
        vals[1, 0, 0, 0] = np.nan
        with pytest.raises(InvalidInputError):
            RasterSeries(grid=grid, values=vals, day_year=np.array([1, 1, 2]))
