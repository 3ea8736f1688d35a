import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcarbon.geogrid import (
    Footprint, GridError, POIRecord, RegionBounds, SplitConfigError, SynthSpec,
    aggregate_resolution, linear_emission, neighborhood, neighborhood_indices, rasterize_pois,
    read_dataset, split_dataset, synth_region, tile_region, write_dataset,
)


@pytest.fixture(scope="module")
def region():
    return synth_region(SynthSpec(grid_rows=6, grid_cols=6, n_categories=3, image_size=4, poi_size=4, seed=3))


# --- tiling ---------------------------------------------------------------------------

def test_tile_counts():
    assert len(tile_region(RegionBounds(0, 0, 4000, 4000, 1000))) == 16
    assert len(tile_region(RegionBounds(0, 0, 4000, 4000, 2000))) == 4


def test_tile_rejects_bad_resolution():
    with pytest.raises(GridError):
        RegionBounds(0, 0, 10, 10, 0)


@settings(max_examples=60, deadline=None)
@given(st.floats(100, 5000), st.floats(100, 5000), st.floats(150, 2000))
def test_tiles_partition_the_box(width, height, res):
    b = RegionBounds(10.0, -20.0, 10.0 + width, -20.0 + height, res)
    cells = tile_region(b)
    assert len(cells) == int(np.ceil(width / res - 1e-9)) * int(np.ceil(height / res - 1e-9))
    total = sum(c.footprint.area for c in cells)
    assert total == pytest.approx(width * height, rel=1e-9)
    # adjacent edges meet exactly, so the union is the box and interiors are disjoint
    for c in cells:
        fp = c.footprint
        assert fp.min_x >= b.min_x and fp.max_x <= b.max_x and fp.min_y >= b.min_y and fp.max_y <= b.max_y
        assert fp.max_x > fp.min_x and fp.max_y > fp.min_y
    xs = sorted({c.footprint.min_x for c in cells})
    assert xs[0] == b.min_x
    for c in cells:
        right = [o for o in cells if o.row == c.row and o.col == c.col + 1]
        if right:
            assert right[0].footprint.min_x == c.footprint.max_x


# --- rasterization --------------------------------------------------------------------

FP = Footprint(0.0, 0.0, 1000.0, 1000.0)


def test_raster_empty():
    counts, rep = rasterize_pois([], FP, 3, 3, 4)
    assert counts.shape == (3, 3, 4) and not counts.any() and rep.accepted == 0


def test_raster_center_bins_upper_right():
    pois = [POIRecord(500.0, 500.0, 0)] * 3
    counts, _ = rasterize_pois(pois, FP, 2, 2, 5)
    assert counts[1, 1, 0] == 3
    assert counts.sum() == 3


def test_raster_max_edge_goes_to_last_bin():
    counts, _ = rasterize_pois([(1000.0, 1000.0, 1)], FP, 4, 4, 2)
    assert counts[3, 3, 1] == 1


def test_raster_matches_counting_oracle():
    rng = np.random.default_rng(0)
    recs = np.column_stack([rng.uniform(0, 1000, 100), rng.uniform(0, 1000, 100), rng.integers(0, 3, 100)])
    counts, rep = rasterize_pois(recs, FP, 5, 4, 3)
    oracle = np.zeros((5, 4, 3))
    for i in range(5):
        y0, y1 = i * 200.0, (i + 1) * 200.0
        for j in range(4):
            x0, x1 = j * 250.0, (j + 1) * 250.0
            for x, y, c in recs:
                if x0 <= x < x1 and y0 <= y < y1:
                    oracle[i, j, int(c)] += 1
    np.testing.assert_array_equal(counts, oracle)
    assert rep.accepted == 100


def test_raster_rejects_bad_category_and_skips_outside():
    recs = [(10.0, 10.0, 0), (20.0, 20.0, 7), (5000.0, 10.0, 1)]
    counts, rep = rasterize_pois(recs, FP, 2, 2, 3)
    assert counts.sum() == 1
    assert rep.outside == 1 and len(rep.errors) == 1 and rep.errors[0]["index"] == 1


def test_raster_conserves_per_category_totals():
    rng = np.random.default_rng(1)
    recs = np.column_stack([rng.uniform(0, 1000, 500), rng.uniform(0, 1000, 500), rng.integers(0, 4, 500)])
    counts, _ = rasterize_pois(recs, FP, 7, 3, 4)
    np.testing.assert_array_equal(counts.sum(axis=(0, 1)), np.bincount(recs[:, 2].astype(int), minlength=4))


# --- neighborhoods ----------------------------------------------------------------------

def test_neighborhood_interior_corner_degenerate(region):
    _, mask = neighborhood(region, 2, 2, 3)
    assert mask.sum() == 9
    block, mask = neighborhood(region, 0, 0, 3)
    assert mask.sum() == 4 and sum(c is None for line in block for c in line) == 5
    block, mask = neighborhood(region, 4, 1, 1)
    assert mask.shape == (1, 1) and block[0][0].row == 4 and block[0][0].col == 1


def test_neighborhood_rejects_even(region):
    with pytest.raises(GridError):
        neighborhood(region, 1, 1, 4)


@pytest.mark.parametrize("M", [1, 3, 5, 7])
def test_neighborhood_mask_marks_out_of_bounds(region, M):
    grid = region.index_grid()
    idx, mask = neighborhood_indices(grid, region.rows, region.cols, M)
    h = M // 2
    for b in range(len(region)):
        r, c = region.rows[b], region.cols[b]
        for i in range(M):
            for j in range(M):
                rr, cc = r + i - h, c + j - h
                inside = 0 <= rr < 6 and 0 <= cc < 6
                assert mask[b, i, j] == inside
                if inside:
                    assert idx[b, i, j] == grid[rr, cc]


# --- aggregation ---------------------------------------------------------------------

def test_aggregate_additivity_and_log(region):
    ds = region.with_emission(np.zeros(len(region)))
    em = ds.emission.copy()
    grid = ds.index_grid()
    em[grid[0:2, 0:2].ravel()] = [1.0, 2.0, 3.0, 4.0]
    agg = aggregate_resolution(ds.with_emission(em), 2)
    assert agg.emission[0] == 10.0
    assert agg.log_target[0] == pytest.approx(np.log(11.0), abs=1e-15)
    assert agg.log_target[0] != pytest.approx(np.log1p(em[grid[0:2, 0:2].ravel()]).sum())


@pytest.mark.parametrize("factor", [2, 3, 4])
def test_aggregate_conservation(region, factor):
    agg = aggregate_resolution(region, factor)
    k = 6 // factor
    assert len(agg) == k * k
    covered = region.index_grid()[:k * factor, :k * factor].ravel()
    assert agg.emission.sum() == pytest.approx(region.emission[covered].sum(), rel=1e-12)
    np.testing.assert_array_equal(agg.pois.sum(axis=(0, 1, 2)), region.pois[covered].sum(axis=(0, 1, 2)))
    assert agg.images.shape[1:] == region.images.shape[1:]
    assert agg.bounds.resolution_m == factor * region.bounds.resolution_m


def test_aggregate_poi_rebinning_matches_rasterizing_records(region):
    agg = aggregate_resolution(region, 2)
    for i in range(len(agg)):
        fp = agg.bounds.footprint(int(agg.rows[i]), int(agg.cols[i]))
        counts, _ = rasterize_pois(agg.poi_records, fp, 4, 4, 3)
        np.testing.assert_array_equal(agg.pois[i], counts)


def test_aggregate_image_is_block_mean(region):
    agg = aggregate_resolution(region, 2)
    grid = region.index_grid()
    big = np.zeros((8, 8, 3))
    for dr in range(2):
        for dc in range(2):
            big[dr * 4:(dr + 1) * 4, dc * 4:(dc + 1) * 4] = region.images[grid[dr, dc]]
    expected = big.reshape(4, 2, 4, 2, 3).mean(axis=(1, 3))
    np.testing.assert_allclose(agg.images[0], expected, atol=1e-15)


def test_aggregate_errors(region):
    with pytest.raises(GridError):
        aggregate_resolution(region, 1)
    with pytest.raises(GridError):
        aggregate_resolution(region, 7)


# --- splits ------------------------------------------------------------------------------

def _hundred():
    spec = SynthSpec(grid_rows=10, grid_cols=10, n_categories=2, image_size=2, poi_size=2, seed=0)
    return synth_region(spec)


def test_random_split_counts_and_determinism():
    ds = _hundred()
    a = split_dataset(ds, "random", (0.6, 0.2, 0.2), seed=11)
    assert [int(np.sum(a.splits == s)) for s in ("train", "valid", "test")] == [60, 20, 20]
    b = split_dataset(ds, "random", (0.6, 0.2, 0.2), seed=11)
    assert list(a.splits) == list(b.splits)


def test_regional_split_keeps_test_regions_whole():
    ds = _hundred()
    out = split_dataset(ds, "regional", seed=0, test_regions=["D3"])
    tags, splits = out.region_tags, out.splits
    assert set(splits[tags == "D3"]) == {"test"}
    assert "D3" not in set(tags[splits != "test"])
    out2 = split_dataset(ds, "regional", test_regions=["D3"], valid_regions=["D0"])
    assert set(out2.splits[out2.region_tags == "D0"]) == {"valid"}


def test_split_errors():
    ds = _hundred()
    with pytest.raises(SplitConfigError):
        split_dataset(ds, "random", (0.5, 0.5, 0.5))
    with pytest.raises(SplitConfigError):
        split_dataset(ds, "random", (1.0, 0.0, 0.0))
    with pytest.raises(SplitConfigError):
        split_dataset(ds, "regional")
    with pytest.raises(SplitConfigError):
        split_dataset(ds, "regional", test_regions=["nope"])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_splits_disjoint_and_exhaustive(seed):
    ds = _hundred()
    out = split_dataset(ds, "random", seed=seed)
    assert set(out.splits) == {"train", "valid", "test"}
    assert len(out.splits) == len(ds)


# --- synthetic regions --------------------------------------------------------------------

def test_synth_direct_formula_without_smoothing_or_noise():
    spec = SynthSpec(grid_rows=5, grid_cols=4, n_categories=3, image_size=6, poi_size=5,
                     smoothing=0.0, noise_std=0.0, seed=2)
    ds = synth_region(spec)
    w = np.asarray(spec.weights)
    for i in range(len(ds)):
        totals = [ds.pois[i][..., c].sum() for c in range(3)]
        expected = sum(w[c] * totals[c] for c in range(3)) + spec.image_weight * ds.images[i].mean()
        assert abs(ds.emission[i] - expected) <= 1e-9


def test_synth_zero_weights():
    ds = synth_region(SynthSpec(grid_rows=4, grid_cols=4, n_categories=2, image_size=4, poi_size=4,
                                weights=[0.0, 0.0], image_weight=0.0, noise_std=0.0))
    assert not ds.emission.any() and not ds.log_target.any()


def _moran(field):
    z = field - field.mean()
    num, wsum = 0.0, 0
    rows, cols = field.shape
    for r in range(rows):
        for c in range(cols):
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    num += z[r, c] * z[rr, cc]
                    wsum += 1
    return (field.size / wsum) * num / (z * z).sum()


def test_synth_smoothing_raises_autocorrelation():
    ds = synth_region(SynthSpec(seed=5))
    raw = np.asarray(ds.truth["raw_field"])
    smooth = np.asarray(ds.truth["pre_noise_field"])
    assert _moran(smooth) > _moran(raw)


def test_synth_is_deterministic():
    a = synth_region(SynthSpec(grid_rows=4, grid_cols=4, seed=9))
    b = synth_region(SynthSpec(grid_rows=4, grid_cols=4, seed=9))
    assert a.emission.tobytes() == b.emission.tobytes()
    assert a.images.tobytes() == b.images.tobytes()


def test_synth_cells_carry_consistent_poi_tensors():
    ds = synth_region(SynthSpec(grid_rows=3, grid_cols=3, n_categories=2, image_size=4, poi_size=4, seed=1))
    totals = ds.pois.sum(axis=(0, 1, 2))
    np.testing.assert_array_equal(totals, np.bincount(ds.poi_records[:, 2].astype(int), minlength=2))
    assert np.all(ds.images >= 0) and np.all(ds.images <= 1)


def test_synth_spec_rejects_unknown_fields():
    with pytest.raises(GridError):
        SynthSpec.from_dict({"grid_rows": 3, "bogus": 1})
    with pytest.raises(GridError):
        SynthSpec.from_dict({"n_categories": 3, "weights": [1.0]})


def test_linear_emission_helper():
    np.testing.assert_allclose(linear_emission(np.array([[1.0, 2.0]]), np.array([0.5]), [3.0, 4.0], 10.0), [16.0])


# --- storage -------------------------------------------------------------------------------

def test_dataset_roundtrip(tmp_path, region):
    write_dataset(region, tmp_path / "ds")
    for name in ("region.json", "cells.csv", "pois.csv", "truth.json", "img_0_0.f64", "poi_5_5.f64"):
        assert (tmp_path / "ds" / name).exists()
    back = read_dataset(tmp_path / "ds")
    assert back.emission.tobytes() == region.emission.tobytes()
    assert back.images.tobytes() == region.images.tobytes()
    assert back.pois.tobytes() == region.pois.tobytes()
    assert list(back.splits) == list(region.splits)
    assert list(back.region_tags) == list(region.region_tags)
    np.testing.assert_array_equal(back.poi_records, region.poi_records)
