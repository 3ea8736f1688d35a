"""Grid tiling, POI rasterization, neighborhoods, aggregation, splits, synthetic regions."""

from .grid import (
    SPLITS, Footprint, GridCell, GridError, POIRecord, RasterReport, RegionBounds, RegionDataset,
    SplitConfigError, aggregate_resolution, neighborhood, neighborhood_indices, rasterize_pois,
    split_dataset, tile_region,
)
from .synth import SynthSpec, linear_emission, smooth_emission, synth_region
from .storage import read_dataset, write_dataset
