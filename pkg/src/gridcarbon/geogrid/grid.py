"""Grid data model: tiling, POI rasterization, neighborhoods, aggregation, splits.

Coordinates are projected meters. Row indices grow with y and column indices
with x; the same convention holds for pixel rows/cols inside a cell, so pixel
``(0, 0)`` is the south-west corner of its cell.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

SPLITS = ("train", "valid", "test", "none")


class GridError(ValueError):
    pass


class SplitConfigError(GridError):
    pass


@dataclass(frozen=True)
class Footprint:
    min_x: float
    min_y: float
    max_x: float
    max_y: float

    @property
    def area(self) -> float:
        return (self.max_x - self.min_x) * (self.max_y - self.min_y)


@dataclass(frozen=True)
class RegionBounds:
    min_x: float
    min_y: float
    max_x: float
    max_y: float
    resolution_m: float

    def __post_init__(self):
        if not self.resolution_m > 0:
            raise GridError(f"resolution must be positive, got {self.resolution_m}")
        if not (self.max_x > self.min_x and self.max_y > self.min_y):
            raise GridError("bounds need max_x > min_x and max_y > min_y")

    @property
    def n_rows(self) -> int:
        return math.ceil((self.max_y - self.min_y) / self.resolution_m - 1e-9)

    @property
    def n_cols(self) -> int:
        return math.ceil((self.max_x - self.min_x) / self.resolution_m - 1e-9)

    def footprint(self, row: int, col: int) -> Footprint:
        r = self.resolution_m
        return Footprint(
            self.min_x + col * r,
            self.min_y + row * r,
            min(self.min_x + (col + 1) * r, self.max_x),
            min(self.min_y + (row + 1) * r, self.max_y),
        )

    def to_dict(self) -> dict:
        return {"min_x": self.min_x, "min_y": self.min_y, "max_x": self.max_x,
                "max_y": self.max_y, "resolution_m": self.resolution_m}


@dataclass
class GridCell:
    row: int
    col: int
    footprint: Optional[Footprint] = None
    emission_t: float = 0.0
    image: Optional[np.ndarray] = None
    poi: Optional[np.ndarray] = None
    region_tag: str = ""
    split: str = "none"

    @property
    def log_target(self) -> float:
        return float(np.log1p(self.emission_t))


@dataclass(frozen=True)
class POIRecord:
    x: float
    y: float
    category: int


@dataclass
class RasterReport:
    accepted: int = 0
    outside: int = 0
    errors: list = field(default_factory=list)


def tile_region(bounds: RegionBounds) -> list[GridCell]:
    """Cell skeletons covering ``bounds``; edge cells are clipped to the box."""
    return [GridCell(r, c, bounds.footprint(r, c))
            for r in range(bounds.n_rows) for c in range(bounds.n_cols)]


def _as_records(pois) -> np.ndarray:
    if isinstance(pois, np.ndarray):
        arr = pois.astype(np.float64, copy=False)
        return arr.reshape(-1, 3)
    rows = [(p.x, p.y, p.category) if isinstance(p, POIRecord) else tuple(p) for p in pois]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def _bin(coord: np.ndarray, lo: float, hi: float, n: int) -> np.ndarray:
    idx = np.floor((coord - lo) * n / (hi - lo)).astype(np.int64)
    # the max edge belongs to the last bin
    return np.minimum(idx, n - 1)


def rasterize_pois(pois, footprint: Footprint, height: int, width: int,
                   n_categories: int) -> tuple[np.ndarray, RasterReport]:
    """Count POIs per (pixel row, pixel col, category) inside one cell.

    Records outside the footprint are skipped; records with an out-of-range
    category are rejected and listed in ``report.errors``.
    """
    recs = _as_records(pois)
    counts = np.zeros((height, width, n_categories))
    report = RasterReport()
    if len(recs) == 0:
        return counts, report
    x, y, cat = recs[:, 0], recs[:, 1], recs[:, 2]
    inside = (x >= footprint.min_x) & (x <= footprint.max_x) & (y >= footprint.min_y) & (y <= footprint.max_y)
    valid_cat = (cat >= 0) & (cat < n_categories) & (cat == np.floor(cat))
    for k in np.flatnonzero(inside & ~valid_cat):
        report.errors.append({"index": int(k), "category": float(cat[k]),
                              "reason": f"category outside [0, {n_categories})"})
    report.outside = int(np.count_nonzero(~inside))
    ok = inside & valid_cat
    report.accepted = int(np.count_nonzero(ok))
    i = _bin(y[ok], footprint.min_y, footprint.max_y, height)
    j = _bin(x[ok], footprint.min_x, footprint.max_x, width)
    np.add.at(counts, (i, j, cat[ok].astype(np.int64)), 1.0)
    return counts, report


@dataclass
class RegionDataset:
    """All cells of one region, stored as stacked arrays ordered by (row, col)."""

    bounds: RegionBounds
    category_names: list
    rows: np.ndarray
    cols: np.ndarray
    emission: np.ndarray
    images: np.ndarray
    pois: np.ndarray
    region_tags: np.ndarray
    splits: np.ndarray
    poi_records: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    truth: Optional[dict] = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.emission = np.asarray(self.emission, dtype=np.float64)
        self.region_tags = np.asarray(self.region_tags, dtype=object)
        self.splits = np.asarray(self.splits, dtype=object)
        n = len(self.rows)
        for name in ("cols", "emission", "images", "pois", "region_tags", "splits"):
            if len(getattr(self, name)) != n:
                raise GridError(f"{name} has {len(getattr(self, name))} entries, expected {n}")
        if np.any(self.emission < 0):
            raise GridError("emissions must be nonnegative")
        if self.pois.ndim != 4 or self.pois.shape[-1] != self.n_categories:
            raise GridError(f"poi tensors must be (n, H', W', {self.n_categories}), got {self.pois.shape}")
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise GridError(f"images must be (n, H, W, 3), got {self.images.shape}")
        bad = set(self.splits) - set(SPLITS)
        if bad:
            raise GridError(f"unknown split labels {sorted(bad)}")
        order = np.lexsort((self.cols, self.rows))
        if np.any(order != np.arange(n)):
            raise GridError("cells must be ordered by (row, col)")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def n_categories(self) -> int:
        return len(self.category_names)

    @property
    def image_size(self) -> tuple:
        return tuple(self.images.shape[1:3])

    @property
    def poi_size(self) -> tuple:
        return tuple(self.pois.shape[1:3])

    @property
    def log_target(self) -> np.ndarray:
        return np.log1p(self.emission)

    @property
    def grid_shape(self) -> tuple:
        return self.bounds.n_rows, self.bounds.n_cols

    def index_grid(self) -> np.ndarray:
        """``(n_rows, n_cols)`` array of cell indices, -1 where no cell exists."""
        grid = np.full(self.grid_shape, -1, dtype=np.int64)
        grid[self.rows, self.cols] = np.arange(len(self))
        return grid

    def split_indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def cell(self, i: int) -> GridCell:
        r, c = int(self.rows[i]), int(self.cols[i])
        return GridCell(r, c, self.bounds.footprint(r, c), float(self.emission[i]),
                        self.images[i], self.pois[i], str(self.region_tags[i]), str(self.splits[i]))

    @property
    def cells(self) -> list[GridCell]:
        return [self.cell(i) for i in range(len(self))]

    def with_splits(self, splits: Sequence[str]) -> "RegionDataset":
        return replace(self, splits=np.asarray(list(splits), dtype=object))

    def with_emission(self, emission: np.ndarray) -> "RegionDataset":
        return replace(self, emission=np.asarray(emission, dtype=np.float64))


# --- neighborhoods ---------------------------------------------------------------

def neighborhood_indices(index_grid: np.ndarray, rows, cols, M: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized M x M neighborhoods.

    Returns ``(idx, mask)`` of shape ``(B, M, M)``; ``idx`` is -1 and ``mask``
    false wherever the slot falls outside the region or on a missing cell.
    """
    if M < 1 or M % 2 == 0:
        raise GridError(f"neighborhood size must be odd and >= 1, got {M}")
    rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
    cols = np.atleast_1d(np.asarray(cols, dtype=np.int64))
    half = M // 2
    offs = np.arange(-half, half + 1)
    rr = rows[:, None, None] + offs[None, :, None]
    cc = cols[:, None, None] + offs[None, None, :]
    rr, cc = np.broadcast_arrays(rr, cc)
    n_rows, n_cols = index_grid.shape
    inside = (rr >= 0) & (rr < n_rows) & (cc >= 0) & (cc < n_cols)
    idx = np.full(rr.shape, -1, dtype=np.int64)
    idx[inside] = index_grid[rr[inside], cc[inside]]
    return idx, idx >= 0


def neighborhood(dataset: RegionDataset, row: int, col: int, M: int):
    """M x M block of cells centered on (row, col) plus its validity mask."""
    idx, mask = neighborhood_indices(dataset.index_grid(), [row], [col], M)
    block = [[dataset.cell(int(k)) if k >= 0 else None for k in line] for line in idx[0]]
    return block, mask[0]


# --- resolution aggregation ------------------------------------------------------

def _block_reduce(arr: np.ndarray, factor: int, how: str) -> np.ndarray:
    h, w = arr.shape[:2]
    blocks = arr.reshape(h // factor, factor, w // factor, factor, *arr.shape[2:])
    return blocks.mean(axis=(1, 3)) if how == "mean" else blocks.sum(axis=(1, 3))


def aggregate_resolution(dataset: RegionDataset, factor: int) -> RegionDataset:
    """Merge factor x factor blocks of cells into coarser cells.

    Emissions and POI counts add up, images are tiled then block-averaged back to
    the configured size, and partial blocks at the edges are dropped.
    """
    if factor < 2:
        raise GridError(f"aggregation factor must be >= 2, got {factor}")
    n_rows, n_cols = dataset.grid_shape
    br, bc = n_rows // factor, n_cols // factor
    if br == 0 or bc == 0:
        raise GridError(f"region of {n_rows}x{n_cols} cells is smaller than one {factor}x{factor} block")
    grid = dataset.index_grid()
    H, W = dataset.image_size
    Hp, Wp = dataset.poi_size
    out_rows, out_cols, emis, imgs, pois, tags = [], [], [], [], [], []
    for R in range(br):
        for C in range(bc):
            members = grid[R * factor:(R + 1) * factor, C * factor:(C + 1) * factor]
            if np.any(members < 0):
                continue
            img = np.zeros((factor * H, factor * W, 3))
            poi = np.zeros((factor * Hp, factor * Wp, dataset.n_categories))
            for dr in range(factor):
                for dc in range(factor):
                    k = members[dr, dc]
                    img[dr * H:(dr + 1) * H, dc * W:(dc + 1) * W] = dataset.images[k]
                    poi[dr * Hp:(dr + 1) * Hp, dc * Wp:(dc + 1) * Wp] = dataset.pois[k]
            out_rows.append(R)
            out_cols.append(C)
            emis.append(dataset.emission[members.ravel()].sum())
            imgs.append(_block_reduce(img, factor, "mean"))
            pois.append(_block_reduce(poi, factor, "sum"))
            counts = Counter(dataset.region_tags[members.ravel()])
            top = max(counts.values())
            tags.append(sorted(t for t, n in counts.items() if n == top)[0])
    if not out_rows:
        raise GridError("no fully covered block survives aggregation")
    b = dataset.bounds
    res = b.resolution_m * factor
    bounds = RegionBounds(b.min_x, b.min_y, b.min_x + bc * res, b.min_y + br * res, res)
    recs = dataset.poi_records
    keep = ((recs[:, 0] >= bounds.min_x) & (recs[:, 0] <= bounds.max_x)
            & (recs[:, 1] >= bounds.min_y) & (recs[:, 1] <= bounds.max_y))
    return RegionDataset(
        bounds=bounds,
        category_names=list(dataset.category_names),
        rows=out_rows, cols=out_cols, emission=emis,
        images=np.stack(imgs), pois=np.stack(pois),
        region_tags=tags, splits=["none"] * len(out_rows),
        poi_records=recs[keep], truth=None,
    )


# --- dataset splits -----------------------------------------------------------------

def split_dataset(dataset: RegionDataset, mode: str = "random",
                  fractions: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0,
                  test_regions: Iterable[str] = (), valid_regions: Iterable[str] = ()) -> RegionDataset:
    """Assign train/valid/test labels.

    ``random`` draws a seeded permutation and cuts it by ``fractions``.
    ``regional`` sends whole ``test_regions`` to test; validation is either the
    whole ``valid_regions`` or, if none are named, a seeded random share
    ``fractions[1] / (fractions[0] + fractions[1])`` of the remaining cells.
    """
    n = len(dataset)
    rng = np.random.default_rng(seed)
    labels = np.full(n, "none", dtype=object)
    if mode == "random":
        if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise SplitConfigError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
        perm = rng.permutation(n)
        n_train = int(round(fractions[0] * n))
        n_valid = int(round(fractions[1] * n))
        labels[perm[:n_train]] = "train"
        labels[perm[n_train:n_train + n_valid]] = "valid"
        labels[perm[n_train + n_valid:]] = "test"
    elif mode == "regional":
        test_regions, valid_regions = set(test_regions), set(valid_regions)
        if not test_regions:
            raise SplitConfigError("regional split needs at least one test region")
        tags = dataset.region_tags
        known = set(tags)
        missing = (test_regions | valid_regions) - known
        if missing:
            raise SplitConfigError(f"unknown region tags {sorted(missing)}; dataset has {sorted(known)}")
        if test_regions & valid_regions:
            raise SplitConfigError("a region cannot be both test and valid")
        is_test = np.isin(tags, list(test_regions))
        labels[is_test] = "test"
        rest = np.flatnonzero(~is_test)
        if valid_regions:
            is_valid = np.isin(tags[rest], list(valid_regions))
            labels[rest[is_valid]] = "valid"
            labels[rest[~is_valid]] = "train"
        else:
            share = fractions[1] / (fractions[0] + fractions[1])
            perm = rng.permutation(rest)
            n_valid = int(round(share * len(rest)))
            labels[perm[:n_valid]] = "valid"
            labels[perm[n_valid:]] = "train"
    else:
        raise SplitConfigError(f"unknown split mode {mode!r}")
    for name in ("train", "valid", "test"):
        if not np.any(labels == name):
            raise SplitConfigError(f"split {name!r} ended up empty")
    return dataset.with_splits(labels)
