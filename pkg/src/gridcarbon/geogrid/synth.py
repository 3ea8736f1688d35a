"""Seeded synthetic regions with known generative law, used as ground truth."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid import GridError, RegionBounds, RegionDataset, rasterize_pois, split_dataset


@dataclass
class SynthSpec:
    grid_rows: int = 12
    grid_cols: int = 12
    n_categories: int = 6
    image_size: int = 16
    poi_size: int = 16
    weights: Optional[list] = None      # per-category tonnes per POI; None -> geometric ladder
    image_weight: float = 200.0         # tonnes per unit of mean pixel intensity
    smoothing: float = 1.0              # Gaussian width in cells; 0 disables
    noise_std: float = 5.0
    seed: int = 0
    resolution_m: float = 1000.0
    density_scale: float = 0.8
    density_corr: float = 2.0
    poi_rate: float = 60.0              # mean POIs per cell at unit density
    mix_strength: float = 1.0
    image_mode: str = "density"         # "density" | "noise"
    districts: tuple = (2, 2)
    log_scale: float = 1.0
    log_shift: float = 0.0
    split_fractions: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if self.weights is None:
            self.weights = list(np.geomspace(8.0, 0.25, self.n_categories))
        self.weights = [float(w) for w in self.weights]
        self.districts = tuple(self.districts)
        self.split_fractions = tuple(self.split_fractions)

    def validate(self) -> list[str]:
        problems = []
        if self.grid_rows < 1 or self.grid_cols < 1:
            problems.append("grid_rows and grid_cols must be >= 1")
        if self.n_categories < 1:
            problems.append("n_categories must be >= 1")
        if len(self.weights) != self.n_categories:
            problems.append(f"weights has {len(self.weights)} entries, n_categories is {self.n_categories}")
        if self.image_size < 1 or self.poi_size < 1:
            problems.append("image_size and poi_size must be >= 1")
        if self.smoothing < 0 or self.noise_std < 0:
            problems.append("smoothing and noise_std must be >= 0")
        if self.resolution_m <= 0:
            problems.append("resolution_m must be positive")
        if self.poi_rate < 0:
            problems.append("poi_rate must be >= 0")
        if self.image_mode not in ("density", "noise"):
            problems.append(f"image_mode must be 'density' or 'noise', got {self.image_mode!r}")
        if len(self.districts) != 2 or min(self.districts) < 1:
            problems.append("districts must be a pair of positive ints")
        return problems

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise GridError(f"unknown SynthSpec fields: {unknown}")
        spec = cls(**raw)
        problems = spec.validate()
        if problems:
            raise GridError("invalid SynthSpec: " + "; ".join(problems))
        return spec

    def to_dict(self) -> dict:
        d = asdict(self)
        d["districts"] = list(self.districts)
        d["split_fractions"] = list(self.split_fractions)
        return d


def _smooth_field(rng, shape, corr):
    z = gaussian_filter(rng.standard_normal(shape), sigma=corr, mode="wrap")
    return (z - z.mean()) / (z.std() + 1e-12)


def linear_emission(poi_counts: np.ndarray, mean_pixel: np.ndarray, weights, image_weight) -> np.ndarray:
    """Pre-smoothing emission: weighted POI totals plus scaled image brightness."""
    return poi_counts @ np.asarray(weights, dtype=np.float64) + image_weight * mean_pixel


def smooth_emission(raw: np.ndarray, width: float) -> np.ndarray:
    if width <= 0:
        return raw.copy()
    return gaussian_filter(raw, sigma=width, mode="nearest")


def synth_region(spec: SynthSpec) -> RegionDataset:
    problems = spec.validate()
    if problems:
        raise GridError("invalid SynthSpec: " + "; ".join(problems))
    rng = np.random.default_rng(spec.seed)
    R, Cc, C = spec.grid_rows, spec.grid_cols, spec.n_categories
    res = spec.resolution_m
    bounds = RegionBounds(0.0, 0.0, Cc * res, R * res, res)

    z = _smooth_field(rng, (R, Cc), spec.density_corr)
    density = np.exp(spec.density_scale * z)
    mix_logits = np.stack([_smooth_field(rng, (R, Cc), spec.density_corr) for _ in range(C)], axis=-1)
    mix = np.exp(spec.mix_strength * mix_logits)
    mix /= mix.sum(axis=-1, keepdims=True)
    lam = spec.poi_rate * density[..., None] * mix

    n = R * Cc
    S = spec.image_size
    images = np.zeros((n, S, S, 3))
    pois = np.zeros((n, spec.poi_size, spec.poi_size, C))
    records = []
    # brightness tracks log-density, squashed into the unit interval
    brightness = 1.0 / (1.0 + np.exp(-z))
    channel_gain = np.array([1.0, 0.85, 0.7])
    for i in range(n):
        r, c = divmod(i, Cc)
        fp = bounds.footprint(r, c)
        counts = rng.poisson(lam[r, c])
        cats = np.repeat(np.arange(C), counts)
        xs = rng.uniform(fp.min_x, fp.max_x, size=len(cats))
        ys = rng.uniform(fp.min_y, fp.max_y, size=len(cats))
        cell_recs = np.column_stack([xs, ys, cats]).astype(np.float64)
        records.append(cell_recs)
        pois[i], _ = rasterize_pois(cell_recs, fp, spec.poi_size, spec.poi_size, C)
        texture = rng.random((S, S, 1))
        if spec.image_mode == "density":
            base = 0.15 + 0.7 * brightness[r, c]
            img = base * channel_gain + 0.2 * (texture - 0.5)
        else:
            img = rng.random((S, S, 3))
        images[i] = np.clip(img, 0.0, 1.0)

    poi_totals = pois.sum(axis=(1, 2))
    mean_pixel = images.mean(axis=(1, 2, 3))
    raw = linear_emission(poi_totals, mean_pixel, spec.weights, spec.image_weight).reshape(R, Cc)
    smoothed = smooth_emission(raw, spec.smoothing)
    noisy = smoothed + rng.normal(0.0, spec.noise_std, size=smoothed.shape) if spec.noise_std > 0 else smoothed
    emission = np.clip(noisy, 0.0, None).ravel()
    if spec.log_scale != 1.0 or spec.log_shift != 0.0:
        shifted = spec.log_scale * np.log1p(emission) + spec.log_shift
        emission = np.clip(np.expm1(shifted), 0.0, None)

    dr, dc = spec.districts
    rows = np.repeat(np.arange(R), Cc)
    cols = np.tile(np.arange(Cc), R)
    tags = [f"D{(r * dr // R) * dc + (c * dc // Cc)}" for r, c in zip(rows, cols)]

    ds = RegionDataset(
        bounds=bounds,
        category_names=[f"cat{k}" for k in range(C)],
        rows=rows, cols=cols, emission=emission,
        images=images, pois=pois,
        region_tags=tags, splits=["none"] * n,
        poi_records=np.concatenate(records) if records else np.zeros((0, 3)),
        truth={
            "w": list(spec.weights),
            "u": spec.image_weight,
            "noise_std": spec.noise_std,
            "seed": spec.seed,
            "smoothing": spec.smoothing,
            "log_scale": spec.log_scale,
            "log_shift": spec.log_shift,
            "raw_field": raw.tolist(),
            "pre_noise_field": smoothed.tolist(),
        },
    )
    try:
        ds = split_dataset(ds, "random", spec.split_fractions, seed=spec.seed)
    except GridError:
        # too few cells for three nonempty splits; leave unassigned
        pass
    return ds
