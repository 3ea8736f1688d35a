"""On-disk dataset layout.

::

    region.json          bounds, resolution, categories, region tags, tile sizes
    cells.csv            row,col,emission_t,region_tag,split
    pois.csv             x,y,category
    img_R_C.f64          per-cell image tensor (portable tensor format)
    poi_R_C.f64          per-cell POI count tensor
    truth.json           synthetic datasets only
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..numcore import load_array, save_tensor
from .grid import GridError, RegionBounds, RegionDataset


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(dataset: RegionDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    region = {
        "bounds": dataset.bounds.to_dict(),
        "resolution_m": dataset.bounds.resolution_m,
        "n_categories": dataset.n_categories,
        "category_names": list(dataset.category_names),
        "region_tags": sorted(set(str(t) for t in dataset.region_tags)),
        "image_size": list(dataset.image_size),
        "poi_size": list(dataset.poi_size),
    }
    (out / "region.json").write_text(json.dumps(region, indent=2) + "\n")
    with open(out / "cells.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "emission_t", "region_tag", "split"])
        for i in range(len(dataset)):
            w.writerow([int(dataset.rows[i]), int(dataset.cols[i]), _fmt(dataset.emission[i]),
                        dataset.region_tags[i], dataset.splits[i]])
    with open(out / "pois.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "category"])
        for x, y, c in dataset.poi_records:
            w.writerow([_fmt(x), _fmt(y), int(c)])
    for i in range(len(dataset)):
        r, c = int(dataset.rows[i]), int(dataset.cols[i])
        save_tensor(out / f"img_{r}_{c}.f64", dataset.images[i])
        save_tensor(out / f"poi_{r}_{c}.f64", dataset.pois[i])
    if dataset.truth is not None:
        (out / "truth.json").write_text(json.dumps(dataset.truth, indent=2) + "\n")
    return out


def read_dataset(path) -> RegionDataset:
    src = Path(path)
    if not (src / "region.json").exists():
        raise GridError(f"{src} has no region.json")
    region = json.loads((src / "region.json").read_text())
    bounds = RegionBounds(**region["bounds"])
    rows, cols, emis, tags, splits = [], [], [], [], []
    with open(src / "cells.csv", newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(int(rec["row"]))
            cols.append(int(rec["col"]))
            emis.append(float(rec["emission_t"]))
            tags.append(rec["region_tag"])
            splits.append(rec["split"] or "none")
    order = np.lexsort((cols, rows))
    rows = [rows[k] for k in order]
    cols = [cols[k] for k in order]
    emis = [emis[k] for k in order]
    tags = [tags[k] for k in order]
    splits = [splits[k] for k in order]
    images = np.stack([load_array(src / f"img_{r}_{c}.f64") for r, c in zip(rows, cols)])
    pois = np.stack([load_array(src / f"poi_{r}_{c}.f64") for r, c in zip(rows, cols)])
    recs = np.zeros((0, 3))
    if (src / "pois.csv").exists():
        with open(src / "pois.csv", newline="") as fh:
            data = [(float(r["x"]), float(r["y"]), float(r["category"])) for r in csv.DictReader(fh)]
        if data:
            recs = np.asarray(data)
    truth = json.loads((src / "truth.json").read_text()) if (src / "truth.json").exists() else None
    return RegionDataset(
        bounds=bounds, category_names=region["category_names"],
        rows=rows, cols=cols, emission=emis, images=images, pois=pois,
        region_tags=tags, splits=splits, poi_records=recs, truth=truth,
    )
