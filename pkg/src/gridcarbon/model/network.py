"""The emission network: modality encoders, fusion, neighborhood context, head."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .. import numcore as nc
from ..geogrid import RegionDataset, neighborhood_indices
from ..numcore import ShapeError, Tensor
from .layers import (
    ModelError, aggregate_attention, conv_stack, cross_attention, se_block,
)

KV_MODES = ("neighborhood_cells", "center_only")


@dataclass
class ModelConfig:
    n_categories: int = 6
    image_size: int = 16
    poi_size: int = 16
    embed_dim: int = 16
    neighborhood: int = 3
    temperature: float = 0.5
    se_ratio: int = 2
    image_channels: int = 8
    image_blocks: int = 2
    poi_channels: int = 8
    poi_layers: int = 2
    nbhd_layers: int = 1
    attn_dim: int = 16
    head_hidden: int = 16
    attention_kv_mode: str = "neighborhood_cells"
    value_proj: str = "learned"          # "learned" | "zero" (fixed zero, disables the context path)
    ntxent_denominator: str = "paper"    # "paper" | "standard"

    def validate(self) -> list[str]:
        p = []
        for name in ("n_categories", "image_size", "poi_size", "embed_dim", "se_ratio", "image_channels",
                     "poi_channels", "poi_layers", "attn_dim", "head_hidden"):
            if getattr(self, name) < 1:
                p.append(f"{name} must be >= 1")
        if self.image_blocks < 0 or self.nbhd_layers < 0:
            p.append("image_blocks and nbhd_layers must be >= 0")
        if self.neighborhood < 1 or self.neighborhood % 2 == 0:
            p.append(f"neighborhood must be odd and >= 1, got {self.neighborhood}")
        if not self.temperature > 0:
            p.append("temperature must be positive")
        if self.attention_kv_mode not in KV_MODES:
            p.append(f"attention_kv_mode must be one of {KV_MODES}")
        if self.value_proj not in ("learned", "zero"):
            p.append("value_proj must be 'learned' or 'zero'")
        if self.ntxent_denominator not in ("paper", "standard"):
            p.append("ntxent_denominator must be 'paper' or 'standard'")
        return p

    @property
    def se_hidden(self) -> int:
        return max(1, math.ceil(self.poi_channels / self.se_ratio))

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        unknown = sorted(set(raw) - {f.name for f in fields(cls)})
        if unknown:
            raise ModelError(f"unknown ModelConfig fields: {unknown}")
        cfg = cls(**raw)
        problems = cfg.validate()
        if problems:
            raise ModelError("invalid ModelConfig: " + "; ".join(problems))
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def check_dataset(self, ds: RegionDataset) -> None:
        if ds.n_categories != self.n_categories:
            raise ModelError(
                f"incompatible dataset: {ds.n_categories} POI categories, model expects "
                f"{self.n_categories}; category sets are not aligned"
            )
        if ds.image_size != (self.image_size, self.image_size):
            raise ModelError(f"incompatible dataset: image tiles {ds.image_size}, model expects {self.image_size}")
        if ds.poi_size != (self.poi_size, self.poi_size):
            raise ModelError(f"incompatible dataset: POI tensors {ds.poi_size}, model expects {self.poi_size}")


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every learnable tensor, in a fixed order."""
    m, ci, cp, C = cfg.embed_dim, cfg.image_channels, cfg.poi_channels, cfg.n_categories
    shapes: dict[str, tuple] = {
        "img.stem.kernel": (3, 3, 3, ci),
        "img.stem.bias": (ci,),
    }
    for k in range(cfg.image_blocks):
        for j in (1, 2):
            shapes[f"img.block{k}.conv{j}.kernel"] = (3, 3, ci, ci)
            shapes[f"img.block{k}.conv{j}.bias"] = (ci,)
    shapes["img.proj.weight"] = (m, ci)
    shapes["img.proj.bias"] = (m,)
    cin = C
    for k in range(cfg.poi_layers):
        shapes[f"poi.layer{k}.kernel"] = (3, 3, cin, cp)
        shapes[f"poi.layer{k}.bias"] = (cp,)
        shapes[f"poi.layer{k}.se.w1"] = (cfg.se_hidden, cp)
        shapes[f"poi.layer{k}.se.w2"] = (cp, cfg.se_hidden)
        cin = cp
    shapes["poi.proj.weight"] = (m, cp)
    shapes["poi.proj.bias"] = (m,)
    for level in ("grid_attn", "nbhd_attn"):
        shapes[f"{level}.W"] = (cfg.attn_dim, m)
        shapes[f"{level}.b"] = (cfg.attn_dim,)
        shapes[f"{level}.a"] = (cfg.attn_dim,)
    for mod in ("nbhd_s", "nbhd_p"):
        for k in range(cfg.nbhd_layers):
            shapes[f"{mod}.layer{k}.kernel"] = (3, 3, m, m)
            shapes[f"{mod}.layer{k}.bias"] = (m,)
    shapes["xattn.wq"] = (m, m)
    shapes["xattn.wk"] = (m, m)
    if cfg.value_proj == "learned":
        shapes["xattn.wv"] = (m, m)
    shapes["head.fc1.weight"] = (cfg.head_hidden, m)
    shapes["head.fc1.bias"] = (cfg.head_hidden,)
    shapes["head.fc2.weight"] = (1, cfg.head_hidden)
    shapes["head.fc2.bias"] = (1,)
    return shapes


def _fan_in(name: str, shape: tuple) -> int:
    if name.endswith(".kernel"):
        return shape[0] * shape[1] * shape[2]
    if name.endswith(".a"):
        return shape[0]
    return shape[-1] if len(shape) == 2 else 0


class ParameterStore:
    """Ordered name -> Tensor mapping of every learnable array."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._t = dict(tensors)

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int = 0) -> "ParameterStore":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in parameter_shapes(cfg).items():
            fan = _fan_in(name, shape)
            data = nc.he_uniform(rng, shape, fan) if fan else np.zeros(shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def tensors(self) -> dict[str, Tensor]:
        return dict(self._t)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._t.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._t) - set(arrays)
        if missing:
            raise ModelError(f"missing parameters: {sorted(missing)}")
        for k, t in self._t.items():
            if arrays[k].shape != t.shape:
                raise ShapeError(f"{k}: stored shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    def count(self) -> int:
        return int(sum(t.size for t in self._t.values()))

    def save(self, directory, cfg: ModelConfig, extra: Optional[dict] = None) -> Path:
        out = Path(directory)
        (out / "params").mkdir(parents=True, exist_ok=True)
        entries = []
        for name, t in self._t.items():
            fname = f"params/{name}.f64"
            nc.save_tensor(out / fname, t.data)
            entries.append({"name": name, "file": fname, "shape": list(t.shape)})
        manifest = {"format": "gridcarbon-checkpoint/1", "config": cfg.to_dict(), "params": entries}
        if extra:
            manifest["extra"] = extra
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        return out

    @classmethod
    def load(cls, directory) -> tuple["ParameterStore", ModelConfig, dict]:
        src = Path(directory)
        manifest = json.loads((src / "manifest.json").read_text())
        cfg = ModelConfig.from_dict(manifest["config"])
        tensors = {}
        for e in manifest["params"]:
            arr = nc.load_array(src / e["file"])
            if list(arr.shape) != list(e["shape"]):
                raise ShapeError(f"{e['name']}: file shape {arr.shape} != manifest {e['shape']}")
            tensors[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
        expected = parameter_shapes(cfg)
        if set(expected) != set(tensors):
            raise ModelError("checkpoint parameter names do not match its config")
        return cls({k: tensors[k] for k in expected}), cfg, manifest.get("extra", {})


@dataclass
class ForwardResult:
    pred: Tensor                 # (B,) log-emission
    xs: Tensor                   # (B, m) image embeddings of the target cells
    xp: Tensor                   # (B, m) POI embeddings
    xg: Tensor                   # (B, m) fused grid-level representation
    xn: Tensor                   # (B, m) neighborhood representation
    x_final: Tensor              # (B, m)
    grid_weights: np.ndarray     # (B, 2): image, POI
    nbhd_weights: np.ndarray     # (B, 2)
    cross_weights: np.ndarray    # (B, K)
    cross_mask: np.ndarray       # (B, K)


class ModelInputs:
    """Arrays of one dataset prepared for repeated forward passes."""

    def __init__(self, dataset: RegionDataset, M: int):
        self.images = dataset.images
        self.pois = dataset.pois
        self.M = M
        self.nb_idx, self.nb_mask = neighborhood_indices(dataset.index_grid(), dataset.rows, dataset.cols, M)
        self.n = len(dataset)


class CarbonNet:
    def __init__(self, config: ModelConfig, params: ParameterStore):
        problems = config.validate()
        if problems:
            raise ModelError("invalid ModelConfig: " + "; ".join(problems))
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "CarbonNet":
        return cls(config, ParameterStore.initialize(config, seed))

    # --- encoders -----------------------------------------------------------------
    def encode_image(self, images) -> Tensor:
        """``(N, H, W, 3)`` or ``(H, W, 3)`` tiles -> ``(N, m)`` or ``(m,)`` embeddings."""
        p, cfg = self.params, self.config
        x = nc.as_tensor(images)
        if x.shape[-1] != 3:
            raise ShapeError(f"image tiles need 3 channels, got {x.shape[-1]}")
        h = nc.relu(nc.conv2d(x, p["img.stem.kernel"], stride=2, padding=1) + p["img.stem.bias"])
        for k in range(cfg.image_blocks):
            r = nc.relu(nc.conv2d(h, p[f"img.block{k}.conv1.kernel"], padding=1) + p[f"img.block{k}.conv1.bias"])
            r = nc.conv2d(r, p[f"img.block{k}.conv2.kernel"], padding=1) + p[f"img.block{k}.conv2.bias"]
            h = nc.relu(h + r)
        return nc.dense(nc.global_avg_pool(h), p["img.proj.weight"], p["img.proj.bias"])

    def encode_poi(self, pois) -> Tensor:
        """``(N, H', W', C)`` counts -> ``(N, m)``; each conv layer is followed by one SE block."""
        p, cfg = self.params, self.config
        x = nc.as_tensor(pois)
        if x.shape[-1] != cfg.n_categories:
            raise ShapeError(f"POI tensors need {cfg.n_categories} categories, got {x.shape[-1]}")
        h = x
        for k in range(cfg.poi_layers):
            h = nc.conv2d(h, p[f"poi.layer{k}.kernel"], padding=1) + p[f"poi.layer{k}.bias"]
            h = se_block(h, p[f"poi.layer{k}.se.w1"], p[f"poi.layer{k}.se.w2"])
            h = nc.relu(h)
        return nc.dense(nc.global_avg_pool(h), p["poi.proj.weight"], p["poi.proj.bias"])

    def fuse(self, xs: Tensor, xp: Tensor, level: str = "grid_attn") -> tuple[Tensor, Tensor]:
        p = self.params
        return aggregate_attention(xs, xp, p[f"{level}.a"], p[f"{level}.W"], p[f"{level}.b"])

    def neighborhood_context(self, nb_s: Tensor, nb_p: Tensor) -> tuple[Tensor, Tensor]:
        """``(B, M, M, m)`` per-modality neighborhood matrices -> (weights, X_n)."""
        if nb_s.shape[-3] % 2 == 0:
            raise ModelError("neighborhood size must be odd")
        p, cfg = self.params, self.config
        pooled = []
        for mod, x in (("nbhd_s", nb_s), ("nbhd_p", nb_p)):
            layers = [(p[f"{mod}.layer{k}.kernel"], p[f"{mod}.layer{k}.bias"]) for k in range(cfg.nbhd_layers)]
            pooled.append(nc.global_avg_pool(conv_stack(x, layers)))
        return self.fuse(pooled[0], pooled[1], "nbhd_attn")

    def value_weight(self) -> Tensor:
        if self.config.value_proj == "zero":
            m = self.config.embed_dim
            return Tensor(np.zeros((m, m)))
        return self.params["xattn.wv"]

    def grid_neighborhood_attention(self, xn: Tensor, kv: Tensor, kv_mask: np.ndarray,
                                    xg: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        if self.config.attention_kv_mode == "center_only":
            kv = nc.reshape(xg, (xg.shape[0], 1, xg.shape[1]))
            kv_mask = np.ones((xg.shape[0], 1), dtype=bool)
        return cross_attention(xn, kv, kv_mask, xg, p["xattn.wq"], p["xattn.wk"], self.value_weight())

    def head(self, x: Tensor) -> Tensor:
        p = self.params
        h = nc.relu(nc.dense(x, p["head.fc1.weight"], p["head.fc1.bias"]))
        out = nc.dense(h, p["head.fc2.weight"], p["head.fc2.bias"])
        return nc.reshape(out, out.shape[:-1])

    # --- full pass ------------------------------------------------------------------
    def forward(self, inputs: ModelInputs, targets) -> ForwardResult:
        """Predict log-emission for cells ``targets`` (indices into ``inputs``)."""
        if inputs.M != self.config.neighborhood:
            raise ModelError(f"inputs prepared for M={inputs.M}, model uses M={self.config.neighborhood}")
        targets = np.asarray(targets, dtype=np.int64)
        B, M, m = len(targets), inputs.M, self.config.embed_dim
        nb_idx = inputs.nb_idx[targets]
        nb_mask = inputs.nb_mask[targets]
        needed = np.unique(np.concatenate([targets, nb_idx[nb_mask]]))
        local = np.full(inputs.n, len(needed), dtype=np.int64)   # unknown -> zero row
        local[needed] = np.arange(len(needed))
        nb_local = np.where(nb_mask, local[np.maximum(nb_idx, 0)], len(needed))
        t_local = local[targets]

        xs_all = self.encode_image(inputs.images[needed])
        xp_all = self.encode_poi(inputs.pois[needed])
        gw_all, xg_all = self.fuse(xs_all, xp_all)

        zero = Tensor(np.zeros((1, m)))
        ts = nc.concat([xs_all, zero])
        tp = nc.concat([xp_all, zero])
        tg = nc.concat([xg_all, zero])
        nb_s = nc.take(ts, nb_local)
        nb_p = nc.take(tp, nb_local)
        kv = nc.reshape(nc.take(tg, nb_local), (B, M * M, m))
        kv_mask = nb_mask.reshape(B, M * M)

        xs = nc.take(xs_all, t_local)
        xp = nc.take(xp_all, t_local)
        xg = nc.take(xg_all, t_local)
        nw, xn = self.neighborhood_context(nb_s, nb_p)
        x_final, cw = self.grid_neighborhood_attention(xn, kv, kv_mask, xg)
        pred = self.head(x_final)
        cross_mask = kv_mask if self.config.attention_kv_mode == "neighborhood_cells" else np.ones((B, 1), bool)
        return ForwardResult(
            pred=pred, xs=xs, xp=xp, xg=xg, xn=xn, x_final=x_final,
            grid_weights=gw_all.data[t_local], nbhd_weights=nw.data,
            cross_weights=cw.data, cross_mask=cross_mask,
        )

    def predict(self, inputs: ModelInputs, targets=None, batch_size: int = 256) -> np.ndarray:
        targets = np.arange(inputs.n) if targets is None else np.asarray(targets, dtype=np.int64)
        out = [self.forward(inputs, targets[i:i + batch_size]).pred.data
               for i in range(0, len(targets), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)

    def prepare(self, dataset: RegionDataset) -> ModelInputs:
        self.config.check_dataset(dataset)
        return ModelInputs(dataset, self.config.neighborhood)
