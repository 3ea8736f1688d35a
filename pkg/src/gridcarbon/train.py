"""Training loop with early stopping, resumable state, and hyperparameter grid search."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import numcore as nc
from .geogrid import RegionDataset, split_dataset
from .metrics import MetricsReport, metrics
from .model import CarbonNet, ModelConfig, ParameterStore, total_loss

log = logging.getLogger(__name__)

LR_GRID = [5e-6, 1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2]
BATCH_GRID = [32, 64, 128]
M_GRID = [3, 5, 7]
ALPHA_GRID = [1e-1, 1e-2, 1e-3]
DEFAULT_SPACE = {"learning_rate": LR_GRID, "batch_size": BATCH_GRID, "neighborhood": M_GRID, "alpha": ALPHA_GRID}


class TrainingError(RuntimeError):
    pass


class TrainingAborted(TrainingError):
    def __init__(self, epoch: int, batch: int, reason: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {reason}")
        self.epoch = epoch
        self.batch = batch


def derive_seed(seed: int, *names) -> int:
    """Stable 63-bit seed for a named subsystem."""
    key = ":".join([str(int(seed))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 25
    alpha: float = 0.01
    gate_epoch: int = 100
    seed: int = 0
    split_mode: str = "dataset"          # "dataset" keeps the split column as stored
    split_fractions: tuple = (0.6, 0.2, 0.2)
    test_regions: tuple = ()
    valid_regions: tuple = ()

    def __post_init__(self):
        self.split_fractions = tuple(self.split_fractions)
        self.test_regions = tuple(self.test_regions)
        self.valid_regions = tuple(self.valid_regions)

    def validate(self) -> list[str]:
        p = []
        if self.learning_rate < 0:
            p.append("learning_rate must be >= 0")
        if self.batch_size < 1:
            p.append("batch_size must be >= 1")
        if self.alpha > 0 and self.batch_size < 2:
            p.append("batch_size must be >= 2 when alpha > 0")
        if self.max_epochs < 1:
            p.append("max_epochs must be >= 1")
        if self.patience < 1:
            p.append("patience must be >= 1")
        if self.alpha < 0:
            p.append("alpha must be >= 0")
        if self.gate_epoch < 0:
            p.append("gate_epoch must be >= 0")
        if self.split_mode not in ("dataset", "random", "regional"):
            p.append(f"split_mode must be dataset/random/regional, got {self.split_mode!r}")
        return p

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        unknown = sorted(set(raw) - {f.name for f in fields(cls)})
        if unknown:
            raise TrainingError(f"unknown TrainConfig fields: {unknown}")
        cfg = cls(**raw)
        problems = cfg.validate()
        if problems:
            raise TrainingError("invalid TrainConfig: " + "; ".join(problems))
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("split_fractions", "test_regions", "valid_regions"):
            d[k] = list(d[k])
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    val_rmse: float
    val_r2: float
    contrastive_active: bool


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    wall_time: float = 0.0

    def __len__(self) -> int:
        return len(self.records)

    def best(self) -> EpochRecord:
        return next(r for r in self.records if r.epoch == self.best_epoch)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_mae", "val_rmse", "val_r2", "contrastive_active"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_mae), repr(r.val_rmse),
                            repr(r.val_r2), int(r.contrastive_active)])

    def to_dict(self) -> dict:
        return {"records": [asdict(r) for r in self.records], "best_epoch": self.best_epoch,
                "wall_time": self.wall_time}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls([EpochRecord(**r) for r in d["records"]], d["best_epoch"], d.get("wall_time", 0.0))


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    next_epoch: int
    params: dict
    adam: nc.AdamState
    best_params: dict
    best_val: float
    bad_epochs: int
    history: TrainHistory
    finished: bool = False

    def save(self, directory) -> None:
        out = Path(directory)
        for sub in ("params", "best", "adam_m", "adam_v"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        for k, v in self.params.items():
            nc.save_tensor(out / "params" / f"{k}.f64", v)
            nc.save_tensor(out / "best" / f"{k}.f64", self.best_params[k])
            if k in self.adam.m:
                nc.save_tensor(out / "adam_m" / f"{k}.f64", self.adam.m[k])
                nc.save_tensor(out / "adam_v" / f"{k}.f64", self.adam.v[k])
        meta = {
            "next_epoch": self.next_epoch, "best_val": self.best_val, "bad_epochs": self.bad_epochs,
            "finished": self.finished, "names": list(self.params),
            "adam": {"lr": self.adam.lr, "beta1": self.adam.beta1, "beta2": self.adam.beta2,
                     "eps": self.adam.eps, "step": self.adam.step},
            "history": self.history.to_dict(),
        }
        (out / "state.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "TrainState":
        src = Path(directory)
        meta = json.loads((src / "state.json").read_text())
        names = meta["names"]
        a = meta["adam"]
        adam = nc.AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
        for k in names:
            if (src / "adam_m" / f"{k}.f64").exists():
                adam.m[k] = nc.load_array(src / "adam_m" / f"{k}.f64")
                adam.v[k] = nc.load_array(src / "adam_v" / f"{k}.f64")
        return cls(
            next_epoch=meta["next_epoch"],
            params={k: nc.load_array(src / "params" / f"{k}.f64") for k in names},
            adam=adam,
            best_params={k: nc.load_array(src / "best" / f"{k}.f64") for k in names},
            best_val=meta["best_val"],
            bad_epochs=meta["bad_epochs"],
            history=TrainHistory.from_dict(meta["history"]),
            finished=meta["finished"],
        )


@dataclass
class TrainResult:
    net: CarbonNet               # holds the best-validation parameters
    history: TrainHistory
    state: TrainState
    dataset: RegionDataset       # with the split actually used


def apply_split(dataset: RegionDataset, cfg: TrainConfig) -> RegionDataset:
    if cfg.split_mode == "dataset":
        return dataset
    return split_dataset(dataset, cfg.split_mode, cfg.split_fractions, seed=derive_seed(cfg.seed, "split"),
                         test_regions=cfg.test_regions, valid_regions=cfg.valid_regions)


def init_network(dataset: RegionDataset, model_config: ModelConfig, cfg: TrainConfig) -> CarbonNet:
    """Fresh network; the output bias starts at the mean training target."""
    net = CarbonNet.create(model_config, seed=derive_seed(cfg.seed, "init"))
    train_idx = dataset.split_indices("train")
    if len(train_idx):
        net.params["head.fc2.bias"].data = np.array([dataset.log_target[train_idx].mean()])
    return net


def make_batches(order: np.ndarray, batch_size: int, contrastive: bool) -> list[np.ndarray]:
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if contrastive and len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def evaluate_split(net: CarbonNet, inputs, dataset: RegionDataset, split: str) -> MetricsReport:
    idx = dataset.split_indices(split)
    return metrics(dataset.log_target[idx], net.predict(inputs, idx))


def train(dataset: RegionDataset, model_config: ModelConfig, train_config: TrainConfig,
          resume: Optional[TrainState] = None, stop_after: Optional[int] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Fit the network with Adam, tracking validation MAE for early stopping.

    ``stop_after`` halts after that many epochs in this call (for checkpoint/resume);
    the returned state can be passed back as ``resume``.
    """
    problems = train_config.validate() + model_config.validate()
    if problems:
        raise TrainingError("; ".join(problems))
    cfg = train_config
    dataset = apply_split(dataset, cfg)
    train_idx = dataset.split_indices("train")
    valid_idx = dataset.split_indices("valid")
    if len(train_idx) == 0 or len(valid_idx) == 0:
        raise TrainingError("train and valid splits must be nonempty")
    if cfg.alpha > 0 and len(train_idx) < 2:
        raise TrainingError("contrastive training needs at least 2 training cells")

    net = init_network(dataset, model_config, cfg)
    inputs = net.prepare(dataset)
    y = dataset.log_target
    opt = nc.Adam(net.params.tensors(), lr=cfg.learning_rate)

    if resume is None:
        state = TrainState(0, net.params.arrays(), opt.state, net.params.arrays(), float("inf"), 0, TrainHistory())
    else:
        state = resume
        net.params.load_arrays(state.params)
        state.adam.lr = cfg.learning_rate
        opt.state = state.adam

    started = time.perf_counter()
    ran = 0
    epoch = state.next_epoch
    while epoch < cfg.max_epochs and not state.finished:
        if stop_after is not None and ran >= stop_after:
            break
        active = epoch >= cfg.gate_epoch
        rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle", epoch))
        order = rng.permutation(train_idx)
        losses = []
        for b, batch in enumerate(make_batches(order, cfg.batch_size, active and cfg.alpha > 0)):
            opt.zero_grad()
            try:
                out = net.forward(inputs, batch)
                loss = total_loss(out.pred, y[batch], out.xs, out.xp, cfg.alpha, epoch, cfg.gate_epoch,
                                  model_config.temperature, model_config.ntxent_denominator)
                nc.backward(loss)
            except nc.NonFiniteError as exc:
                raise TrainingAborted(epoch, b, str(exc)) from exc
            if not np.isfinite(loss.item()):
                raise TrainingAborted(epoch, b, "loss is not finite")
            opt.step()
            losses.append(loss.item())
        try:
            val = evaluate_split(net, inputs, dataset, "valid")
        except nc.NonFiniteError as exc:
            raise TrainingAborted(epoch, -1, f"validation: {exc}") from exc
        rec = EpochRecord(epoch, float(np.mean(losses)), val.mae, val.rmse, val.r2, active)
        state.history.records.append(rec)
        if val.mae < state.best_val:
            state.best_val = val.mae
            state.best_params = net.params.arrays()
            state.history.best_epoch = epoch
            state.bad_epochs = 0
        else:
            state.bad_epochs += 1
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %d loss %.4f val_mae %.4f", epoch, rec.train_loss, val.mae)
        epoch += 1
        ran += 1
        if state.bad_epochs >= cfg.patience:
            state.finished = True
    if epoch >= cfg.max_epochs:
        state.finished = True
    state.next_epoch = epoch
    state.params = net.params.arrays()
    state.history.wall_time += time.perf_counter() - started

    best = CarbonNet(model_config, ParameterStore.initialize(model_config, 0))
    best.params.load_arrays(state.best_params)
    return TrainResult(best, state.history, state, dataset)


# --- grid search ---------------------------------------------------------------------

MODEL_KEYS = {f.name for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def expand_space(space: dict) -> list[dict]:
    if not space:
        raise TrainingError("search space is empty")
    for key, values in space.items():
        if key not in MODEL_KEYS | TRAIN_KEYS:
            raise TrainingError(f"unknown hyperparameter {key!r}")
        if not values:
            raise TrainingError(f"no values for {key!r}")
    keys = list(space)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(space[k] for k in keys))]


def _run_trial(args):
    k, dataset, model_config, train_config, overrides = args
    mcfg = replace(model_config, **{k2: v for k2, v in overrides.items() if k2 in MODEL_KEYS})
    tcfg = replace(train_config, **{k2: v for k2, v in overrides.items() if k2 in TRAIN_KEYS and k2 not in MODEL_KEYS})
    res = train(dataset, mcfg, tcfg)
    best = res.history.best()
    return {"trial": k, **overrides, "val_mae": best.val_mae, "val_rmse": best.val_rmse,
            "val_r2": best.val_r2, "best_epoch": best.epoch, "epochs_run": len(res.history)}


def grid_search(dataset: RegionDataset, model_config: ModelConfig, train_config: TrainConfig,
                space: Optional[dict] = None, budget: Optional[int] = None,
                max_epochs: Optional[int] = None, jobs: int = 1,
                out_dir=None) -> tuple[dict, list[dict]]:
    """Sweep ``space`` in product order, optionally truncated to ``budget`` trials.

    Each trial trains from scratch with ``max_epochs`` overriding the configured
    value. Returns the winning overrides and the leaderboard sorted by validation MAE.
    """
    trials = expand_space(space if space is not None else DEFAULT_SPACE)
    if budget is not None:
        if budget < 1:
            raise TrainingError("budget must be >= 1")
        trials = trials[:budget]
    tcfg = replace(train_config, max_epochs=max_epochs) if max_epochs else train_config
    dataset = apply_split(dataset, tcfg)
    tcfg = replace(tcfg, split_mode="dataset")
    work = [(k, dataset, model_config, tcfg, t) for k, t in enumerate(trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_trial, work))
    else:
        rows = [_run_trial(w) for w in work]
    board = sorted(rows, key=lambda r: (r["val_mae"], r["trial"]))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_leaderboard(board, out / "leaderboard.csv", list(trials[0]))
    best = {k: v for k, v in board[0].items() if k in trials[0]}
    return best, board


def write_leaderboard(board: list[dict], path, keys: list[str]) -> None:
    cols = ["trial"] + keys + ["val_mae", "val_rmse", "val_r2", "best_epoch", "epochs_run"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in board:
            w.writerow([row[c] for c in cols])
