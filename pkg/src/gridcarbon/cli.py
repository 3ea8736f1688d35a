"""Command-line entry point.

Every command writes ``resolved_config.json`` into its output directory and never
modifies its input dataset.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional


from .evaluate import evaluate, export_attention, resolution_sweep, transfer_eval
from .geogrid import GridError, RegionDataset, SynthSpec, read_dataset, synth_region, write_dataset
from .metrics import CalibrationError
from .model import CarbonNet, ModelConfig, ModelError, ParameterStore
from .train import TrainConfig, TrainingAborted, TrainingError, TrainState, grid_search, train

log = logging.getLogger("gridcarbon")

EXIT_CONFIG = 2
EXIT_ABORT = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str
    output_dir: str
    model: ModelConfig
    train: TrainConfig
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "output_dir": self.output_dir, "model": self.model.to_dict(),
                "train": self.train.to_dict(), **({"options": self.options} if self.options else {})}


RUN_KEYS = {"dataset", "output_dir", "model", "train", "options"}


def load_run_config(path, dataset: Optional[RegionDataset] = None) -> tuple[RunConfig, RegionDataset]:
    """Parse a run config; tile sizes and category count default to the dataset's."""
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(raw) - RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    for key in ("dataset", "output_dir"):
        if key not in raw:
            raise ConfigError(f"config needs {key!r}")
    base = Path(path).parent
    ds_path = str((base / raw["dataset"]).resolve()) if not Path(raw["dataset"]).is_absolute() else raw["dataset"]
    out_path = str((base / raw["output_dir"]).resolve()) if not Path(raw["output_dir"]).is_absolute() else raw["output_dir"]
    if dataset is None:
        dataset = read_dataset(ds_path)
    model_raw = dict(raw.get("model", {}))
    model_raw.setdefault("n_categories", dataset.n_categories)
    model_raw.setdefault("image_size", dataset.image_size[0])
    model_raw.setdefault("poi_size", dataset.poi_size[0])
    try:
        model = ModelConfig.from_dict(model_raw)
        tcfg = TrainConfig.from_dict(raw.get("train", {}))
    except (ModelError, TrainingError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    model.check_dataset(dataset)
    return RunConfig(ds_path, out_path, model, tcfg, raw.get("options", {})), dataset


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _write_splits(dataset: RegionDataset, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "split"])
        for r, c, s in zip(dataset.rows, dataset.cols, dataset.splits):
            w.writerow([int(r), int(c), s])


def _read_splits(path: Path, dataset: RegionDataset) -> Optional[RegionDataset]:
    with open(path, newline="") as fh:
        recs = list(csv.DictReader(fh))
    if [(int(r["row"]), int(r["col"])) for r in recs] != list(zip(dataset.rows.tolist(), dataset.cols.tolist())):
        return None
    return dataset.with_splits([r["split"] for r in recs])


def load_checkpoint(path) -> CarbonNet:
    params, cfg, _ = ParameterStore.load(path)
    return CarbonNet(cfg, params)


# --- commands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    raw = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = SynthSpec.from_dict(raw)
    ds = synth_region(spec)
    out = write_dataset(ds, args.out)
    _write_json(out / "resolved_config.json", {"command": "synth", "spec": spec.to_dict()})
    print(f"wrote {len(ds)} cells to {out}")
    return 0


def _save_run(result, run: RunConfig, out: Path) -> dict:
    result.net.params.save(out / "checkpoint", run.model, extra={"best_epoch": result.history.best_epoch})
    _write_splits(result.dataset, out / "checkpoint" / "splits.csv")
    result.state.save(out / "state")
    result.history.write_csv(out / "history.csv")
    report = evaluate(result.net, result.dataset, "test")
    _write_json(out / "metrics.json", report.to_dict())
    return report.to_dict()


def cmd_train(args) -> int:
    run, dataset = load_run_config(args.config)
    out = Path(args.out or run.output_dir)
    resolved = {"command": "train", **run.to_dict(), "output_dir": str(out)}
    if args.dry_run:
        print(json.dumps(resolved, indent=2))
        return 0
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", resolved)
    resume = None
    if args.checkpoint:
        state_dir = Path(args.checkpoint)
        if (state_dir / "state").is_dir():
            state_dir = state_dir / "state"
        resume = TrainState.load(state_dir)
    result = train(dataset, run.model, run.train, resume=resume, stop_after=args.stop_after)
    report = _save_run(result, run, out)
    print(json.dumps({"best_epoch": result.history.best_epoch, "epochs": len(result.history),
                      "test": report}, indent=2))
    return 0


def cmd_gridsearch(args) -> int:
    run, dataset = load_run_config(args.config)
    out = Path(args.out or run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    space = json.loads(Path(args.space).read_text()) if args.space else None
    _write_json(out / "resolved_config.json", {"command": "gridsearch", **run.to_dict(), "space": space,
                                               "budget": args.budget, "max_epochs": args.max_epochs,
                                               "output_dir": str(out)})
    best, board = grid_search(dataset, run.model, run.train, space=space, budget=args.budget,
                              max_epochs=args.max_epochs, jobs=args.jobs, out_dir=out)
    _write_json(out / "best_config.json", best)
    print(json.dumps({"best": best, "trials": len(board)}, indent=2))
    return 0


def cmd_eval(args) -> int:
    net = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.dataset)
    splits_file = Path(args.checkpoint) / "splits.csv"
    if splits_file.exists() and not args.dataset_split:
        with_splits = _read_splits(splits_file, dataset)
        if with_splits is not None:
            dataset = with_splits
    split = None if args.split == "all" else args.split
    report = evaluate(net, dataset, split, space=args.space)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", {"command": "eval", "checkpoint": str(args.checkpoint),
                                               "dataset": str(args.dataset), "split": args.split,
                                               "space": args.space})
    _write_json(out / "metrics.json", report.to_dict())
    print(report.to_json())
    return 0


def cmd_transfer(args) -> int:
    net = load_checkpoint(args.checkpoint)
    target = read_dataset(args.target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", {"command": "transfer", "checkpoint": str(args.checkpoint),
                                               "target": str(args.target), "calibrate": args.calibrate,
                                               "source_tag": args.source_tag})
    report = transfer_eval(net, args.source_tag, target, use_calibration=args.calibrate, out_dir=out)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_sweep(args) -> int:
    run, dataset = load_run_config(args.config)
    factors = [int(f) for f in args.factors.split(",") if f.strip()]
    out = Path(args.out or run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", {"command": "sweep", **run.to_dict(), "factors": factors,
                                               "output_dir": str(out)})
    conditions = resolution_sweep(dataset, factors, run.model, run.train, out_dir=out)
    for c in conditions:
        print(f"factor {c.factor}: {c.n_cells} cells, test R2 {c.report.r2:.4f}")
    return 0


def cmd_export_attention(args) -> int:
    net = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.dataset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = export_attention(net, dataset, out)
    _write_json(out.parent / "resolved_config.json", {"command": "export-attention",
                                                      "checkpoint": str(args.checkpoint),
                                                      "dataset": str(args.dataset), "out": str(out)})
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridcarbon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic region dataset")
    p.add_argument("--spec", help="JSON file with SynthSpec fields (defaults otherwise)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override output_dir")
    p.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
    p.add_argument("--checkpoint", help="resume from a previous run directory or its state/ folder")
    p.add_argument("--stop-after", type=int, help="stop after this many epochs (resumable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gridsearch", help="hyperparameter grid search")
    p.add_argument("--config", required=True)
    p.add_argument("--space", help="JSON object: hyperparameter -> list of values")
    p.add_argument("--budget", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test", "all"])
    p.add_argument("--space", default="log", choices=["log", "tonnes"])
    p.add_argument("--dataset-split", action="store_true",
                   help="use the dataset's stored split instead of the checkpoint's splits.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="evaluate a checkpoint on another region")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--source-tag", default="source")
    p.add_argument("--calibrate", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("sweep", help="retrain and evaluate at coarser resolutions")
    p.add_argument("--config", required=True)
    p.add_argument("--factors", default="1,2,3")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-attention", help="per-cell modality attention weights as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ConfigError, GridError, ModelError, TrainingError, CalibrationError,
            FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
