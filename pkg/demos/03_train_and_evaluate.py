"""Train the full network on a synthetic region and report held-out metrics.

Takes about a minute on one CPU core.
"""

import time

from gridcarbon.evaluate import evaluate
from gridcarbon.geogrid import SynthSpec, synth_region
from gridcarbon.model import ModelConfig
from gridcarbon.train import TrainConfig, train

ds = synth_region(SynthSpec(seed=0))
cfg = ModelConfig()
started = time.perf_counter()
result = train(ds, cfg, TrainConfig(max_epochs=200),
               on_epoch=lambda r: r.epoch % 25 == 0 and print(
                   f"epoch {r.epoch:3d}  loss {r.train_loss:.4f}  val MAE {r.val_mae:.4f}  val R2 {r.val_r2:.3f}"))
print(f"trained {len(result.history)} epochs in {time.perf_counter() - started:.0f}s, best epoch {result.history.best_epoch}")

test = evaluate(result.net, result.dataset, "test")
print(f"test (log space): MAE {test.mae:.4f}  RMSE {test.rmse:.4f}  R2 {test.r2:.4f}  Spearman {test.spearman:.4f}")
tonnes = evaluate(result.net, result.dataset, "test", space="tonnes")
print(f"test (tonnes):    MAE {tonnes.mae:.1f}  R2 {tonnes.r2:.4f}")
