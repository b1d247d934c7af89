"""
Train, predict, evaluate
========================

A short joint training run on synthetic tiles, then whole-tile prediction
with Gaussian-blended windows and the usual scores. A few hundred
iterations take about a minute on one core; results improve steadily with
more (the acceptance tests use 2000).
"""

import sys
from pathlib import Path

from aerialmtl.config import desk_config
from aerialmtl.geodata import synth_scene, write_raster
from aerialmtl.inference import GaussianWindow, render_maps, tiled_predict
from aerialmtl.metrics import evaluate
from aerialmtl.train import read_log, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/run")
iterations = int(sys.argv[2]) if len(sys.argv) > 2 else 500

train_tiles = [synth_scene(s) for s in range(4)]
rgb, height, labels = synth_scene(4)

# the desk configuration: 4 encoder levels, 8 base channels, 64 pixel crops
cfg = desk_config(iterations=iterations, checkpoint_every=100)
print(cfg.to_text())

def show(it, row):
    if it % 100 == 0:
        print(f"iter {it:5d}  height L1 {row[1]:.3f}  semantics CE {row[2]:.3f}")

result = train(cfg, out, train_tiles, progress=show)
rows = read_log(out / "loss_log.csv")
print(f"loss log has {len(rows)} rows, checkpoint at {result.checkpoint}")

# stitch a 256 x 256 tile from 128 pixel windows every 32 pixels
pred_h, pred_l, _ = tiled_predict(result.model, rgb, GaussianWindow(128, 32))
report = evaluate(pred_h, height, pred_l, labels, num_classes=6)
for key in ("mae", "rmse", "oa", "aa", "kappa"):
    print(f"{key:6s} {report[key]:.4f}")

write_raster(render_maps(pred_h, vrange=(0, 30), legend_path=out / "height_legend.txt"), out / "height.ppm")
write_raster(render_maps(pred_l, legend_path=out / "labels_legend.txt"), out / "labels.ppm")
write_raster(render_maps(labels), out / "labels_truth.ppm")
print("renders written to", out)
