"""
Monte Carlo dropout
===================

Dropout stays on at prediction time; the spread of repeated height
predictions is a per-pixel uncertainty map. Object contours usually come
out brighter than flat ground.
"""

import sys
from pathlib import Path

import numpy as np

from aerialmtl.config import desk_config
from aerialmtl.geodata import synth_scene, write_raster
from aerialmtl.inference import GaussianWindow, mc_dropout_uncertainty, render_maps
from aerialmtl.train import train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/uncertainty")
out.mkdir(parents=True, exist_ok=True)
samples = int(sys.argv[2]) if len(sys.argv) > 2 else 10

model = train(desk_config(iterations=300), tiles=[synth_scene(s) for s in range(4)]).model
rgb, height, labels = synth_scene(5)

mean, std = mc_dropout_uncertainty(model, rgb, GaussianWindow(128, 64), samples, np.random.default_rng(0))
s = std.plane
elevated = height.plane > 1
edge = np.zeros_like(elevated)
edge[1:] |= elevated[1:] != elevated[:-1]
edge[:, 1:] |= elevated[:, 1:] != elevated[:, :-1]
print(f"mean std on object edges {s[edge].mean():.3f}, on ground {s[labels.plane == 0].mean():.3f}")

write_raster(std, out / "std.pfm")
write_raster(render_maps(std, legend_path=out / "std_legend.txt"), out / "std.ppm")
write_raster(render_maps(mean, vrange=(0, 30)), out / "mean_height.ppm")
print("written to", out)
