"""
Synthetic aerial tiles
======================

Generate a scene, look at what it contains and write it to disk in the
formats the command line reads.
"""

import sys
from pathlib import Path

import numpy as np

from aerialmtl.geodata import CLASS_NAMES, read_raster, synth_scene, write_raster

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/tiles")
out.mkdir(parents=True, exist_ok=True)

# a scene is three aligned rasters: an rgb image, a height map and class labels
rgb, height, labels = synth_scene(seed=0, size=256)
print(rgb, height, labels, sep="\n")

# class frequencies and the height range each class covers
for c, name in enumerate(CLASS_NAMES):
    sel = labels.plane == c
    if sel.any():
        h = height.plane[sel]
        print(f"{name:15s} {sel.mean():6.1%}  height {h.min():5.1f} .. {h.max():5.1f}")

# PPM for the image, PFM for heights (NaN marks missing data), PGM for labels
write_raster(rgb, out / "rgb.ppm")
write_raster(height, out / "height.pfm")
write_raster(labels, out / "labels.pgm")

# reading back gives the same bytes
back = read_raster(out / "height.pfm", "height")
print("height round trip exact:", back.values.tobytes() == height.values.tobytes())

# a missing pixel survives the trip as an invalid pixel
holes = height.values.copy()
holes[10:20, 10:20] = np.nan
write_raster(type(height)(holes, "height"), out / "height_holes.pfm")
print("invalid pixels after reload:", int((~read_raster(out / "height_holes.pfm", "height").mask).sum()))
