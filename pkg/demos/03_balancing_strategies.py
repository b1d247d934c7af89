"""
Loss balancing strategies
=========================

The two task losses are combined as k1 * L_height + k2 * L_semantics. This
script runs a few iterations of each strategy and prints the weights it
chose, then shows the two-task min-norm solver on hand-picked gradients.
"""

import numpy as np

from aerialmtl.balancing import min_norm_2task
from aerialmtl.config import desk_config
from aerialmtl.geodata import synth_scene
from aerialmtl.train import train

tiles = [synth_scene(s, 128) for s in range(2)]

for strategy in ("equal", "gradnorm", "mgda", "mgda-ub"):
    cfg = desk_config(balancing=strategy, iterations=30, encoder_depth=3)
    rows = train(cfg, tiles=tiles).log
    k1 = np.array([r[3] for r in rows])
    k2 = np.array([r[4] for r in rows])
    print(f"{strategy:9s} k1 {k1[0]:.3f} -> {k1[-1]:.3f}   k2 {k2[0]:.3f} -> {k2[-1]:.3f}")

# MGDA picks the point of smallest norm on the segment between the two
# task gradients; that direction decreases both losses at once
for g1, g2 in (([1, 0], [0, 1]), ([2, 0], [-1, 0]), ([1, 1], [1, 1]), ([3, 1], [1, 0])):
    gamma, n = min_norm_2task(g1, g2)
    d = gamma * np.array(g1, float) + (1 - gamma) * np.array(g2, float)
    print(f"g1={g1} g2={g2}: gamma={gamma:.4f} |d|^2={n:.4f} d={d}")
