"""Whole-tile prediction from overlapping windows, MC-dropout uncertainty
and colour rendering of the resulting maps.

Windows are laid on a regular grid with stride ``s``; each prediction is
weighted by a 2-D Gaussian centred on its window so that patch borders count
little, and every pixel is normalised by the sum of the weights covering it.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .geodata import CLASS_NAMES, IGNORE_INDEX, Raster
from .model import normalize_batch


WEIGHT_BITS = 20


@dataclass
class GaussianWindow:
    size: int = 1024
    stride: int = 256
    sigma: float = None
    weights: np.ndarray = None

    def __post_init__(self):
        if self.size < 1 or self.stride < 1:
            raise InvalidArgument(f"window size and stride must be positive ({self.size}, {self.stride})")
        if self.stride > self.size:
            raise InvalidArgument(f"stride {self.stride} exceeds window size {self.size}")
        if self.sigma is None:
            self.sigma = self.size / 4.0
        if self.weights is None:
            centre = (self.size - 1) / 2.0
            g = np.exp(-((np.arange(self.size) - centre) ** 2) / (2.0 * self.sigma ** 2))
            self.weights = np.outer(g, g)
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (self.size, self.size):
                raise InvalidArgument(f"weights must be {self.size}x{self.size}")
        if not (self.weights > 0).all():
            raise InvalidArgument("window weights must be strictly positive")
        peak = self.weights.max()
        # Peak-normalised weights on a 2**-WEIGHT_BITS grid: any rescaling of the
        # window maps to the same grid, and weight * float32 products and their
        # sums stay exact in float64, so a constant prediction blends to itself.
        q = np.rint(self.weights / peak * 2.0 ** WEIGHT_BITS)
        self.blend_weights = np.maximum(q, 1.0) / 2.0 ** WEIGHT_BITS

    @classmethod
    def uniform(cls, size, stride):
        return cls(size, stride, weights=np.ones((size, size)))

    def scaled(self, factor):
        return GaussianWindow(self.size, self.stride, self.sigma, self.weights * factor)


def _layout(n, win):
    """Padding and window origins along one axis of length ``n``."""
    w, s = win.size, win.stride
    before = (w - s) // 2
    covered = max(0, n + before - w)
    padded = w + -(-covered // s) * s
    after = padded - n - before
    if before > n - 1 or after > n - 1:
        raise InvalidArgument(
            f"tile side {n} is too small for window {w} with stride {s}: reflection padding "
            f"of ({before}, {after}) pixels exceeds the tile"
        )
    return before, after, list(range(0, padded - w + 1, s))


def tiled_blend(predict, image, win, batch_size=4):
    """Blend ``predict`` over windows of an H x W x C array.

    ``predict`` maps an N x C x w x w float32 batch to an N x K x w x w array.
    Returns the H x W x K blended output (float64) and the per-pixel weight sum.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    top, bottom, rows = _layout(h, win)
    left, right, cols = _layout(w, win)
    padded = np.pad(image, ((top, bottom), (left, right), (0, 0)), mode="reflect")
    size = win.size
    weights = win.blend_weights
    origins = [(r, c) for r in rows for c in cols]
    acc = None
    wsum = np.zeros(padded.shape[:2], dtype=np.float64)
    # fixed patch order keeps the accumulation deterministic
    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        batch = np.stack([padded[r:r + size, c:c + size].transpose(2, 0, 1) for r, c in chunk])
        out = np.asarray(predict(batch.astype(np.float32)), dtype=np.float64)
        if acc is None:
            acc = np.zeros(padded.shape[:2] + (out.shape[1],), dtype=np.float64)
        for (r, c), pred in zip(chunk, out):
            acc[r:r + size, c:c + size] += pred.transpose(1, 2, 0) * weights[:, :, None]
            wsum[r:r + size, c:c + size] += weights
    acc = acc[top:top + h, left:left + w]
    wsum = wsum[top:top + h, left:left + w]
    return acc / wsum[:, :, None], wsum


def weight_partition_sum(shape, win):
    """Sum over windows of each window's normalised contribution (ideally 1)."""
    h, w = shape
    top, bottom, rows = _layout(h, win)
    left, right, cols = _layout(w, win)
    size = win.size
    ph, pw = h + top + bottom, w + left + right
    wsum = np.zeros((ph, pw))
    for r in rows:
        for c in cols:
            wsum[r:r + size, c:c + size] += win.blend_weights
    total = np.zeros((ph, pw))
    for r in rows:
        for c in cols:
            total[r:r + size, c:c + size] += win.blend_weights / wsum[r:r + size, c:c + size]
    return total[top:top + h, left:left + w]


def _model_predictor(model, mode, rng):
    def predict(batch):
        height, logits, _ = model.forward(normalize_batch(batch), mode, rng)
        return np.concatenate([height.data, logits.data], axis=1)

    return predict


def tiled_predict(model, rgb, win, mode="eval", rng=None, batch_size=4):
    """Stitched ``(height, labels, logits)`` rasters for a whole tile."""
    if win.size % model.cfg.multiple:
        raise InvalidArgument(
            f"window size {win.size} must be a multiple of {model.cfg.multiple} for this model"
        )
    values = rgb.values if isinstance(rgb, Raster) else np.asarray(rgb)
    blended, _ = tiled_blend(_model_predictor(model, mode, rng), values, win, batch_size)
    height = blended[:, :, :1].astype(np.float32)
    logits = blended[:, :, 1:].astype(np.float32)
    labels = np.argmax(logits, axis=2).astype(np.uint8)
    mask = rgb.mask if isinstance(rgb, Raster) else None
    return (
        Raster(height, "height", mask),
        Raster(labels, "labels", mask),
        Raster(logits, "logits", mask),
    )


def mc_dropout_uncertainty(model, rgb, win, samples=30, rng=None, batch_size=4):
    """Mean height and per-pixel population std over ``samples`` dropout passes."""
    if samples < 1:
        raise InvalidArgument(f"need at least one sample, got {samples}")
    rng = np.random.default_rng() if rng is None else rng
    draws = []
    for _ in range(samples):
        height, _, _ = tiled_predict(model, rgb, win, "mc_dropout", rng, batch_size)
        draws.append(np.nan_to_num(height.plane.astype(np.float64)))
    stack = np.stack(draws)
    # float64 keeps the mean of identical draws exact, so their std is exactly 0
    mean = stack.mean(axis=0)
    std = np.sqrt(((stack - mean) ** 2).mean(axis=0))
    mask = rgb.mask if isinstance(rgb, Raster) else None
    return Raster(mean.astype(np.float32), "height", mask), Raster(std.astype(np.float32), "height", mask)


# --------------------------------------------------------------------------
# rendering

DEFAULT_PALETTE = np.array(
    [
        (0.60, 0.60, 0.60),  # ground
        (0.20, 0.20, 0.20),  # road
        (0.85, 0.20, 0.15),  # building
        (0.05, 0.45, 0.10),  # tree
        (0.55, 0.85, 0.35),  # low vegetation
        (0.95, 0.85, 0.10),  # car
    ]
)

# perceptually ordered ramp, dark purple -> yellow
RAMP = np.array(
    [
        (0.267, 0.005, 0.329),
        (0.230, 0.322, 0.546),
        (0.128, 0.567, 0.551),
        (0.369, 0.789, 0.383),
        (0.993, 0.906, 0.144),
    ]
)


def render_labels(labels, palette=None, legend_path=None, names=None):
    palette = DEFAULT_PALETTE if palette is None else np.asarray(palette, dtype=np.float64)
    plane = labels.plane
    present = plane[plane != IGNORE_INDEX]
    needed = int(present.max()) + 1 if present.size else 0
    if len(palette) < needed:
        raise InvalidArgument(f"palette has {len(palette)} colours but labels use {needed} classes")
    out = np.zeros(plane.shape + (3,), dtype=np.float64)
    valid = plane != IGNORE_INDEX
    out[valid] = palette[plane[valid]]
    if legend_path is not None:
        names = names or [CLASS_NAMES[i] if i < len(CLASS_NAMES) else f"class_{i}" for i in range(len(palette))]
        lines = [f"{i} {names[i]} " + " ".join(str(int(round(v * 255))) for v in palette[i])
                 for i in range(len(palette))]
        Path(legend_path).write_text("\n".join(lines) + "\n")
    return Raster(_quantize(out), "rgb")


def render_scalar(raster, vmin=None, vmax=None, legend_path=None):
    """Colour-map a single-channel raster; min-max scaled unless a range is given."""
    plane = raster.plane.astype(np.float64)
    valid = raster.mask & np.isfinite(plane)
    if vmin is None or vmax is None:
        lo = float(plane[valid].min()) if valid.any() else 0.0
        hi = float(plane[valid].max()) if valid.any() else 0.0
        vmin = lo if vmin is None else vmin
        vmax = hi if vmax is None else vmax
    span = vmax - vmin
    t = np.zeros_like(plane) if span <= 0 else np.clip((np.where(valid, plane, vmin) - vmin) / span, 0, 1)
    pos = t * (len(RAMP) - 1)
    i0 = np.minimum(np.floor(pos).astype(int), len(RAMP) - 2)
    frac = (pos - i0)[:, :, None]
    out = RAMP[i0] * (1 - frac) + RAMP[i0 + 1] * frac
    out[~valid] = 0.0
    if legend_path is not None:
        Path(legend_path).write_text(f"vmin {vmin!r}\nvmax {vmax!r}\n")
    return Raster(_quantize(out), "rgb")


def render_maps(raster, palette=None, vrange=None, legend_path=None):
    if raster.kind == "labels":
        return render_labels(raster, palette, legend_path)
    vmin, vmax = vrange if vrange is not None else (None, None)
    return render_scalar(raster, vmin, vmax, legend_path)


def _quantize(rgb):
    return (np.rint(np.clip(rgb, 0, 1) * 255.0) / 255.0).astype(np.float32)
