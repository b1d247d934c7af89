"""Rasters, file formats, height maps, resampling, crop sampling and a
synthetic aerial-scene generator.

File formats (chosen so that round trips are bit-exact):

* height / dsm / dem -> PFM (``Pf`` one channel, ``PF`` three channels). NaN
  marks an invalid pixel. A negative scale line means little-endian.
* rgb -> binary PPM (``P6``, maxval 255). Values live in [0, 1] in memory.
* labels -> binary PGM (``P5``, maxval 255). 255 is the ignore label.
"""

import math
import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, InvalidArgument, ShapeError

KINDS = ("rgb", "height", "dsm", "dem", "labels", "logits")
FLOAT_KINDS = ("height", "dsm", "dem")
IGNORE_INDEX = 255

CLASS_NAMES = ("ground", "road", "building", "tree", "low_vegetation", "car")


@dataclass(frozen=True, eq=False)
class Raster:
    """H x W x C image plus a per-pixel validity mask (True = valid).

    Float kinds hold float32 with NaN at invalid pixels; labels hold uint8
    with ``IGNORE_INDEX`` at invalid pixels; rgb holds float32 in [0, 1];
    logits holds per-class scores (in memory only, no file format).
    """

    values: np.ndarray
    kind: str
    mask: np.ndarray = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown raster kind {self.kind!r}; expected one of {KINDS}")
        values = np.asarray(self.values)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3:
            raise ShapeError(f"raster values must be H x W or H x W x C, got shape {values.shape}")
        mask = None if self.mask is None else np.asarray(self.mask, dtype=bool)
        if mask is not None and mask.shape != values.shape[:2]:
            raise ShapeError(f"mask shape {mask.shape} does not match raster {values.shape[:2]}")

        if self.kind == "labels":
            if values.dtype != np.uint8:
                if np.any((values < 0) | (values > 255)) or np.any(values != np.round(values)):
                    raise DataError("labels must be integers in [0, 255]")
                values = values.astype(np.uint8)
            if values.shape[2] != 1:
                raise ShapeError(f"labels raster must have one channel, got {values.shape[2]}")
            valid = values[:, :, 0] != IGNORE_INDEX
            if mask is not None and not mask.all():
                values = values.copy()
                values[~mask] = IGNORE_INDEX
                valid &= mask
            mask = valid
        else:
            values = np.asarray(values, dtype=np.float32)
            if self.kind in FLOAT_KINDS:
                valid = ~np.isnan(values).any(axis=2)
                if mask is not None:
                    valid &= mask
                if not valid.all():
                    values = values.copy()
                    values[~valid] = np.nan
                mask = valid
            elif mask is None:
                mask = np.ones(values.shape[:2], dtype=bool)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    @property
    def shape(self):
        return self.values.shape

    @property
    def plane(self):
        """First channel as an H x W array."""
        return self.values[:, :, 0]

    def __repr__(self):
        return f"Raster(kind={self.kind!r}, shape={self.values.shape}, invalid={int((~self.mask).sum())})"


def label_raster(labels):
    return Raster(np.asarray(labels, dtype=np.uint8), "labels")


# --------------------------------------------------------------------------
# Netpbm / PFM parsing


class _Header:
    """Whitespace/comment aware token reader over the start of a file."""

    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def token(self, what):
        buf, n = self.buf, len(self.buf)
        while self.pos < n:
            c = buf[self.pos]
            if c in b" \t\r\n":
                self.pos += 1
            elif c == ord("#"):
                while self.pos < n and buf[self.pos] not in b"\r\n":
                    self.pos += 1
            else:
                break
        start = self.pos
        while self.pos < n and buf[self.pos] not in b" \t\r\n#":
            self.pos += 1
        if start == self.pos:
            raise FormatError(f"unexpected end of header while reading {what}", start, self.path)
        return buf[start:self.pos].decode("ascii", errors="replace"), start

    def integer(self, what):
        text, offset = self.token(what)
        if not text.isdigit() or int(text) <= 0:
            raise FormatError(f"bad {what} {text!r}", offset, self.path)
        return int(text)

    def end(self):
        # exactly one whitespace byte separates the header from the payload
        if self.pos >= len(self.buf) or self.buf[self.pos] not in b" \t\r\n":
            raise FormatError("missing whitespace after header", self.pos, self.path)
        self.pos += 1
        return self.pos


def _payload(buf, start, nbytes, path):
    if len(buf) - start < nbytes:
        raise FormatError(
            f"truncated payload: expected {nbytes} bytes, found {len(buf) - start}", len(buf), path
        )
    return buf[start:start + nbytes]


def read_pfm(path):
    buf = Path(path).read_bytes()
    hdr = _Header(buf, path)
    magic, offset = hdr.token("magic")
    if magic not in ("PF", "Pf"):
        raise FormatError(f"not a PFM file (magic {magic!r})", offset, path)
    channels = 3 if magic == "PF" else 1
    width = hdr.integer("width")
    height = hdr.integer("height")
    text, offset = hdr.token("scale")
    try:
        scale = float(text)
    except ValueError:
        raise FormatError(f"bad scale {text!r}", offset, path) from None
    if scale == 0 or not math.isfinite(scale):
        raise FormatError(f"bad scale {text!r}", offset, path)
    start = hdr.end()
    dtype = np.dtype("<f4" if scale < 0 else ">f4")
    raw = _payload(buf, start, width * height * channels * 4, path)
    data = np.frombuffer(raw, dtype=dtype).reshape(height, width, channels)
    # PFM rows run bottom to top
    return np.flipud(data).astype(np.float32)


def write_pfm(path, values):
    values = np.asarray(values, dtype=np.float32)
    if values.ndim == 2:
        values = values[:, :, None]
    h, w, c = values.shape
    if c not in (1, 3):
        raise InvalidArgument(f"PFM stores 1 or 3 channels, got {c}")
    header = f"{'Pf' if c == 1 else 'PF'}\n{w} {h}\n-1.0\n".encode("ascii")
    payload = np.ascontiguousarray(np.flipud(values), dtype="<f4").tobytes()
    _atomic_write(path, header + payload)


def _read_netpbm(path, expect):
    buf = Path(path).read_bytes()
    hdr = _Header(buf, path)
    magic, offset = hdr.token("magic")
    if magic != expect:
        raise FormatError(f"expected {expect} file, found magic {magic!r}", offset, path)
    width = hdr.integer("width")
    height = hdr.integer("height")
    maxval = hdr.integer("maxval")
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", hdr.pos, path)
    start = hdr.end()
    channels = 3 if expect == "P6" else 1
    raw = _payload(buf, start, width * height * channels, path)
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, channels).copy()


def _write_netpbm(path, magic, data):
    h, w = data.shape[:2]
    header = f"{magic}\n{w} {h}\n255\n".encode("ascii")
    _atomic_write(path, header + np.ascontiguousarray(data, dtype=np.uint8).tobytes())


def _atomic_write(path, payload):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def read_raster(path, kind):
    if kind in FLOAT_KINDS:
        return Raster(read_pfm(path), kind)
    if kind == "rgb":
        data = _read_netpbm(path, "P6")
        return Raster(data.astype(np.float32) / np.float32(255.0), "rgb")
    if kind == "labels":
        return Raster(_read_netpbm(path, "P5"), "labels")
    raise InvalidArgument(f"unknown raster kind {kind!r}; expected one of {KINDS}")


def write_raster(raster, path):
    if raster.kind in FLOAT_KINDS:
        write_pfm(path, raster.values)
    elif raster.kind == "rgb":
        if raster.channels != 3:
            raise InvalidArgument(f"rgb raster must have 3 channels, got {raster.channels}")
        quant = np.rint(np.clip(raster.values, 0.0, 1.0) * np.float32(255.0))
        _write_netpbm(path, "P6", quant.astype(np.uint8))
    elif raster.kind == "labels":
        _write_netpbm(path, "P5", raster.values)
    else:
        raise InvalidArgument(f"cannot write raster kind {raster.kind!r}")


# --------------------------------------------------------------------------
# height maps and resampling


def height_from_dsm_dem(dsm, dem, clamp_negative=True):
    """Height above ground as DSM - DEM; negatives clamp to 0 by default."""
    if dsm.kind != "dsm" or dem.kind != "dem":
        raise InvalidArgument(f"expected (dsm, dem) rasters, got ({dsm.kind}, {dem.kind})")
    if dsm.shape != dem.shape:
        raise ShapeError(f"DSM shape {dsm.shape} does not match DEM shape {dem.shape}")
    valid = dsm.mask & dem.mask
    diff = np.where(valid[:, :, None], dsm.values - np.where(valid[:, :, None], dem.values, 0), np.nan)
    if clamp_negative:
        diff = np.where(diff < 0, np.float32(0.0), diff)
    return Raster(diff.astype(np.float32), "height", valid)


def _scaled_size(n, factor):
    return max(1, int(math.floor(n * factor + 0.5)))


def _linear_taps(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    return i0, i1, t


def _nearest_taps(n_in, n_out):
    src = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64)
    return np.clip(src, 0, n_in - 1)


def resample(raster, factor, policy=None):
    """Rescale by ``factor``; bilinear for continuous kinds, nearest for labels.

    An output pixel is invalid when any input pixel with a non-zero
    interpolation weight is invalid.
    """
    factor = Fraction(factor).limit_denominator(10 ** 6) if not isinstance(factor, Fraction) else factor
    if factor <= 0:
        raise InvalidArgument(f"resample factor must be positive, got {factor}")
    if policy is None:
        policy = "nearest" if raster.kind == "labels" else "bilinear"
    if policy not in ("nearest", "bilinear"):
        raise InvalidArgument(f"unknown resampling policy {policy!r}")
    if raster.kind == "labels" and policy != "nearest":
        raise InvalidArgument("label rasters may only be resampled with the nearest policy")
    h, w = raster.height, raster.width
    ho, wo = _scaled_size(h, float(factor)), _scaled_size(w, float(factor))

    if policy == "nearest":
        rows, cols = _nearest_taps(h, ho), _nearest_taps(w, wo)
        values = raster.values[rows][:, cols]
        mask = raster.mask[rows][:, cols]
        return Raster(values, raster.kind, mask)

    r0, r1, rt = _linear_taps(h, ho)
    c0, c1, ct = _linear_taps(w, wo)
    vals = np.where(raster.mask[:, :, None], raster.values, 0).astype(np.float64)
    rt3, ct3 = rt[:, None, None], ct[None, :, None]
    rows = vals[r0] * (1.0 - rt3) + vals[r1] * rt3
    out = rows[:, c0] * (1.0 - ct3) + rows[:, c1] * ct3
    bad = (~raster.mask).astype(np.int8)
    bad_rows = bad[r0] * (rt < 1.0)[:, None] | bad[r1] * (rt > 0.0)[:, None]
    bad_out = bad_rows[:, c0] * (ct < 1.0)[None, :] | bad_rows[:, c1] * (ct > 0.0)[None, :]
    mask = bad_out == 0
    return Raster(out.astype(np.float32), raster.kind, mask)


def match_resolution(rgb, height, labels, strategy="lr"):
    """Bring the three layers of a tile to a common grid.

    ``vhr`` upsamples the maps to the image grid; ``lr`` downsamples the image
    to the map grid. Layers already on the same grid are returned unchanged.
    """
    if strategy not in ("vhr", "lr"):
        raise InvalidArgument(f"unknown resolution strategy {strategy!r}; expected vhr or lr")
    if height.shape[:2] != labels.shape[:2]:
        raise ShapeError(f"height {height.shape[:2]} and labels {labels.shape[:2]} grids differ")
    if rgb.shape[:2] == height.shape[:2]:
        return rgb, height, labels
    factor = Fraction(height.height, rgb.height)
    if strategy == "vhr":
        up = 1 / factor
        height, labels = resample(height, up), resample(labels, up)
    else:
        rgb = resample(rgb, factor)
    if rgb.shape[:2] != height.shape[:2]:
        raise ShapeError(
            f"after {strategy} resampling the image is {rgb.shape[:2]} but maps are {height.shape[:2]}"
        )
    return rgb, height, labels


# --------------------------------------------------------------------------
# crops and augmentation


@dataclass(eq=False)
class SamplePair:
    image: np.ndarray        # C x s x s float32
    height: np.ndarray       # 1 x s x s float32, NaN where invalid
    height_mask: np.ndarray  # 1 x s x s bool
    labels: np.ndarray       # s x s uint8, IGNORE_INDEX where invalid


def sample_crop(image, height, labels, size=320, rng=None):
    """Uniformly placed ``size`` x ``size`` window cut from all three layers."""
    if not (image.shape[:2] == height.shape[:2] == labels.shape[:2]):
        raise ShapeError(
            f"layers must share a grid: image {image.shape[:2]}, height {height.shape[:2]}, "
            f"labels {labels.shape[:2]}"
        )
    h, w = image.shape[:2]
    if size > h or size > w:
        raise InvalidArgument(f"crop size {size} exceeds tile {h}x{w}")
    rng = np.random.default_rng() if rng is None else rng
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    win = (slice(top, top + size), slice(left, left + size))
    return SamplePair(
        image=np.ascontiguousarray(image.values[win].transpose(2, 0, 1)),
        height=np.ascontiguousarray(height.values[win][:, :, :1].transpose(2, 0, 1)),
        height_mask=np.ascontiguousarray(height.mask[win][None]),
        labels=np.ascontiguousarray(labels.values[win][:, :, 0]),
    )


def augment(pair, rng):
    """Random horizontal flip, vertical flip and right-angle rotation.

    The same transform is applied to every layer.
    """
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    k = int(rng.integers(0, 4))

    def tf(a):
        if hflip:
            a = np.flip(a, axis=-1)
        if vflip:
            a = np.flip(a, axis=-2)
        if k:
            a = np.rot90(a, k, axes=(-2, -1))
        return np.ascontiguousarray(a)

    return SamplePair(tf(pair.image), tf(pair.height), tf(pair.height_mask), tf(pair.labels))


# --------------------------------------------------------------------------
# synthetic scenes

_COLORS = {
    0: (0.55, 0.50, 0.42),  # bare ground
    1: (0.33, 0.33, 0.35),  # road
    2: (0.70, 0.35, 0.30),  # roof
    3: (0.10, 0.40, 0.12),  # tree crown
    4: (0.45, 0.65, 0.30),  # grass
    5: (0.15, 0.30, 0.80),  # car
}


def _smooth_noise(rng, size, cell):
    coarse = rng.standard_normal((size // cell + 2, size // cell + 2))
    reps = np.kron(coarse, np.ones((cell, cell)))[:size, :size]
    # cheap separable box blur
    k = np.ones(cell) / cell
    reps = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 0, reps)
    return np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 1, reps)


def _shadow(shadow, footprint, h):
    d = int(math.ceil(h / 4.0))
    shifted = np.zeros_like(footprint)
    shifted[d:, d:] = footprint[:-d, :-d]
    shadow |= shifted & ~footprint


def synth_scene(seed, size=256, num_classes=6):
    """Deterministic aerial-like tile: ``(rgb, height, labels)`` rasters.

    Buildings are rectangles 5-30 units tall whose roofs brighten with height
    and which cast shadows proportional to height; trees are discs 2-8 units
    tall; roads, grass, cars and bare ground complete the scene.
    """
    if not 2 <= num_classes <= len(CLASS_NAMES):
        raise InvalidArgument(f"num_classes must lie in [2, {len(CLASS_NAMES)}], got {num_classes}")
    rng = np.random.default_rng(seed)
    labels = np.zeros((size, size), dtype=np.uint8)
    height = np.zeros((size, size), dtype=np.float64)
    tint = np.zeros((size, size, 3))
    shadow = np.zeros((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size]
    scale = size / 256.0

    def use(cls):
        return cls < num_classes

    if use(4):
        for _ in range(max(1, int(4 * scale ** 2))):
            cy, cx = rng.integers(0, size, 2)
            ry, rx = rng.integers(int(12 * scale) + 4, int(40 * scale) + 8, 2)
            blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            labels[blob] = 4

    road = np.zeros((size, size), dtype=bool)
    if use(1):
        for axis in range(2):
            for _ in range(int(rng.integers(1, 3))):
                pos = int(rng.integers(size // 8, size - size // 8))
                half = int(rng.integers(4, 8))
                if axis == 0:
                    road[max(0, pos - half):pos + half, :] = True
                else:
                    road[:, max(0, pos - half):pos + half] = True
        labels[road] = 1

    occupied = road.copy()
    if use(2):
        placed, tries = 0, 0
        target = max(2, int(rng.integers(6, 11) * scale ** 2))
        while placed < target and tries < 400:
            tries += 1
            bh, bw = rng.integers(int(14 * scale) + 4, int(44 * scale) + 6, 2)
            top, left = rng.integers(0, size - bh), rng.integers(0, size - bw)
            if occupied[max(0, top - 3):top + bh + 3, max(0, left - 3):left + bw + 3].any():
                continue
            fp = np.zeros((size, size), dtype=bool)
            fp[top:top + bh, left:left + bw] = True
            h = float(rng.uniform(5.0, 30.0))
            labels[fp] = 2
            height[fp] = h
            bright = 0.75 + 0.5 * (h - 5.0) / 25.0
            tint[fp] = np.array(_COLORS[2]) * bright - np.array(_COLORS[2])
            _shadow(shadow, fp, h)
            occupied |= fp
            placed += 1

    if use(5) and road.any():
        ys, xs = np.nonzero(road)
        for _ in range(max(2, int(6 * scale))):
            i = int(rng.integers(0, ys.size))
            cy, cx = int(ys[i]), int(xs[i])
            vertical = bool(rng.integers(0, 2))
            ch, cw = (6, 3) if vertical else (3, 6)
            car = np.zeros((size, size), dtype=bool)
            car[cy:cy + ch, cx:cx + cw] = True
            car &= road
            labels[car] = 5
            height[car] = 1.5
            tint[car] = rng.uniform(-0.1, 0.15, 3)

    if use(3):
        placed, tries = 0, 0
        target = max(3, int(rng.integers(12, 25) * scale ** 2))
        while placed < target and tries < 800:
            tries += 1
            r = float(rng.uniform(3.0, 8.0) * max(scale, 0.5))
            cy, cx = rng.uniform(0, size, 2)
            disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            if not disc.any() or occupied[disc].any():
                continue
            h = float(rng.uniform(2.0, 8.0))
            labels[disc] = 3
            height[disc] = h
            _shadow(shadow, disc, h)
            occupied |= disc
            placed += 1

    base = np.array([_COLORS[c] for c in range(len(CLASS_NAMES))])[labels]
    texture = 0.06 * _smooth_noise(rng, size, 8)[:, :, None]
    noise = rng.normal(0.0, 0.03, (size, size, 3))
    rgb = base + tint + texture + noise
    ground_level = height < 1.0
    rgb[shadow & ground_level] *= 0.55
    rgb = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0

    return (
        Raster(rgb.astype(np.float32), "rgb"),
        Raster(height.astype(np.float32), "height"),
        Raster(labels, "labels"),
    )


# --------------------------------------------------------------------------
# manifests


def read_manifest(path):
    """Parse ``rgb_path height_path labels_path`` lines; paths relative to the file."""
    path = Path(path)
    base = path.parent
    tiles = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"line {lineno}: expected 3 paths, found {len(parts)}", path=path)
        tiles.append(tuple(str(p if Path(p).is_absolute() else base / p) for p in parts))
    if not tiles:
        raise FormatError("manifest lists no tiles", path=path)
    return tiles


def write_manifest(path, triples):
    path = Path(path)
    lines = []
    for triple in triples:
        rel = []
        for p in triple:
            p = Path(p)
            try:
                rel.append(str(p.relative_to(path.parent)))
            except ValueError:
                rel.append(str(p))
        lines.append(" ".join(rel))
    path.write_text("\n".join(lines) + "\n")


def load_tile(triple, strategy="lr"):
    rgb_path, height_path, labels_path = triple
    return match_resolution(
        read_raster(rgb_path, "rgb"),
        read_raster(height_path, "height"),
        read_raster(labels_path, "labels"),
        strategy,
    )
