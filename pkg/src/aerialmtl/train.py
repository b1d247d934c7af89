"""Iteration-based training loop and whole-tile evaluation."""

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .balancing import Balancer
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import DegenerateLossError, EmptyEvaluation, TrainingDiverged
from .geodata import augment, load_tile, read_manifest, sample_crop
from .inference import GaussianWindow, tiled_predict
from .metrics import ConfusionMatrix, aa, kappa, oa
from .model import build_model, normalize_batch
from .tensor import AdamState, adam_step, grad, l1_loss, softmax_cross_entropy

logger = logging.getLogger(__name__)

LOG_HEADER = ("iter", "loss_height", "loss_sem", "k1", "k2", "gamma")
MAX_RESAMPLE = 20


@dataclass
class TrainResult:
    model: object
    config: RunConfig
    log: list = field(default_factory=list)
    checkpoint: Path = None


def _stream(seed, tag):
    return np.random.default_rng([seed, tag])


def _sample_batch(tiles, cfg, rng):
    images, heights, masks, labels = [], [], [], []
    for _ in range(cfg.batch_size):
        rgb, height, lab = tiles[int(rng.integers(0, len(tiles)))]
        pair = augment(sample_crop(rgb, height, lab, cfg.crop_size, rng), rng)
        images.append(pair.image)
        heights.append(np.nan_to_num(pair.height))
        masks.append(pair.height_mask)
        labels.append(pair.labels)
    return np.stack(images), np.stack(heights), np.stack(masks).astype(np.float32), np.stack(labels)


def _losses(model, cfg, tiles, data_rng, drop_rng):
    """Forward a fresh batch; resample when a needed loss has no valid pixel."""
    for _ in range(MAX_RESAMPLE):
        images, heights, masks, labels = _sample_batch(tiles, cfg, data_rng)
        height, logits, last_shared = model.forward(normalize_batch(images), "train", drop_rng)
        try:
            loss_h = l1_loss(height, heights, masks) if cfg.tasks != "semantics" else None
            loss_s = softmax_cross_entropy(logits, labels) if cfg.tasks != "height" else None
        except DegenerateLossError as exc:
            logger.info("skipping batch: %s", exc)
            continue
        return loss_h, loss_s, last_shared
    raise DegenerateLossError(f"{MAX_RESAMPLE} consecutive batches had no usable pixels")


def write_log(path, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_HEADER)
    for row in rows:
        writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)


def read_log(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != LOG_HEADER:
            raise ValueError(f"unexpected log header {header}")
        return [(int(r[0]),) + tuple(float(v) for v in r[1:]) for r in reader]


def train(cfg, out_dir=None, tiles=None, progress=None):
    """Train a model; checkpoint and loss log go to ``out_dir`` when given.

    ``tiles`` is a list of ``(rgb, height, labels)`` rasters on a common grid;
    when omitted the manifest named in ``cfg`` is loaded.
    """
    cfg.validate()
    if tiles is None:
        tiles = [load_tile(t, cfg.resolution) for t in read_manifest(cfg.manifest)]
    model = build_model(cfg.model_config())
    params = model.parameters()
    state = AdamState(lr=cfg.lr)
    balancer = Balancer(cfg.balancing, cfg.gradnorm_alpha, cfg.gradnorm_lr)
    data_rng, drop_rng = _stream(cfg.seed, 1), _stream(cfg.seed, 2)
    config_text = cfg.to_text()

    ckpt = log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt, log_path = out_dir / "checkpoint.mtl", out_dir / "loss_log.csv"

    rows = []
    for it in range(1, cfg.iterations + 1):
        loss_h, loss_s, last_shared = _losses(model, cfg, tiles, data_rng, drop_rng)
        gamma = math.nan
        if cfg.tasks == "both":
            weights, grads = balancer.gradients(model, [loss_h, loss_s], last_shared)
            k1, k2 = weights.k
            if weights.gamma is not None:
                gamma = weights.gamma
        elif cfg.tasks == "height":
            k1, k2 = 1.0, 0.0
            grads = grad(loss_h, params)
        else:
            k1, k2 = 0.0, 1.0
            grads = grad(loss_s, params)
        lh = loss_h.item() if loss_h is not None else math.nan
        ls = loss_s.item() if loss_s is not None else math.nan
        if not all(math.isfinite(v) for v, l in ((lh, loss_h), (ls, loss_s)) if l is not None):
            raise TrainingDiverged(f"iteration {it}: non-finite loss (height={lh}, semantics={ls})")
        try:
            adam_step(params, grads, state)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}; last checkpoint kept") from None
        rows.append((it, lh, ls, k1, k2, gamma))
        if progress is not None:
            progress(it, rows[-1])
        if ckpt is not None and (it % cfg.checkpoint_every == 0 or it == cfg.iterations):
            save_checkpoint(ckpt, model, config_text)
            write_log(log_path, rows)
    return TrainResult(model, cfg, rows, ckpt)


def load_model(path):
    """Rebuild a model and its run config from a checkpoint file."""
    config_text, arrays = load_checkpoint(path)
    cfg = RunConfig.from_text(config_text)
    model = build_model(cfg.model_config())
    model.load_state_dict(arrays)
    return model, cfg


def window_from_config(cfg, window=None, stride=None, sigma=None):
    size = cfg.window if window is None else window
    step = cfg.stride if stride is None else stride
    sig = cfg.sigma if sigma is None else sigma
    return GaussianWindow(size, step, sig if sig > 0 else None)


def evaluate_model(model, tiles, win, num_classes=None):
    """Pooled height errors and OA/AA/kappa over whole tiles."""
    num_classes = num_classes or model.cfg.num_classes
    cm = ConfusionMatrix(num_classes)
    diffs = []
    for rgb, height, labels in tiles:
        pred_h, pred_l, _ = tiled_predict(model, rgb, win)
        valid = pred_h.mask & height.mask
        diffs.append(pred_h.plane[valid].astype(np.float64) - height.plane[valid])
        cm.accumulate(pred_l, labels)
    d = np.concatenate(diffs)
    if d.size == 0:
        raise EmptyEvaluation("no pixel has both a predicted and a reference height")
    mse = float((d * d).mean())
    return dict(mae=float(np.abs(d).mean()), mse=mse, rmse=math.sqrt(mse), oa=oa(cm), aa=aa(cm), kappa=kappa(cm))
