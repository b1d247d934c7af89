"""Shared-trunk encoder-decoder with a height head and a semantics head.

The encoder and the first ``shared_decoder_blocks`` decoder stages are common
to both tasks (hard parameter sharing). The remaining decoder stages are
duplicated per task and each copy ends in a 1x1 convolution producing one
height channel or ``num_classes`` logits.
"""

from collections import OrderedDict
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, InvalidArgument, ShapeError
from .tensor import (
    Tensor,
    concat_channels,
    conv2d,
    dropout,
    leaky_relu,
    max_pool2,
    upconv2d,
)

TASKS = ("height", "semantics")
MODES = ("train", "eval", "mc_dropout")
SLOPE = 0.2


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 6
    encoder_depth: int = 4
    base_channels: int = 16
    skip_connections: bool = True
    shared_decoder_blocks: int = 1
    dropout_p: float = 0.2
    seed: int = 0

    def validate(self):
        problems = []
        if self.in_channels < 1:
            problems.append(f"in_channels must be >= 1 (got {self.in_channels})")
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2 (got {self.num_classes})")
        if self.encoder_depth < 1:
            problems.append(f"encoder_depth must be >= 1 (got {self.encoder_depth})")
        if self.base_channels < 1:
            problems.append(f"base_channels must be >= 1 (got {self.base_channels})")
        if not 0 <= self.shared_decoder_blocks <= self.encoder_depth:
            problems.append(
                f"shared_decoder_blocks must lie in [0, encoder_depth={self.encoder_depth}] "
                f"(got {self.shared_decoder_blocks})"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            problems.append(f"dropout_p must lie in [0, 1) (got {self.dropout_p})")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return self

    @property
    def multiple(self):
        """Input height and width must be divisible by this."""
        return 2 ** self.encoder_depth

    def channels(self, level):
        # width doubles per level, capped at 8x base to keep desk-scale models small
        return self.base_channels * 2 ** min(level, 3)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


class MtlModel:
    def __init__(self, cfg):
        self.cfg = cfg
        self.params = OrderedDict()
        self.partition = {}

    def _add(self, name, shape, part, rng, fan_in=None):
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name}")
        if len(shape) == 1:
            data = np.zeros(shape, dtype=np.float32)
        else:
            gain = np.sqrt(2.0 / (1.0 + SLOPE ** 2))
            std = gain / np.sqrt(fan_in)
            data = rng.standard_normal(shape, dtype=np.float32) * np.float32(std)
        self.params[name] = Tensor(data, requires_grad=True, name=name)
        self.partition[name] = part

    def _conv(self, name, cin, cout, k, part, rng):
        self._add(f"{name}.weight", (cout, cin, k, k), part, rng, fan_in=cin * k * k)
        self._add(f"{name}.bias", (cout,), part, rng)

    # -- parameter access ---------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def shared_parameters(self):
        return [p for n, p in self.params.items() if self.partition[n] == "shared"]

    def task_parameters(self, task):
        if task not in TASKS:
            raise InvalidArgument(f"unknown task {task!r}; expected one of {TASKS}")
        return [p for n, p in self.params.items() if self.partition[n] == task]

    @property
    def last_shared_weight(self):
        """Weight of the final convolution before the task split."""
        s = self.cfg.shared_decoder_blocks
        name = f"dec{s - 1}.conv.weight" if s > 0 else "bottleneck.conv2.weight"
        return self.params[name]

    def num_parameters(self, part=None):
        return sum(
            p.size for n, p in self.params.items() if part is None or self.partition[n] == part
        )

    def state_dict(self):
        return OrderedDict((n, p.data.copy()) for n, p in self.params.items())

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(
                f"state does not match model: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.copy()

    # -- forward ------------------------------------------------------------

    def _conv_apply(self, name, x, padding=1):
        return conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], padding=padding)

    def _block(self, name, x):
        x = leaky_relu(self._conv_apply(f"{name}.conv1", x), SLOPE)
        return leaky_relu(self._conv_apply(f"{name}.conv2", x), SLOPE)

    def _decoder_stage(self, prefix, j, x, skips):
        cfg = self.cfg
        level = cfg.encoder_depth - 1 - j
        up = upconv2d(x, self.params[f"{prefix}dec{j}.up.weight"], self.params[f"{prefix}dec{j}.up.bias"])
        x = leaky_relu(up, SLOPE)
        if cfg.skip_connections:
            x = concat_channels(x, skips[level])
        return leaky_relu(self._conv_apply(f"{prefix}dec{j}.conv", x), SLOPE)

    def forward(self, image, mode="eval", rng=None):
        """Return ``(height, logits, last_shared)`` at the input resolution."""
        cfg = self.cfg
        if mode not in MODES:
            raise InvalidArgument(f"unknown mode {mode!r}; expected one of {MODES}")
        if not isinstance(image, Tensor):
            image = Tensor(image)
        if image.ndim != 4 or image.shape[1] != cfg.in_channels:
            raise ShapeError(
                f"expected input N x {cfg.in_channels} x H x W, got shape {image.shape}"
            )
        h, w = image.shape[2:]
        if h % cfg.multiple or w % cfg.multiple:
            raise ShapeError(
                f"input size {h}x{w} must be a multiple of {cfg.multiple} "
                f"(2**encoder_depth with encoder_depth={cfg.encoder_depth})"
            )
        active = mode != "eval"
        p = cfg.dropout_p
        depth = cfg.encoder_depth

        skips = []
        x = image
        for i in range(depth):
            x = self._block(f"enc{i}", x)
            if i == depth - 1:
                x = dropout(x, p, active, rng)
            skips.append(x)
            x = max_pool2(x)
        x = dropout(self._block("bottleneck", x), p, active, rng)

        for j in range(cfg.shared_decoder_blocks):
            x = self._decoder_stage("", j, x, skips)
            if j == 0:
                x = dropout(x, p, active, rng)
        last_shared = x

        outputs = []
        for task in TASKS:
            y = last_shared
            for j in range(cfg.shared_decoder_blocks, depth):
                y = self._decoder_stage(f"{task}.", j, y, skips)
            outputs.append(self._conv_apply(f"{task}.head", y, padding=0))
        height, logits = outputs
        return height, logits, last_shared

    __call__ = forward


def build_model(cfg, rng=None):
    """Create a model with He-style fan-in initialisation drawn from ``cfg.seed``."""
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    model = MtlModel(cfg)
    depth = cfg.encoder_depth
    cin = cfg.in_channels
    for i in range(depth):
        c = cfg.channels(i)
        model._conv(f"enc{i}.conv1", cin, c, 3, "shared", rng)
        model._conv(f"enc{i}.conv2", c, c, 3, "shared", rng)
        cin = c
    c = cfg.channels(depth)
    model._conv("bottleneck.conv1", cin, c, 3, "shared", rng)
    model._conv("bottleneck.conv2", c, c, 3, "shared", rng)

    def stage(prefix, j, part):
        level = depth - 1 - j
        cout = cfg.channels(level)
        model._conv(f"{prefix}dec{j}.up", cfg.channels(level + 1), cout, 3, part, rng)
        width = 2 * cout if cfg.skip_connections else cout
        model._conv(f"{prefix}dec{j}.conv", width, cout, 3, part, rng)

    for j in range(cfg.shared_decoder_blocks):
        stage("", j, "shared")
    for task, outputs in zip(TASKS, (1, cfg.num_classes)):
        for j in range(cfg.shared_decoder_blocks, depth):
            stage(f"{task}.", j, task)
        model._conv(f"{task}.head", cfg.channels(0), outputs, 1, task, rng)
    return model


def forward(model, image, mode="eval", rng=None):
    return model.forward(image, mode, rng)


def shared_parameters(model):
    return model.shared_parameters()


def task_parameters(model, task):
    return model.task_parameters(task)


def normalize_batch(batch):
    """Map [0, 1] image values to the [-1, 1] range the network sees."""
    return (np.asarray(batch, dtype=np.float32) - np.float32(0.5)) * np.float32(2.0)


def image_to_input(rgb):
    """H x W x C raster values in [0, 1] -> 1 x C x H x W network input."""
    return normalize_batch(np.asarray(rgb).transpose(2, 0, 1)[None])
