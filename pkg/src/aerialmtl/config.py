"""Run configuration as a flat ``key=value`` text file.

One pair per line, ``#`` starts a comment. Unknown keys are rejected and
every value is validated before any computation starts.
"""

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .balancing import STRATEGIES
from .errors import ConfigError
from .model import ModelConfig

TASK_SETS = ("both", "height", "semantics")


@dataclass
class RunConfig:
    # model
    in_channels: int = 3
    num_classes: int = 6
    encoder_depth: int = 4
    base_channels: int = 16
    skip_connections: bool = True
    shared_decoder_blocks: int = 1
    dropout_p: float = 0.2
    seed: int = 0
    # loss balancing
    balancing: str = "equal"
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    tasks: str = "both"
    # optimisation
    lr: float = 2e-4
    crop_size: int = 320
    iterations: int = 20000
    batch_size: int = 4
    checkpoint_every: int = 1000
    # data
    manifest: str = ""
    resolution: str = "lr"
    # inference
    window: int = 1024
    stride: int = 256
    sigma: float = 0.0
    mc_samples: int = 30
    output_scale: float = 1.0

    def validate(self):
        self.model_config().validate()
        problems = []
        m = 2 ** self.encoder_depth
        if self.balancing not in STRATEGIES:
            problems.append(f"balancing must be one of {STRATEGIES} (got {self.balancing!r})")
        if self.tasks not in TASK_SETS:
            problems.append(f"tasks must be one of {TASK_SETS} (got {self.tasks!r})")
        if self.resolution not in ("vhr", "lr"):
            problems.append(f"resolution must be vhr or lr (got {self.resolution!r})")
        if self.gradnorm_alpha < 0:
            problems.append("gradnorm_alpha must be >= 0")
        if self.gradnorm_lr <= 0:
            problems.append("gradnorm_lr must be > 0")
        if self.lr <= 0:
            problems.append("lr must be > 0")
        if self.crop_size < m or self.crop_size % m:
            problems.append(f"crop_size must be a positive multiple of {m} (got {self.crop_size})")
        if self.window < m or self.window % m:
            problems.append(f"window must be a positive multiple of {m} (got {self.window})")
        if not 1 <= self.stride <= self.window:
            problems.append(f"stride must lie in [1, window] (got {self.stride})")
        for key in ("iterations", "batch_size", "checkpoint_every", "mc_samples"):
            if getattr(self, key) < 1:
                problems.append(f"{key} must be >= 1")
        if self.sigma < 0:
            problems.append("sigma must be >= 0 (0 selects window/4)")
        if self.output_scale <= 0:
            problems.append("output_scale must be > 0")
        if problems:
            raise ConfigError("invalid run config: " + "; ".join(problems))
        return self

    def model_config(self):
        return ModelConfig(**{k: getattr(self, k) for k in ModelConfig.field_names()})

    def to_text(self):
        return "".join(f"{k}={_format(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, mapping):
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(mapping) - set(types))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, raw in mapping.items():
            kwargs[key] = _coerce(key, raw, types[key])
        return cls(**kwargs).validate()

    @classmethod
    def from_text(cls, text, overrides=None):
        mapping = parse_key_values(text)
        mapping.update(overrides or {})
        return cls.from_mapping(mapping)

    @classmethod
    def load(cls, path, overrides=None):
        return cls.from_text(Path(path).read_text(), overrides)

    def replace(self, **changes):
        data = asdict(self)
        data.update(changes)
        return RunConfig.from_mapping(data)


def parse_key_values(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        value = raw
    elif typ in (bool, "bool"):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    else:
        value = raw.strip()
    try:
        if typ in (int, "int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if typ in (float, "float"):
            return float(value)
        if typ in (bool, "bool"):
            if not isinstance(value, bool):
                raise ValueError
            return value
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {getattr(typ, '__name__', typ)}") from None


def desk_config(**changes):
    """Small configuration that trains in minutes on one CPU core."""
    base = dict(
        encoder_depth=4,
        base_channels=8,
        crop_size=64,
        batch_size=2,
        iterations=2000,
        checkpoint_every=500,
        lr=1e-3,
        window=128,
        stride=32,
    )
    base.update(changes)
    return RunConfig.from_mapping(base)
