"""Flat key=value run configuration with strict validation."""
from dataclasses import dataclass, fields

from .errors import UsageError
from .occupancy import SceneParams
from .refine import DecoderConfig
from .schedule import SamplerConfig


@dataclass
class Config:
    # scene generation
    dims: tuple = (32, 32, 8)
    classes: int = 6
    voxel_size: float = 0.25
    objects: int = 6
    views: int = 2
    view_h: int = 24
    view_w: int = 32
    d_bins: int = 16
    range_limit: float = 12.0
    lidar_rays: int = 2048
    lidar_dropout: float = 0.2
    # encoding / diffusion
    scale: float = 0.01
    tau: float = 1.0
    mask_r: int = 2
    timesteps: int = 1000
    schedule: str = "cosine"
    strategy: str = "ddim"
    steps: int = 3
    td: int = 1
    # model
    layers: int = 6
    points: int = 4
    width: int = 8
    c_f: int = 8
    upsample: str = "nearest"
    # optimization
    lr: float = 2e-3
    weight_decay: float = 0.01
    warmup: int = 100
    epochs: int = 12
    batch: int = 4
    w_ce: float = 1.0
    w_lovasz: float = 1.0
    w_scal_geo: float = 1.0
    w_scal_sem: float = 1.0
    w_depth: float = 1.0
    # bookkeeping
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 200

    def scene_params(self):
        return SceneParams(dims=self.dims, classes=self.classes,
                           voxel_size=self.voxel_size, objects=self.objects,
                           views=self.views, view_hw=(self.view_h, self.view_w),
                           d_bins=self.d_bins, range_limit=self.range_limit,
                           lidar_rays=self.lidar_rays,
                           lidar_dropout=self.lidar_dropout).validate()

    def decoder_config(self):
        try:
            return DecoderConfig(layers=self.layers, points=self.points,
                                 width=self.width, upsample=self.upsample).validate()
        except ValueError as e:
            raise UsageError(str(e))

    def sampler_config(self):
        return SamplerConfig(strategy=self.strategy, steps=self.steps,
                             td=self.td).validate(self.timesteps)

    def loss_weights(self):
        return {"ce": self.w_ce, "lovasz": self.w_lovasz,
                "scal_geo": self.w_scal_geo, "scal_sem": self.w_scal_sem,
                "depth": self.w_depth}

    def validate(self):
        self.scene_params()
        self.decoder_config()
        self.sampler_config()
        if self.schedule not in ("cosine", "linear"):
            raise UsageError("schedule must be cosine or linear")
        if self.timesteps < 2:
            raise UsageError("timesteps must be >= 2")
        if not 0 < self.scale:
            raise UsageError("scale must be positive")
        if self.tau <= 0:
            raise UsageError("tau must be positive")
        if self.mask_r < 0:
            raise UsageError("mask_r must be >= 0")
        if self.lr <= 0 or self.weight_decay < 0:
            raise UsageError("need lr > 0 and weight_decay >= 0")
        if self.epochs < 1 or self.batch < 1:
            raise UsageError("need epochs >= 1 and batch >= 1")
        if self.warmup < 0:
            raise UsageError("warmup must be >= 0")
        if min(self.w_ce, self.w_lovasz, self.w_scal_geo, self.w_scal_sem,
               self.w_depth) < 0:
            raise UsageError("loss weights must be >= 0")
        if self.seed < 0:
            raise UsageError("seed must be >= 0")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise UsageError("log_every/checkpoint_every must be >= 1")
        return self


def _parse_value(name, raw, kind):
    try:
        if kind is tuple:
            parts = tuple(int(p) for p in raw.split(","))
            if len(parts) != 3:
                raise ValueError
            return parts
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise UsageError("bad value for %s: %r" % (name, raw))


def parse_config(text, base=None):
    """Parse `key = value` lines into a Config; unknown keys are rejected."""
    kinds = {f.name: type(getattr(Config(), f.name)) for f in fields(Config)}
    cfg = base if base is not None else Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError("config line %d is not key = value: %r" % (lineno, line))
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in kinds:
            raise UsageError("unknown config key %r (line %d)" % (key, lineno))
        setattr(cfg, key, _parse_value(key, raw, kinds[key]))
    return cfg.validate()


def load_config(path, base=None):
    with open(path, "r") as fh:
        return parse_config(fh.read(), base)


def config_text(cfg):
    """Canonical serialization: field order, one key = value per line."""
    lines = []
    for f in fields(Config):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append("%s = %s" % (f.name, v))
    return "\n".join(lines) + "\n"
