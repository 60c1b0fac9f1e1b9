"""Full detector with optional SIFD attachments, as used by training and evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .detector import LEVELS, GridPrediction, PyramidFeatures, fpn_forward, head_forward, init_backbone, init_fpn, init_head
from .errors import ConfigurationError
from .sifd import SIFDOutput, init_sifd, sifd_forward
from .tape import Tape

LOCATIONS = ("P3", "P4", "P5", "ALL", "NONE")
_LOCATION_CODES = {name: i for i, name in enumerate(LOCATIONS)}
_MODE_CODES = {"split": 0, "conv": 1}


@dataclass(frozen=True)
class ModelConfig:
    width: int = 8  # L: P3 carries 2L channels
    fpn_channels: int = 8  # P4/P5 channel count
    n_classes: int = 4
    k_levels: int = 3
    image_size: int = 64
    sifd_location: str = "P3"
    disentangle_mode: str = "split"
    use_inv: bool = True
    use_rel: bool = False
    proj_dim: int = 1

    def __post_init__(self):
        if self.sifd_location not in LOCATIONS:
            raise ConfigurationError(f"sifd_location must be one of {LOCATIONS}, got {self.sifd_location!r}")
        if self.disentangle_mode not in _MODE_CODES:
            raise ConfigurationError(f"disentangle_mode must be split or conv, got {self.disentangle_mode!r}")
        if not (self.use_inv or self.use_rel):
            raise ConfigurationError("use_inv and use_rel cannot both be false")
        if self.image_size % 32:
            raise ConfigurationError(f"image_size must be divisible by 32, got {self.image_size}")
        if self.fpn_channels % 2 and self.sifd_location in ("P4", "P5", "ALL"):
            raise ConfigurationError("fpn_channels must be even to split P4/P5")
        if self.width < 1 or self.fpn_channels < 1:
            raise ConfigurationError("width and fpn_channels must be positive")

    @property
    def sifd_levels(self) -> tuple[str, ...]:
        loc = self.sifd_location
        if loc == "NONE":
            return ()
        if loc == "ALL":
            return LEVELS
        return (loc.lower(),)

    def level_channels(self, level: str) -> int:
        return 2 * self.width if level == "p3" else self.fpn_channels

    def suffix(self, level: str) -> str:
        return f".{level}" if self.sifd_location == "ALL" else ""

    def head_channels(self, level: str) -> int:
        c = self.level_channels(level)
        if level not in self.sifd_levels:
            return c
        return c if (self.use_inv and self.use_rel) else c // 2

    def encode(self) -> np.ndarray:
        return np.array([self.width, self.fpn_channels, self.n_classes, self.k_levels, self.image_size,
                         _LOCATION_CODES[self.sifd_location], _MODE_CODES[self.disentangle_mode],
                         float(self.use_inv), float(self.use_rel), self.proj_dim], dtype=np.float64)

    @classmethod
    def decode(cls, v) -> "ModelConfig":
        v = [int(round(x)) for x in np.asarray(v).ravel()]
        modes = {c: m for m, c in _MODE_CODES.items()}
        return cls(width=v[0], fpn_channels=v[1], n_classes=v[2], k_levels=v[3], image_size=v[4],
                   sifd_location=LOCATIONS[v[5]], disentangle_mode=modes[v[6]], use_inv=bool(v[7]),
                   use_rel=bool(v[8]), proj_dim=v[9])

    def to_dict(self):
        return asdict(self)


META_KEY = "meta.arch"


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic parameter initialisation; one generator, fixed draw order."""
    rng = np.random.default_rng(seed)
    all_split = cfg.sifd_location == "ALL"
    td4_in = cfg.fpn_channels // 2 if all_split else cfg.fpn_channels
    params = init_backbone(rng, cfg.width, cfg.fpn_channels)
    params.update(init_fpn(rng, cfg.width, cfg.fpn_channels, td4_in, td4_in))
    for level in LEVELS:
        params.update(init_head(rng, level, cfg.head_channels(level), cfg.n_classes))
    for level in cfg.sifd_levels:
        half = cfg.level_channels(level) // 2
        c = cfg.level_channels(level)
        if cfg.disentangle_mode == "conv":
            pre = f"det.disent{cfg.suffix(level)}"
            params[f"{pre}.rel.w"] = rng.normal(0.0, np.sqrt(1.0 / c), size=(half, c))
            params[f"{pre}.inv.w"] = rng.normal(0.0, np.sqrt(1.0 / c), size=(half, c))
        params.update(init_sifd(rng, half, cfg.k_levels, cfg.proj_dim, cfg.suffix(level)))
    return params


@dataclass
class ModelOutput:
    pyramid: PyramidFeatures
    preds: dict[str, GridPrediction]
    sifd: dict[str, SIFDOutput] = field(default_factory=dict)


def model_forward(tape: Tape, images, cfg: ModelConfig, zero_rel: bool = False) -> ModelOutput:
    """Pyramid, SIFD outputs at the configured levels, and all detection heads.

    ``zero_rel`` replaces every scale-related map with zeros downstream of the
    split, which must leave detections untouched when only ``x_inv`` is used.
    """
    sifd_out: dict[str, SIFDOutput] = {}

    def attach(level, p):
        if level not in sifd_out:
            pre = f"det.disent{cfg.suffix(level)}"
            sifd_out[level] = sifd_forward(tape, p, cfg.suffix(level), cfg.disentangle_mode, pre)
        return sifd_out[level]

    def topdown(level, p):
        if cfg.sifd_location == "ALL":
            return attach(level, p).split.x_inv
        return p

    pyramid = fpn_forward(tape, images, topdown)
    preds = {}
    for level in LEVELS:
        feat = pyramid[level]
        if level in cfg.sifd_levels:
            out = attach(level, feat)
            x_rel, x_inv = out.split.x_rel, out.split.x_inv
            if zero_rel:
                x_rel = ops.scale_channels(x_rel, np.zeros(x_rel.shape[-3]))
            if cfg.use_inv and cfg.use_rel:
                feat = ops.concat_channels(x_rel, x_inv)
            elif cfg.use_rel:
                feat = x_rel
            else:
                feat = x_inv
        preds[level] = head_forward(tape, feat, level)
    return ModelOutput(pyramid, preds, sifd_out)
