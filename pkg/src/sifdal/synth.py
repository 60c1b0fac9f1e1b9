"""Altitude-conditioned synthetic aerial scenes and their on-disk format.

Objects are class-coloured rectangles whose pixel size follows a pinhole
model, ``focal * metres / altitude``.  The ground texture is projected the
same way, so both objects and background shrink as the camera climbs.

On disk a dataset is ``images/NNNNNN.ppm`` (binary P6) plus ``manifest.jsonl``
with one record per line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DataError, DatasetIOError

CLASSES = ("person", "car", "bus", "van")
# top-down footprint (length, width) in metres
BASE_SIZES = {"person": (0.5, 0.5), "car": (4.5, 1.8), "bus": (12.0, 2.5), "van": (5.0, 2.0)}
CLASS_COLORS = {"person": (200, 40, 40), "car": (40, 70, 210), "bus": (230, 200, 30), "van": (235, 235, 235)}
CLASS_PROBS = (0.3, 0.4, 0.1, 0.2)
MANIFEST_KEYS = ("image", "width", "height", "boxes", "altitude_m", "imu", "height_level")
IMU_KEYS = ("roll_deg", "pitch_deg", "yaw_deg")


@dataclass
class SampleRecord:
    image: str
    width: int
    height: int
    boxes: list  # [x_min, y_min, x_max, y_max, class_id]
    altitude_m: float
    imu: dict
    height_level: int | None = None

    @property
    def sample_id(self) -> str:
        return Path(self.image).stem

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in MANIFEST_KEYS})


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    focal: float = 160.0  # pixels * metres
    altitude_range: tuple = (5.0, 75.0)
    modes: tuple | None = None
    mode_sigma: float = 2.0
    min_objects: int = 2
    max_objects: int = 6
    max_iou: float = 0.7
    texture_m: float = 1.5
    seed: int = 18
    max_attempts: int = 100

    def __post_init__(self):
        lo, hi = self.altitude_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"altitude range must satisfy 0 < lo <= hi, got {self.altitude_range}")
        if self.modes is not None and (len(self.modes) == 0 or min(self.modes) <= 0):
            raise ConfigurationError(f"altitude modes must be positive, got {self.modes}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigurationError("need 0 <= min_objects <= max_objects")
        if self.focal <= 0 or self.image_size < 8:
            raise ConfigurationError("focal must be positive and image_size at least 8")

    def altitude_bounds(self) -> tuple[float, float]:
        if self.modes is None:
            return tuple(map(float, self.altitude_range))
        spread = 3.0 * self.mode_sigma
        return (max(min(self.modes) - spread, 1.0), max(self.modes) + spread)


def apparent_size(real_size_m: float, altitude_m: float, f: float) -> int:
    """Projected size in whole pixels, never below 2."""
    if not altitude_m > 0:
        raise ContractError(f"altitude must be positive, got {altitude_m}")
    return max(2, int(round(f * real_size_m / altitude_m)))


def _box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _sample_altitude(rng, cfg: SynthConfig) -> float:
    if cfg.modes is None:
        return float(rng.uniform(*cfg.altitude_range))
    mode = cfg.modes[int(rng.integers(len(cfg.modes)))]
    lo, hi = mode - 3 * cfg.mode_sigma, mode + 3 * cfg.mode_sigma
    return float(np.clip(rng.normal(mode, cfg.mode_sigma), max(lo, 1.0), hi))


def _background(rng, cfg: SynthConfig, altitude: float) -> np.ndarray:
    n = cfg.image_size
    period = max(cfg.focal * cfg.texture_m / altitude, 1.5)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    u = xx * np.cos(theta) + yy * np.sin(theta)
    v = -xx * np.sin(theta) + yy * np.cos(theta)
    pattern = np.sin(2 * np.pi * u / period + phase[0]) * np.sin(2 * np.pi * v / period + phase[1])
    base = np.array([95.0, 110.0, 80.0]) + rng.uniform(-15, 15, size=3)
    img = base[None, None, :] + 28.0 * pattern[..., None] + rng.normal(0, 4.0, size=(n, n, 3))
    return img


def generate_sample(index: int, config: SynthConfig = SynthConfig(), altitude_m: float | None = None):
    """Record and ``(H, W, 3)`` uint8 image for sample ``index``.

    Each sample has its own generator seeded from ``(seed, index)``.  Passing
    ``altitude_m`` replaces the drawn altitude; every other random draw is kept.
    """
    rng = np.random.default_rng([config.seed, index])
    drawn = _sample_altitude(rng, config)
    altitude = drawn if altitude_m is None else float(altitude_m)
    if not altitude > 0:
        raise ContractError(f"altitude must be positive, got {altitude}")
    imu = {"roll_deg": float(rng.uniform(-5, 5)), "pitch_deg": float(rng.uniform(-5, 5)),
           "yaw_deg": float(rng.uniform(-180, 180))}
    img = _background(rng, config, altitude)
    n = config.image_size
    wanted = int(rng.integers(config.min_objects, config.max_objects + 1))
    boxes = []
    for _ in range(wanted):
        cls = int(rng.choice(len(CLASSES), p=CLASS_PROBS))
        name = CLASSES[cls]
        length, width = BASE_SIZES[name]
        jitter = rng.uniform(0.8, 1.2, size=2)
        upright = rng.random() < 0.5
        shade = rng.uniform(-25, 25)
        along = apparent_size(length * jitter[0], altitude, config.focal)
        across = apparent_size(width * jitter[1], altitude, config.focal)
        bw, bh = (across, along) if upright else (along, across)
        placed = None
        if bw <= n and bh <= n:
            for _ in range(config.max_attempts):
                x0 = int(rng.integers(0, n - bw + 1))
                y0 = int(rng.integers(0, n - bh + 1))
                cand = (x0, y0, x0 + bw, y0 + bh)
                if all(_box_iou(cand, b) <= config.max_iou for b in boxes):
                    placed = cand
                    break
        if placed is None:
            continue
        x0, y0, x1, y1 = placed
        img[y0:y1, x0:x1] = np.asarray(CLASS_COLORS[name], dtype=np.float64) + shade
        boxes.append([float(x0), float(y0), float(x1), float(y1), cls])
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    record = SampleRecord(f"images/{index:06d}.ppm", n, n, [list(b) for b in boxes], altitude, imu)
    return record, image


def generate_dataset(count: int, config: SynthConfig = SynthConfig(), start: int = 0):
    records, images = [], []
    for i in range(start, start + count):
        r, im = generate_sample(i, config)
        records.append(r)
        images.append(im)
    return records, images


# --- PPM ---------------------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"PPM needs an (H, W, 3) uint8 array, got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetIOError(f"cannot read {path}: {exc}") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetIOError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the payload
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise DatasetIOError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    payload = raw[pos:]
    if len(payload) != w * h * 3:
        raise DatasetIOError(f"{path}: PPM payload has {len(payload)} bytes, expected {w * h * 3}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


# --- manifest ------------------------------------------------------------------------------------

def validate_record(rec: SampleRecord) -> None:
    for b in rec.boxes:
        if len(b) != 5:
            raise DataError(f"{rec.image}: box must have 5 entries, got {b}")
        x0, y0, x1, y1, cls = b
        if not (0 <= x0 < x1 <= rec.width and 0 <= y0 < y1 <= rec.height):
            raise DataError(f"{rec.image}: box {b} outside {rec.width}x{rec.height} image")
        if (x1 - x0) * (y1 - y0) < 4:
            raise DataError(f"{rec.image}: box {b} smaller than 4 px^2")
        if not (isinstance(cls, int) and 0 <= cls < len(CLASSES)):
            raise DataError(f"{rec.image}: class id {cls!r} not in [0, {len(CLASSES)})")
    if not rec.altitude_m > 0:
        raise DataError(f"{rec.image}: altitude must be positive, got {rec.altitude_m}")


def parse_record(line: str, lineno: int = 1) -> SampleRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise DataError(f"manifest line {lineno}: expected an object")
    for key in MANIFEST_KEYS:
        if key not in obj:
            raise DataError(f"manifest line {lineno}: missing key {key!r}")
    extra = set(obj) - set(MANIFEST_KEYS)
    if extra:
        raise DataError(f"manifest line {lineno}: unexpected keys {sorted(extra)}")
    imu = obj["imu"]
    if not isinstance(imu, dict) or set(imu) != set(IMU_KEYS):
        raise DataError(f"manifest line {lineno}: imu must have keys {IMU_KEYS}")
    level = obj["height_level"]
    if level is not None and not isinstance(level, int):
        raise DataError(f"manifest line {lineno}: height_level must be an integer or null")
    rec = SampleRecord(obj["image"], int(obj["width"]), int(obj["height"]), obj["boxes"],
                       float(obj["altitude_m"]), imu, level)
    try:
        validate_record(rec)
    except DataError as exc:
        raise DataError(f"manifest line {lineno}: {exc}") from None
    return rec


def write_manifest(records: Sequence[SampleRecord], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "manifest.jsonl", "w") as fh:
        for r in records:
            validate_record(r)
            fh.write(r.to_json() + "\n")


def write_dataset(records: Sequence[SampleRecord], directory, images: Sequence[np.ndarray] | None = None) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    if images is not None:
        if len(images) != len(records):
            raise ContractError(f"{len(records)} records but {len(images)} images")
        for r, im in zip(records, images):
            write_ppm(d / r.image, im)
    write_manifest(records, d)


def read_dataset(directory) -> list[SampleRecord]:
    path = Path(directory) / "manifest.jsonl"
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetIOError(f"cannot read {path}: {exc}") from exc
    return [parse_record(line, i) for i, line in enumerate(text.splitlines(), 1) if line.strip()]


def read_images(records: Sequence[SampleRecord], directory) -> list[np.ndarray]:
    return [read_ppm(Path(directory) / r.image) for r in records]


def to_model_input(images: Sequence[np.ndarray]) -> np.ndarray:
    """uint8 (H, W, 3) images -> float (N, 3, H, W) with zero mean and roughly unit spread."""
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float64)
    return np.ascontiguousarray((arr.transpose(0, 3, 1, 2) / 255.0 - 0.5) / 0.25)


@dataclass
class TrainingSet:
    images: np.ndarray
    boxes: list
    levels: np.ndarray
    altitudes: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def from_records(cls, records, images, levels=None):
        lv = levels if levels is not None else [r.height_level for r in records]
        if any(x is None for x in lv):
            raise DataError("every record needs a height level; run cluster-heights first")
        return cls(to_model_input(images), [[tuple(b) for b in r.boxes] for r in records],
                   np.asarray(lv, dtype=np.int64), np.array([r.altitude_m for r in records]))

    @classmethod
    def load(cls, directory):
        recs = read_dataset(directory)
        return cls.from_records(recs, read_images(recs, directory))

    def __len__(self):
        return len(self.images)
