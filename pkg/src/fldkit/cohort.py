"""Synthetic cohort generation, face rendering, acquisition shift, k-fold
splits, and on-disk cohort I/O.

Generative model: one latent severity z ~ N(0,1) per participant drives
everything. The label is 1 iff z + N(0, label_noise_sd) > 0; each indicator
is loading*z + N(0, noise_sd), optionally thresholded to binary and then
mapped to presentation units via offset + scale; the face image is rendered
from (z, BMI, style seed). Everything is deterministic under (config, seed).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, ParameterError

_KINDS = ("continuous", "binary")


@dataclass(frozen=True)
class IndicatorSpec:
    """One synthetic indicator: how strongly it loads on the latent severity,
    its private noise, an optional binarization cut, and presentation units."""

    name: str
    kind: str
    loading: float
    noise_sd: float = 1.0
    binarize_threshold: float = 0.0
    offset: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.name or not self.name.replace("_", "").isalnum():
            raise ParameterError(f"indicator name must be a plain identifier, got {self.name!r}")
        if self.kind not in _KINDS:
            raise ParameterError(f"indicator kind must be one of {_KINDS}, got {self.kind!r}")
        if not (self.noise_sd >= 0.0):
            raise ParameterError(f"noise_sd must be nonnegative, got {self.noise_sd!r}")
        if self.scale == 0.0:
            raise ParameterError("scale must be nonzero")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "loading": self.loading,
            "noise_sd": self.noise_sd,
            "binarize_threshold": self.binarize_threshold,
            "offset": self.offset,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IndicatorSpec":
        return cls(**d)


def _spec(name, kind, loading, offset=0.0, scale=1.0) -> IndicatorSpec:
    return IndicatorSpec(name=name, kind=kind, loading=loading, offset=offset, scale=scale)


# Loadings are inverted from target point-biserial correlations against the
# label (see docs in generate_cohort): continuous rho = sqrt(2/pi) * r / s,
# binary rho = (2/pi) * asin(r / s), with r = loading / sqrt(loading^2 + 1)
# and s = sqrt(1 + label_noise_sd^2). Offsets/scales only set display units.
DEFAULT_PANEL: tuple[IndicatorSpec, ...] = (
    _spec("BMI", "continuous", 1.5709, 24.0, 2.0),
    _spec("WEIGHT", "continuous", 1.1934, 65.0, 8.0),
    _spec("HLP", "binary", 0.8458),
    _spec("UA", "continuous", 0.6315, 350.0, 70.0),
    _spec("TG", "continuous", 0.5887, 1.7, 0.8),
    _spec("OBE", "binary", 0.7084),
    _spec("DBP", "continuous", 0.5255, 78.0, 9.0),
    _spec("SBP", "continuous", 0.5195, 122.0, 13.0),
    _spec("APOB", "continuous", 0.5174, 0.9, 0.25),
    _spec("HGB", "continuous", 0.5094, 145.0, 14.0),
    _spec("RBC", "continuous", 0.5035, 4.7, 0.45),
    _spec("MALE", "binary", 0.6040),
    _spec("AST", "continuous", 0.4708, 25.0, 9.0),
    _spec("HUA", "binary", 0.5228),
    _spec("HPT", "binary", 0.4845),
    _spec("HDL", "continuous", -0.3774, 1.35, 0.3),
    _spec("WBC", "continuous", 0.3605, 6.3, 1.6),
    _spec("LDL", "continuous", 0.3538, 2.8, 0.8),
    _spec("APOA", "continuous", -0.3290, 1.4, 0.25),
    _spec("ALP", "continuous", 0.3225, 75.0, 20.0),
    _spec("FBG", "continuous", 0.3195, 5.3, 1.2),
    _spec("SMOKE", "binary", 0.2704),
    _spec("DRINK", "binary", 0.3283),
)


@dataclass(frozen=True)
class RenderConfig:
    """Face renderer knobs. Severity > 0 shifts skin toward yellow (blue
    channel down), darkens it, and raises the melasma blob rate; ellipse
    width is affine in BMI."""

    skin_base: tuple[float, float, float] = (0.78, 0.62, 0.50)
    skin_jitter: float = 0.04
    background: tuple[float, float, float] = (0.30, 0.32, 0.36)
    yellow_shift: float = 0.05
    luminance_drop: float = 0.06
    luminance_floor: float = 0.30
    melasma_rate: float = 1.5
    melasma_darken: float = 0.55
    melasma_radius: tuple[float, float] = (1.0, 2.5)
    width_base_px: float = 4.0
    width_per_bmi: float = 0.5
    width_bounds_px: tuple[float, float] = (6.0, 28.0)
    height_radius_px: float = 23.0
    noise_sd: float = 0.02

    def to_dict(self) -> dict:
        return {
            "skin_base": list(self.skin_base),
            "skin_jitter": self.skin_jitter,
            "background": list(self.background),
            "yellow_shift": self.yellow_shift,
            "luminance_drop": self.luminance_drop,
            "luminance_floor": self.luminance_floor,
            "melasma_rate": self.melasma_rate,
            "melasma_darken": self.melasma_darken,
            "melasma_radius": list(self.melasma_radius),
            "width_base_px": self.width_base_px,
            "width_per_bmi": self.width_per_bmi,
            "width_bounds_px": list(self.width_bounds_px),
            "height_radius_px": self.height_radius_px,
            "noise_sd": self.noise_sd,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RenderConfig":
        d = dict(d)
        for key in ("skin_base", "background", "melasma_radius", "width_bounds_px"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class CohortShift:
    """Deterministic acquisition-style transform: per channel,
    pixel' = clamp((gain * pixel + offset_c) ** gamma, 0, 1)."""

    brightness_gain: float = 1.0
    tone_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    exposure_gamma: float = 1.0

    def __post_init__(self):
        if not (self.brightness_gain > 0.0):
            raise ParameterError(f"brightness_gain must be positive, got {self.brightness_gain!r}")
        if not (self.exposure_gamma > 0.0):
            raise ParameterError(f"exposure_gamma must be positive, got {self.exposure_gamma!r}")
        if len(self.tone_offset) != 3:
            raise ParameterError("tone_offset must have one entry per channel")

    def to_dict(self) -> dict:
        return {
            "brightness_gain": self.brightness_gain,
            "tone_offset": list(self.tone_offset),
            "exposure_gamma": self.exposure_gamma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CohortShift":
        return cls(
            brightness_gain=d["brightness_gain"],
            tone_offset=tuple(d["tone_offset"]),
            exposure_gamma=d["exposure_gamma"],
        )


SHIFT_PRESETS: dict[str, CohortShift] = {
    "none": CohortShift(),
    "year2020": CohortShift(brightness_gain=0.85, tone_offset=(0.03, 0.02, -0.02), exposure_gamma=1.1),
    # gain 0.1 with a -0.1 floor offset: the sensor clips to black, destroying
    # the image channel entirely while leaving metadata untouched.
    "severe": CohortShift(brightness_gain=0.1, tone_offset=(-0.1, -0.1, -0.1), exposure_gamma=1.0),
}


@dataclass(frozen=True)
class GenerationConfig:
    n: int = 676
    indicators: tuple[IndicatorSpec, ...] = DEFAULT_PANEL
    label_noise_sd: float = 0.5
    with_images: bool = True
    image_size: int = 64
    year_tag: str = "2021"
    target_prevalence: float = 0.5
    render: RenderConfig = field(default_factory=RenderConfig)

    def __post_init__(self):
        if self.n < 1:
            raise ParameterError(f"cohort size must be >= 1, got {self.n}")
        if self.image_size < 8:
            raise ParameterError(f"image_size must be >= 8, got {self.image_size}")
        if not (self.label_noise_sd >= 0.0):
            raise ParameterError("label_noise_sd must be nonnegative")
        names = [s.name for s in self.indicators]
        if len(set(names)) != len(names):
            raise ConfigError("indicator names must be unique")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "indicators": [s.to_dict() for s in self.indicators],
            "label_noise_sd": self.label_noise_sd,
            "with_images": self.with_images,
            "image_size": self.image_size,
            "year_tag": self.year_tag,
            "target_prevalence": self.target_prevalence,
            "render": self.render.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        d = dict(d)
        if "indicators" in d:
            d["indicators"] = tuple(IndicatorSpec.from_dict(s) for s in d["indicators"])
        if "render" in d:
            d["render"] = RenderConfig.from_dict(d["render"])
        return cls(**d)


@dataclass
class Participant:
    pid: str
    label: int
    metadata: dict[str, float]
    image: np.ndarray | None = None
    severity: float | None = None  # generator-only latent; never model-facing


@dataclass
class Cohort:
    participants: list[Participant]
    indicators: tuple[IndicatorSpec, ...]
    year_tag: str
    generation_config: dict

    @property
    def n(self) -> int:
        return len(self.participants)

    @property
    def has_images(self) -> bool:
        return all(p.image is not None for p in self.participants)

    def indicator_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.indicators)

    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.participants], dtype=np.int64)

    def feature_matrix(self, names: "list[str] | tuple[str, ...]") -> np.ndarray:
        """Rows of the named indicator values, in the given column order."""
        available = set(self.indicator_names())
        missing = [n for n in names if n not in available]
        if missing:
            raise DataError(f"indicators not in cohort: {', '.join(missing)}")
        out = np.empty((self.n, len(names)), dtype=np.float64)
        for i, p in enumerate(self.participants):
            for j, name in enumerate(names):
                out[i, j] = p.metadata[name]
        return out

    def image_stack(self) -> np.ndarray:
        missing = [p.pid for p in self.participants if p.image is None]
        if missing:
            raise DataError(f"{len(missing)} participants have no image (first: {missing[0]})")
        return np.stack([p.image for p in self.participants])

    def prevalence(self) -> float:
        return float(self.labels().mean())

    def kfold(self, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
        return split_kfold(self.labels(), k, seed)


def render_face(
    severity: float,
    bmi: float,
    style_seed: int,
    size: int = 64,
    config: RenderConfig = RenderConfig(),
) -> np.ndarray:
    """Draw an ellipse face on a neutral background.

    Base skin tone comes from style_seed; positive severity shifts the tone
    toward yellow and lowers luminance proportionally; melasma blob count is
    Poisson(melasma_rate * max(0, severity)); ellipse width is affine in
    BMI. Additive N(0, noise_sd) pixel noise, clamped to [0, 1].
    """
    rng = np.random.default_rng(style_seed)
    sev = max(0.0, float(severity))

    img = np.empty((size, size, 3), dtype=np.float64)
    img[:, :] = config.background

    skin = np.array(config.skin_base) + rng.normal(0.0, config.skin_jitter, 3)
    skin[2] -= config.yellow_shift * sev
    skin *= max(config.luminance_floor, 1.0 - config.luminance_drop * sev)

    cy = cx = (size - 1) / 2.0
    ry = config.height_radius_px * (size / 64.0)
    rx_lo, rx_hi = config.width_bounds_px
    rx = float(np.clip(config.width_base_px + config.width_per_bmi * bmi, rx_lo, rx_hi))
    rx *= size / 64.0
    yy, xx = np.ogrid[0:size, 0:size]
    face = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    img[face] = np.clip(skin, 0.0, 1.0)

    n_blobs = int(rng.poisson(config.melasma_rate * sev))
    for _ in range(n_blobs):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        rad_frac = math.sqrt(rng.uniform(0.0, 1.0)) * 0.9
        bx = cx + rx * rad_frac * math.cos(theta)
        by = cy + ry * rad_frac * math.sin(theta)
        br = rng.uniform(*config.melasma_radius) * (size / 64.0)
        blob = (yy - by) ** 2 + (xx - bx) ** 2 <= br ** 2
        img[blob] *= config.melasma_darken

    img += rng.normal(0.0, config.noise_sd, (size, size, 3))
    return np.clip(img, 0.0, 1.0)


def generate_cohort(config: GenerationConfig, seed: int) -> Cohort:
    """Sample a cohort from the latent-severity model (see module docstring).

    RNG consumption order is fixed (latents, label noise, indicator noise in
    panel order, style seeds, then per-participant rendering), so output is
    bit-reproducible under (config, seed).
    """
    rng = np.random.default_rng(seed)
    n = config.n
    z = rng.standard_normal(n)
    label_noise = rng.normal(0.0, config.label_noise_sd, n) if config.label_noise_sd > 0 else np.zeros(n)
    labels = (z + label_noise > 0.0).astype(np.int64)

    columns: dict[str, np.ndarray] = {}
    for spec in config.indicators:
        raw = spec.loading * z + (rng.normal(0.0, spec.noise_sd, n) if spec.noise_sd > 0 else 0.0)
        if spec.kind == "binary":
            columns[spec.name] = (raw > spec.binarize_threshold).astype(np.float64)
        else:
            columns[spec.name] = spec.offset + spec.scale * raw

    style_seeds = rng.integers(0, 2**31 - 1, n)

    participants: list[Participant] = []
    bmi_fallback = 24.0
    for i in range(n):
        metadata = {name: float(col[i]) for name, col in columns.items()}
        image = None
        if config.with_images:
            image = render_face(
                severity=float(z[i]),
                bmi=metadata.get("BMI", bmi_fallback),
                style_seed=int(style_seeds[i]),
                size=config.image_size,
                config=config.render,
            )
        participants.append(
            Participant(
                pid=f"S{i:05d}",
                label=int(labels[i]),
                metadata=metadata,
                image=image,
                severity=float(z[i]),
            )
        )

    gen_cfg = config.to_dict()
    gen_cfg["seed"] = int(seed)
    return Cohort(
        participants=participants,
        indicators=config.indicators,
        year_tag=config.year_tag,
        generation_config=gen_cfg,
    )


def apply_cohort_shift(image: np.ndarray, shift: CohortShift) -> np.ndarray:
    """pixel' = clamp((gain * pixel + offset_c) ** gamma, 0, 1) per channel.

    gamma == 1.0 skips the power so the identity shift is bit-exact.
    """
    out = shift.brightness_gain * image + np.asarray(shift.tone_offset)[None, None, :]
    out = np.maximum(out, 0.0)  # keep the power real-valued
    if shift.exposure_gamma != 1.0:
        out = out ** shift.exposure_gamma
    return np.clip(out, 0.0, 1.0)


def shift_cohort(cohort: Cohort, shift: CohortShift, year_tag: str | None = None) -> Cohort:
    """Copy of the cohort with every image shifted; metadata untouched."""
    shifted = [
        Participant(
            pid=p.pid,
            label=p.label,
            metadata=dict(p.metadata),
            image=None if p.image is None else apply_cohort_shift(p.image, shift),
            severity=p.severity,
        )
        for p in cohort.participants
    ]
    cfg = dict(cohort.generation_config)
    cfg["applied_shift"] = shift.to_dict()
    tag = cohort.year_tag if year_tag is None else year_tag
    cfg["year_tag"] = tag
    return Cohort(participants=shifted, indicators=cohort.indicators, year_tag=tag, generation_config=cfg)


def split_kfold(labels: np.ndarray, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold: shuffle within each class, deal round-robin with a
    fold pointer that keeps running across classes. Fold sizes and per-class
    counts each differ by at most 1; folds partition all indices."""
    labels = np.asarray(labels)
    n = len(labels)
    if not isinstance(k, int) or k < 2:
        raise ParameterError(f"k must be an integer >= 2, got {k!r}")
    if k > n:
        raise ParameterError(f"k={k} exceeds cohort size {n}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=np.int64)
    ptr = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        for i in idx:
            fold_of[i] = ptr % k
            ptr += 1
    folds = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        folds.append((train, test))
    return folds


# ---- persistence ---------------------------------------------------------

_CONFIG_FILE = "config.json"
_METADATA_FILE = "metadata.csv"


def write_ppm(path: Path, image: np.ndarray) -> None:
    """8-bit binary PPM (P6, maxval 255)."""
    h, w, c = image.shape
    if c != 3:
        raise FormatError(f"PPM image needs 3 channels, got {c}")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM (bad magic)")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with optional '#' comment lines
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3 and pos < len(blob):
        ch = blob[pos:pos + 1]
        if ch == b"#":
            pos = blob.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace():
                end += 1
            tokens.append(blob[pos:end])
            pos = end
    if len(tokens) < 3:
        raise FormatError(f"{path}: truncated PPM header")
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: expected maxval 255, got {maxval}")
    pixels = blob[pos + 1:]
    if len(pixels) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} pixel bytes, found {len(pixels)}")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0


def write_cohort(cohort: Cohort, directory: "str | Path") -> None:
    """Write config.json, metadata.csv (full-precision floats), and one PPM
    per participant with an image. Output is byte-stable for a given cohort."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    config = dict(cohort.generation_config)
    config["year_tag"] = cohort.year_tag
    (directory / _CONFIG_FILE).write_text(json.dumps(config, sort_keys=True, indent=2) + "\n")

    names = cohort.indicator_names()
    lines = [",".join(("id", "label") + names)]
    for p in cohort.participants:
        lines.append(",".join([p.pid, str(p.label)] + [repr(p.metadata[n]) for n in names]))
    (directory / _METADATA_FILE).write_text("\n".join(lines) + "\n")

    for p in cohort.participants:
        if p.image is not None:
            write_ppm(directory / f"{p.pid}.ppm", p.image)


def read_cohort(directory: "str | Path") -> Cohort:
    directory = Path(directory)
    config_path = directory / _CONFIG_FILE
    if not config_path.exists():
        raise FormatError(f"{directory}: missing {_CONFIG_FILE}")
    try:
        config = json.loads(config_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{config_path}: invalid JSON ({exc})") from exc
    try:
        indicators = tuple(IndicatorSpec.from_dict(d) for d in config["indicators"])
        year_tag = config["year_tag"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{config_path}: missing field {exc}") from exc

    metadata_path = directory / _METADATA_FILE
    if not metadata_path.exists():
        raise FormatError(f"{directory}: missing {_METADATA_FILE}")
    lines = metadata_path.read_text().splitlines()
    if not lines:
        raise FormatError(f"{metadata_path}: empty file")
    header = lines[0].split(",")
    names = tuple(s.name for s in indicators)
    if header[:2] != ["id", "label"]:
        raise FormatError(f"{metadata_path}: header must start with id,label")
    for name in names:
        if name not in header[2:]:
            raise FormatError(f"{metadata_path}: missing declared indicator column '{name}'")
    extra = [c for c in header[2:] if c not in names]
    if extra:
        raise FormatError(f"{metadata_path}: undeclared columns: {', '.join(extra)}")
    col_of = {name: header.index(name) for name in names}

    participants = []
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(header):
            raise FormatError(f"{metadata_path}:{ln}: expected {len(header)} fields, got {len(parts)}")
        pid = parts[0]
        if parts[1] not in ("0", "1"):
            raise DataError(f"{metadata_path}:{ln}: label must be 0 or 1, got {parts[1]!r}")
        try:
            metadata = {name: float(parts[col_of[name]]) for name in names}
        except ValueError as exc:
            raise FormatError(f"{metadata_path}:{ln}: non-numeric value ({exc})") from exc
        image_path = directory / f"{pid}.ppm"
        image = read_ppm(image_path) if image_path.exists() else None
        participants.append(
            Participant(pid=pid, label=int(parts[1]), metadata=metadata, image=image, severity=None)
        )
    pids = [p.pid for p in participants]
    if len(set(pids)) != len(pids):
        raise DataError(f"{metadata_path}: duplicate participant ids")
    return Cohort(
        participants=participants,
        indicators=indicators,
        year_tag=year_tag,
        generation_config=config,
    )
