"""The fusion network: CNN image coder with a 2048-dim projection, a
standardization-only metadata coder, prediction head (MLP1), auxiliary
regression head (MLP2, image code only), the blended loss, and the
checkpoint codec.

Modes:
  metadata    MLP1 on standardized indicator rows (no image, no aux)
  image       CNN code -> MLP1; aux head available
  multimodal  concat(image code, metadata code) -> MLP1; aux head available
  indicator   compact MLP on standardized rows (for Shapley ranking runs)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError, FormatError, ParameterError
from .tensor import Tensor

FACE_DIM = 2048
CONV_CHANNELS = (16, 32, 64, 128, 128)
MLP1_HIDDEN = (2056, 1024, 1024, 512, 256, 128)
MLP2_HIDDEN = (1024, 1024)
AUX_DIM = 3
MODES = ("metadata", "image", "multimodal", "indicator")

CHECKPOINT_MAGIC = b"DFLD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    mode: str
    indicators: tuple[str, ...] = ()
    alpha: float = 0.7
    dropout: float = 0.3
    use_aux: bool = True
    image_size: int = 64
    aux_targets: tuple[str, str, str] = ("MALE", "BMI", "WEIGHT")
    indicator_hidden: tuple[int, ...] = (64, 32)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "image" and not self.indicators:
            raise ConfigError(f"mode {self.mode!r} needs a nonempty indicator list")
        if not (0.0 <= self.alpha <= 1.0):
            raise ParameterError(f"alpha must be in [0, 1], got {self.alpha}")
        if not (0.0 <= self.dropout < 1.0):
            raise ParameterError(f"dropout must be in [0, 1), got {self.dropout}")
        if len(set(self.indicators)) != len(self.indicators):
            raise ConfigError("indicator names must be unique")

    @property
    def c_mc(self) -> int:
        return len(self.indicators)

    @property
    def wants_images(self) -> bool:
        return self.mode in ("image", "multimodal")

    @property
    def aux_active(self) -> bool:
        # the aux head regresses targets from the image code only, so it
        # exists only when an image code exists
        return self.use_aux and self.wants_images

    @property
    def mlp1_input(self) -> int:
        if self.mode == "multimodal":
            return FACE_DIM + self.c_mc
        if self.mode == "image":
            return FACE_DIM
        return self.c_mc

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "indicators": list(self.indicators),
            "alpha": self.alpha,
            "dropout": self.dropout,
            "use_aux": self.use_aux,
            "image_size": self.image_size,
            "aux_targets": list(self.aux_targets),
            "indicator_hidden": list(self.indicator_hidden),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            mode=d["mode"],
            indicators=tuple(d["indicators"]),
            alpha=d["alpha"],
            dropout=d["dropout"],
            use_aux=d["use_aux"],
            image_size=d["image_size"],
            aux_targets=tuple(d["aux_targets"]),
            indicator_hidden=tuple(d["indicator_hidden"]),
        )


@dataclass
class ModelOutput:
    y_fat: Tensor  # (B,) in (0,1)
    y_aux: Tensor | None  # (B, 3) standardized-target regression
    face_coding: Tensor | None  # (B, 2048)
    metadata_coding: Tensor | None  # (B, c_mc)
    fusion: Tensor  # (B, mlp1_input)


def _layer_plan(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) order for parameters; also the codec order."""
    plan: list[tuple[str, tuple[int, ...]]] = []
    if config.wants_images:
        cin = 3
        for i, cout in enumerate(CONV_CHANNELS, start=1):
            plan.append((f"conv{i}_w", (3, 3, cin, cout)))
            plan.append((f"conv{i}_b", (cout,)))
            cin = cout
        plan.append(("proj_w", (CONV_CHANNELS[-1], FACE_DIM)))
        plan.append(("proj_b", (FACE_DIM,)))
    if config.mode == "indicator":
        widths = (config.c_mc,) + tuple(config.indicator_hidden) + (1,)
        prefix = "ind"
    else:
        widths = (config.mlp1_input,) + MLP1_HIDDEN + (1,)
        prefix = "mlp1"
    for i in range(len(widths) - 1):
        plan.append((f"{prefix}_{i}_w", (widths[i], widths[i + 1])))
        plan.append((f"{prefix}_{i}_b", (widths[i + 1],)))
    if config.aux_active:
        widths = (FACE_DIM,) + MLP2_HIDDEN + (AUX_DIM,)
        for i in range(len(widths) - 1):
            plan.append((f"mlp2_{i}_w", (widths[i], widths[i + 1])))
            plan.append((f"mlp2_{i}_b", (widths[i + 1],)))
    return plan


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor], stats: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.stats = stats

    # ---- construction ----------------------------------------------------
    @classmethod
    def init(cls, config: ModelConfig, seed: "int | np.random.Generator" = 0) -> "Model":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        for name, shape in _layer_plan(config):
            if name.endswith("_b"):
                data = np.zeros(shape)
            elif name.startswith("conv"):
                fan_in = shape[0] * shape[1] * shape[2]
                data = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
            elif name.startswith("proj") or _is_output_layer(name, config):
                data = rng.normal(0.0, np.sqrt(1.0 / shape[0]), shape)
            else:
                data = rng.normal(0.0, np.sqrt(2.0 / shape[0]), shape)
            params[name] = Tensor(data, requires_grad=True)
        stats = {
            "meta_mean": np.zeros(config.c_mc),
            "meta_sd": np.ones(config.c_mc),
            "aux_mean": np.zeros(AUX_DIM),
            "aux_sd": np.ones(AUX_DIM),
        }
        return cls(config, params, stats)

    @property
    def indicator_names(self) -> tuple[str, ...]:
        return self.config.indicators

    @property
    def input_means(self) -> np.ndarray:
        """Training-split means of the indicator columns, in raw units."""
        return self.stats["meta_mean"]

    def fit_standardization(self, meta_rows: np.ndarray | None, aux_rows: np.ndarray | None) -> None:
        """Freeze standardization stats from the training split (sd floor 1e-8)."""
        if meta_rows is not None:
            meta_rows = np.asarray(meta_rows, dtype=np.float64)
            self.stats["meta_mean"] = meta_rows.mean(axis=0)
            self.stats["meta_sd"] = np.maximum(meta_rows.std(axis=0), 1e-8)
        if aux_rows is not None:
            aux_rows = np.asarray(aux_rows, dtype=np.float64)
            self.stats["aux_mean"] = aux_rows.mean(axis=0)
            self.stats["aux_sd"] = np.maximum(aux_rows.std(axis=0), 1e-8)

    def standardize_aux(self, aux_rows: np.ndarray) -> np.ndarray:
        return (np.asarray(aux_rows, dtype=np.float64) - self.stats["aux_mean"]) / self.stats["aux_sd"]

    # ---- forward pieces ----------------------------------------------------
    def encode_metadata(self, rows: np.ndarray) -> Tensor:
        """Standardize raw indicator rows with the frozen training stats."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.config.c_mc:
            raise DimensionError(
                f"metadata rows must be (B, {self.config.c_mc}), got {rows.shape}"
            )
        z = (rows - self.stats["meta_mean"]) / self.stats["meta_sd"]
        return Tensor(z)

    def encode_image(self, images: np.ndarray, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Five stride-2 conv blocks, global average pooling, then the 1x1
        projection to the 2048-dim face code."""
        images = np.asarray(images, dtype=np.float64)
        s = self.config.image_size
        if images.ndim != 4 or images.shape[1:] != (s, s, 3):
            raise DimensionError(f"images must be (B, {s}, {s}, 3), got {images.shape}")
        x = Tensor(images)
        for i in range(1, len(CONV_CHANNELS) + 1):
            x = T.conv2d(x, self.params[f"conv{i}_w"], stride=2, padding=1)
            x = (x + self.params[f"conv{i}_b"]).relu()
        x = T.global_avg_pool(x)  # (B, 1, 1, 128)
        x = x.reshape(images.shape[0], CONV_CHANNELS[-1])
        return x @ self.params["proj_w"] + self.params["proj_b"]

    def _mlp(
        self,
        x: Tensor,
        prefix: str,
        n_layers: int,
        train: bool,
        rng: np.random.Generator | None,
    ) -> Tensor:
        for i in range(n_layers):
            x = x @ self.params[f"{prefix}_{i}_w"] + self.params[f"{prefix}_{i}_b"]
            if i < n_layers - 1:
                x = x.relu()
                if train and self.config.dropout > 0.0:
                    x = T.dropout(x, self.config.dropout, rng=rng, training=True)
        return x

    def _mlp1_layers(self) -> int:
        if self.config.mode == "indicator":
            return len(self.config.indicator_hidden) + 1
        return len(MLP1_HIDDEN) + 1

    def forward(
        self,
        images: np.ndarray | None = None,
        meta_rows: np.ndarray | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> ModelOutput:
        cfg = self.config
        face = meta = None
        if cfg.wants_images:
            if images is None:
                raise DataError(f"mode {cfg.mode!r} requires images")
            face = self.encode_image(images, train=train, rng=rng)
        if cfg.mode in ("metadata", "multimodal", "indicator"):
            if meta_rows is None:
                raise DataError(f"mode {cfg.mode!r} requires metadata rows")
            meta = self.encode_metadata(meta_rows)
        if cfg.mode == "multimodal":
            fusion = T.concat([face, meta], axis=1)  # face first, metadata second
        elif cfg.mode == "image":
            fusion = face
        else:
            fusion = meta

        prefix = "ind" if cfg.mode == "indicator" else "mlp1"
        logits = self._mlp(fusion, prefix, self._mlp1_layers(), train, rng)
        y_fat = logits.reshape(logits.shape[0]).sigmoid()

        y_aux = None
        if cfg.aux_active:
            y_aux = self._mlp(face, "mlp2", len(MLP2_HIDDEN) + 1, train, rng)
        return ModelOutput(y_fat=y_fat, y_aux=y_aux, face_coding=face, metadata_coding=meta, fusion=fusion)

    # ---- batched inference -------------------------------------------------
    def predict_scores(
        self,
        images: np.ndarray | None = None,
        meta_rows: np.ndarray | None = None,
        batch: int = 64,
    ) -> np.ndarray:
        """Eval-mode y_fat for a whole split, computed in batches."""
        n = len(images) if images is not None else len(meta_rows)
        out = np.empty(n, dtype=np.float64)
        for lo in range(0, n, batch):
            hi = min(lo + batch, n)
            result = self.forward(
                images=None if images is None else images[lo:hi],
                meta_rows=None if meta_rows is None else meta_rows[lo:hi],
                train=False,
            )
            out[lo:hi] = result.y_fat.data
        return out

    def predict_rows(self, rows: np.ndarray) -> np.ndarray:
        """Score raw indicator rows (metadata-style modes only); the batched
        entry point used by Shapley value functions."""
        if self.config.wants_images:
            raise ConfigError(f"predict_rows is metadata-only; model mode is {self.config.mode!r}")
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.config.c_mc:
            raise DimensionError(f"rows must be (M, {self.config.c_mc}), got {rows.shape}")
        return self.predict_scores(meta_rows=rows, batch=65536)

    # ---- compatibility guard -------------------------------------------------
    def validate_for(self, mode: str, indicators: tuple[str, ...]) -> None:
        """Raise if this model cannot serve the requested configuration."""
        if mode != self.config.mode:
            raise DimensionError(
                f"checkpoint mode {self.config.mode!r} cannot serve mode {mode!r}"
            )
        if tuple(indicators) != self.config.indicators:
            want = len(indicators)
            have = self.config.c_mc
            raise DimensionError(
                f"checkpoint indicator set {list(self.config.indicators)} (mlp1 input "
                f"{self.config.mlp1_input}) does not match requested {list(indicators)} "
                f"(mlp1 input {FACE_DIM + want if self.config.wants_images else want})"
            )


def _is_output_layer(name: str, config: ModelConfig) -> bool:
    if config.mode == "indicator":
        last1 = len(config.indicator_hidden)
        if name == f"ind_{last1}_w":
            return True
    elif name == f"mlp1_{len(MLP1_HIDDEN)}_w":
        return True
    return name == f"mlp2_{len(MLP2_HIDDEN)}_w"


def joint_loss(
    y_fat: Tensor,
    labels: np.ndarray,
    y_aux: Tensor | None,
    aux_targets: np.ndarray | None,
    alpha: float,
) -> Tensor:
    """L = alpha * BCE(y_fat, label) + (1 - alpha) * MSE(y_aux, targets).
    Without an aux head the loss is the plain BCE term."""
    if not (0.0 <= alpha <= 1.0):
        raise ParameterError(f"alpha must be in [0, 1], got {alpha}")
    bce = T.bce_mean(y_fat, labels)
    if y_aux is None:
        return bce
    if aux_targets is None:
        raise DataError("aux head is active but no aux targets were given")
    mse = T.mse_mean(y_aux, aux_targets)
    return alpha * bce + (1.0 - alpha) * mse


# ---- checkpoint codec ---------------------------------------------------------


def _canonical_params(model: Model) -> list[tuple[str, Tensor]]:
    return [(name, model.params[name]) for name, _ in _layer_plan(model.config)]


def save_model(model: Model, path: "str | Path") -> None:
    """Binary checkpoint: magic, version u32, count u32, then per parameter
    (name length u32, UTF-8 name, rank u32, dims u32 each, float64
    little-endian data) in canonical order. The model config and
    standardization stats go to a `<path>.json` sidecar."""
    path = Path(path)
    entries = _canonical_params(model)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, tensor in entries:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(tensor.data, dtype="<f8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    sidecar = {
        "config": model.config.to_dict(),
        "stats": {k: list(v) for k, v in model.stats.items()},
        "format_version": CHECKPOINT_VERSION,
    }
    Path(f"{path}.json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")


def load_model(path: "str | Path") -> Model:
    path = Path(path)
    sidecar_path = Path(f"{path}.json")
    if not sidecar_path.exists():
        raise FormatError(f"{sidecar_path}: missing checkpoint config sidecar")
    try:
        sidecar = json.loads(sidecar_path.read_text())
        config = ModelConfig.from_dict(sidecar["config"])
        stats = {k: np.asarray(v, dtype=np.float64) for k, v in sidecar["stats"].items()}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{sidecar_path}: invalid checkpoint config ({exc})") from exc

    expected = _layer_plan(config)
    blob = path.read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    off = 4

    def take(fmt: str) -> tuple:
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    version, count = take("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if count != len(expected):
        raise FormatError(f"{path}: expected {len(expected)} parameters, found {count}")
    params: dict[str, Tensor] = {}
    for exp_name, exp_shape in expected:
        (name_len,) = take("<I")
        if off + name_len > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        if name != exp_name:
            raise FormatError(f"{path}: parameter order mismatch ({name!r} where {exp_name!r} expected)")
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        if tuple(shape) != tuple(exp_shape):
            raise FormatError(f"{path}: parameter {name!r} has shape {shape}, expected {exp_shape}")
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 8 * n_items
        if off + nbytes > len(blob):
            raise FormatError(f"{path}: truncated checkpoint data for {name!r}")
        data = np.frombuffer(blob, dtype="<f8", count=n_items, offset=off).reshape(shape)
        off += nbytes
        params[name] = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes after last parameter")
    return Model(config, params, stats)
