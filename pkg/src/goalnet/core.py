"""Domain types, coordinate conventions and configuration shared across goalnet.

Coordinates live in original-video pixel space everywhere except inside the
networks, which work on a heatmap grid.  Grid coordinates are cell indices:
the centre of cell ``(col, row)`` has grid coordinate ``(col, row)``.  The
pixel -> grid map is ``u = x * scale_x - 0.5`` so that every pixel of the
frame, including its border, lands inside the grid.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

FPS = 30

NORM_KINDS = ("none", "batch", "group", "layer")
ACT_KINDS = ("relu", "leaky_relu", "prelu", "silu", "gelu")
DOWNSAMPLE_KINDS = ("stride2conv", "maxpool", "avgpool")
BACKBONES = ("stub", "convnext_tiny")


class ConfigError(ValueError):
    """Invalid configuration value.  ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class PixelBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(np.isfinite((self.x1, self.y1, self.x2, self.y2))):
            raise ValueError(f"non-finite box {self}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"box needs x2 > x1 and y2 > y1, got {self}")

    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    def wh(self) -> tuple[float, float]:
        return (self.x2 - self.x1, self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_center_wh(cls, center, wh) -> "PixelBox":
        (cx, cy), (w, h) = center, wh
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    def clamped(self, width: float, height: float) -> "PixelBox":
        return PixelBox(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )


def box_center_wh(box: PixelBox) -> tuple[tuple[float, float], tuple[float, float]]:
    return box.center(), box.wh()


def box_from_center_wh(center, wh) -> PixelBox:
    return PixelBox.from_center_wh(center, wh)


def boxes_to_array(boxes: Sequence[PixelBox]) -> np.ndarray:
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)


def corners_to_center_wh(arr: np.ndarray) -> np.ndarray:
    """``(..., 4)`` corner array -> ``(..., 4)`` array of (cx, cy, w, h)."""
    arr = np.asarray(arr, dtype=np.float64)
    out = np.empty_like(arr)
    out[..., 0] = (arr[..., 0] + arr[..., 2]) / 2
    out[..., 1] = (arr[..., 1] + arr[..., 3]) / 2
    out[..., 2] = arr[..., 2] - arr[..., 0]
    out[..., 3] = arr[..., 3] - arr[..., 1]
    return out


def center_wh_to_corners(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    out = np.empty_like(arr)
    out[..., 0] = arr[..., 0] - arr[..., 2] / 2
    out[..., 1] = arr[..., 1] - arr[..., 3] / 2
    out[..., 2] = arr[..., 0] + arr[..., 2] / 2
    out[..., 3] = arr[..., 1] + arr[..., 3] / 2
    return out


@dataclass(frozen=True)
class BoxTrack:
    boxes: tuple[PixelBox, ...]
    frame_ids: tuple[int, ...]
    track_id: str = ""
    video_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "frame_ids", tuple(int(f) for f in self.frame_ids))
        if len(self.boxes) != len(self.frame_ids):
            raise ValueError(
                f"track {self.track_id!r}: {len(self.boxes)} boxes vs {len(self.frame_ids)} frame ids"
            )
        steps = np.diff(self.frame_ids)
        if len(steps) and not np.all(steps == 1):
            raise ValueError(f"track {self.track_id!r}: frame ids must be contiguous")

    def __len__(self) -> int:
        return len(self.boxes)

    def as_array(self) -> np.ndarray:
        return boxes_to_array(self.boxes)

    def centers(self) -> np.ndarray:
        return corners_to_center_wh(self.as_array())[:, :2]

    @classmethod
    def from_array(cls, arr, start_frame: int, track_id: str = "", video_id: str = "") -> "BoxTrack":
        arr = np.asarray(arr, dtype=np.float64).reshape(-1, 4)
        boxes = tuple(PixelBox(*map(float, row)) for row in arr)
        return cls(boxes, tuple(range(start_frame, start_frame + len(arr))), track_id, video_id)


@dataclass(frozen=True)
class Sample:
    """One observation/prediction window of a single pedestrian."""

    observed: BoxTrack
    future: BoxTrack
    scene_image_ref: str
    image_size: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if len(self.observed) == 0 or len(self.future) == 0:
            raise ValueError("observed and future tracks must be nonempty")
        if self.observed.frame_ids[-1] + 1 != self.future.frame_ids[0]:
            raise ValueError("future must start right after the last observed frame")
        w, h = self.image_size
        for box in self.observed.boxes + self.future.boxes:
            if box.x1 < 0 or box.y1 < 0 or box.x2 > w or box.y2 > h:
                raise ValueError(f"box {box} outside the {w}x{h} frame")

    @property
    def obs_len(self) -> int:
        return len(self.observed)

    @property
    def pred_len(self) -> int:
        return len(self.future)


@dataclass(frozen=True)
class GridSpec:
    scene_w: int
    scene_h: int
    grid_w: int
    grid_h: int
    scale_x: float
    scale_y: float
    image_w: int = 0
    image_h: int = 0

    @property
    def downsample_factor(self) -> int:
        return self.scene_w // self.grid_w

    def to_grid(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return np.stack([xy[..., 0] * self.scale_x - 0.5, xy[..., 1] * self.scale_y - 0.5], axis=-1)

    def to_pixels(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        return np.stack([(uv[..., 0] + 0.5) / self.scale_x, (uv[..., 1] + 0.5) / self.scale_y], axis=-1)

    def in_bounds(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        u, v = uv[..., 0], uv[..., 1]
        return (u >= -0.5) & (u < self.grid_w - 0.5) & (v >= -0.5) & (v < self.grid_h - 0.5)


def make_grid_spec(image_size, scene_size, downsample_factor: int) -> GridSpec:
    (iw, ih), (sw, sh) = image_size, scene_size
    for name, v in (("image_w", iw), ("image_h", ih), ("scene_w", sw), ("scene_h", sh),
                    ("downsample_factor", downsample_factor)):
        if int(v) != v or v <= 0:
            raise ConfigError(name, f"must be a positive integer, got {v!r}")
    if sw % downsample_factor or sh % downsample_factor:
        raise ConfigError(
            "downsample_factor",
            f"scene size {sw}x{sh} not divisible by {downsample_factor}",
        )
    gw, gh = sw // downsample_factor, sh // downsample_factor
    return GridSpec(
        scene_w=int(sw), scene_h=int(sh), grid_w=gw, grid_h=gh,
        scale_x=sw / (iw * downsample_factor), scale_y=sh / (ih * downsample_factor),
        image_w=int(iw), image_h=int(ih),
    )


@dataclass(frozen=True)
class ModelConfig:
    encoder_channels: tuple[int, ...] = (32, 32, 64, 64, 64, 128)
    norm_kind: str = "layer"
    act_kind: str = "relu"
    downsample_kind: str = "stride2conv"
    use_attention_gate: bool = True
    use_aspp: bool = True
    use_scene_features: bool = True
    scene_feature_channels: int = 6
    K_modes: int = 20
    obs_len: int = 15
    pred_len: int = 45
    heatmap_sigma: float = 4.0
    aspp_rates: tuple[int, ...] = (1, 2, 4, 8)
    backbone: str = "stub"
    bbox_hidden: int = 128
    bbox_blocks: int = 3
    bbox_dropout: float = 0.1
    early_dropout_fraction: float = 0.2
    mass_threshold: float = 0.05
    decode_temperature: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "aspp_rates", tuple(self.aspp_rates))
        self.validate()

    def validate(self) -> None:
        for name in ("obs_len", "pred_len", "K_modes", "scene_feature_channels",
                     "bbox_hidden", "bbox_blocks"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(name, f"must be an integer >= 1, got {v!r}")
        if len(self.encoder_channels) == 0:
            raise ConfigError("encoder_channels", "must be nonempty")
        if any(int(c) != c or c <= 0 for c in self.encoder_channels):
            raise ConfigError("encoder_channels", f"all entries must be positive, got {self.encoder_channels}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError("norm_kind", f"expected one of {NORM_KINDS}, got {self.norm_kind!r}")
        if self.act_kind not in ACT_KINDS:
            raise ConfigError("act_kind", f"expected one of {ACT_KINDS}, got {self.act_kind!r}")
        if self.downsample_kind not in DOWNSAMPLE_KINDS:
            raise ConfigError(
                "downsample_kind", f"expected one of {DOWNSAMPLE_KINDS}, got {self.downsample_kind!r}"
            )
        if self.backbone not in BACKBONES:
            raise ConfigError("backbone", f"expected one of {BACKBONES}, got {self.backbone!r}")
        for name in ("use_attention_gate", "use_aspp", "use_scene_features"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(name, "must be a bool")
        if not self.heatmap_sigma > 0:
            raise ConfigError("heatmap_sigma", "must be > 0")
        if not self.decode_temperature > 0:
            raise ConfigError("decode_temperature", "must be > 0")
        if not 0 <= self.mass_threshold < 1:
            raise ConfigError("mass_threshold", "must be in [0, 1)")
        if not 0 <= self.bbox_dropout < 1:
            raise ConfigError("bbox_dropout", "must be in [0, 1)")
        if not 0 <= self.early_dropout_fraction <= 1:
            raise ConfigError("early_dropout_fraction", "must be in [0, 1]")
        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            raise ConfigError("aspp_rates", "must be nonempty positive dilations")

    @property
    def n_stages(self) -> int:
        return len(self.encoder_channels)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["aspp_rates"] = list(self.aspp_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown ModelConfig field")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class RunConfig:
    """Everything a config file may set: model, grid and training recipe."""

    model: ModelConfig = field(default_factory=ModelConfig)
    scene_w: int = 640
    scene_h: int = 384
    downsample_factor: int = 4
    batch_size: int = 8
    lr: float = 1e-4
    epochs: int = 50
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    early_stop_patience: int = 10
    goal_hint_prob: float = 0.5
    stride: int = 15
    nll_samples: int = 2000
    seed: int = 0

    def to_flat(self) -> dict[str, Any]:
        d = self.model.to_dict()
        d.update({f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"})
        return d

    @classmethod
    def from_flat(cls, d: dict[str, Any]) -> "RunConfig":
        model_keys = {f.name for f in fields(ModelConfig)}
        run_keys = {f.name for f in fields(cls)} - {"model"}
        unknown = set(d) - model_keys - run_keys
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config key")
        model = ModelConfig(**{k: v for k, v in d.items() if k in model_keys})
        return cls(model=model, **{k: v for k, v in d.items() if k in run_keys})


def load_config(path) -> RunConfig:
    """Read a flat YAML (or JSON) key-value config; missing keys take defaults."""
    import yaml

    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config file must be a key-value mapping")
    return RunConfig.from_flat(data)


def dump_config(cfg: RunConfig, path) -> None:
    import yaml

    Path(path).write_text(yaml.safe_dump(cfg.to_flat(), sort_keys=True), encoding="utf-8")
