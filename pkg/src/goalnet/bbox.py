"""Box-size head: predicts future widths/heights so centre tracks become box tracks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import GridSpec, ModelConfig, NumericError, PixelBox, corners_to_center_wh


def inverse_softplus(y: torch.Tensor) -> torch.Tensor:
    return y + torch.log(-torch.expm1(-y))


class EarlyDropout(nn.Module):
    """Dropout that only fires while ``enabled``; the schedule turns it off after a cutoff step."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.enabled = True

    def forward(self, x):
        return F.dropout(x, self.p, self.training and self.enabled and self.p > 0)


class PreActBlock(nn.Module):
    def __init__(self, dim: int, dropout: EarlyDropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.drop = dropout
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x):
        h = self.fc1(F.relu(self.norm1(x)))
        h = self.fc2(self.drop(F.relu(self.norm2(h))))
        return x + h


class BBoxNet(nn.Module):
    """Residual MLP with pre-activation blocks and early dropout.

    Inputs are normalised by the frame size: observed ``(B, obs_len, 4)``
    (cx, cy, w, h) and future centres ``(B, pred_len, 2)``.  The output
    ``(B, pred_len, 2)`` widths/heights are
    ``softplus(head(features) + softplus^-1(last observed w, h))`` and hence
    strictly positive; a zero head reproduces the last observed size.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.obs_len, self.pred_len = config.obs_len, config.pred_len
        dim = config.bbox_hidden
        self.stem = nn.Linear(config.obs_len * 4 + config.pred_len * 2, dim)
        self.dropout = EarlyDropout(config.bbox_dropout)
        self.blocks = nn.ModuleList(PreActBlock(dim, self.dropout) for _ in range(config.bbox_blocks))
        self.final_norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, config.pred_len * 2)
        self.early_dropout_fraction = config.early_dropout_fraction
        self.cutoff_step = 0

    def configure_schedule(self, total_steps: int) -> None:
        self.cutoff_step = int(round(self.early_dropout_fraction * total_steps))

    def set_step(self, step: int) -> None:
        self.dropout.enabled = step < self.cutoff_step

    def forward(self, observed: torch.Tensor, future_centers: torch.Tensor) -> torch.Tensor:
        b = observed.shape[0]
        x = torch.cat([observed.reshape(b, -1), future_centers.reshape(b, -1)], dim=1)
        h = self.stem(x)
        for block in self.blocks:
            h = block(h)
        z = self.head(F.relu(self.final_norm(h))).reshape(b, self.pred_len, 2)
        anchor = inverse_softplus(observed[:, -1:, 2:4].clamp_min(1e-6))
        return F.softplus(z + anchor)


def build_bbox_net(config: ModelConfig) -> BBoxNet:
    return BBoxNet(config)


@dataclass
class BboxNetInput:
    observed_flat: np.ndarray  # (obs_len, 4) normalised cx, cy, w, h
    future_centers_flat: np.ndarray  # (pred_len, 2) normalised

    def __post_init__(self):
        self.observed_flat = np.asarray(self.observed_flat, dtype=np.float64)
        self.future_centers_flat = np.asarray(self.future_centers_flat, dtype=np.float64)
        if not (np.isfinite(self.observed_flat).all() and np.isfinite(self.future_centers_flat).all()):
            raise ValueError("bbox inputs must be finite")
        if (self.observed_flat[:, 2:] <= 0).any():
            raise ValueError("observed widths/heights must be positive")

    @classmethod
    def from_pixels(cls, observed_corners, future_centers, image_size) -> "BboxNetInput":
        scale = np.array(image_size, dtype=np.float64)
        obs = corners_to_center_wh(observed_corners) / np.tile(scale, 2)
        return cls(obs, np.asarray(future_centers, dtype=np.float64) / scale)


def predict_bbox_track(model, inp: BboxNetInput, grid: GridSpec) -> list[PixelBox]:
    """Centres + predicted sizes -> pixel boxes."""
    obs = torch.as_tensor(inp.observed_flat, dtype=torch.float32)[None]
    fut = torch.as_tensor(inp.future_centers_flat, dtype=torch.float32)[None]
    with torch.no_grad():
        wh = model(obs, fut)[0].double().numpy()
    if not np.isfinite(wh).all():
        raise NumericError("size head produced non-finite output")
    scale = np.array([grid.image_w, grid.image_h], dtype=np.float64)
    centers = inp.future_centers_flat * scale
    wh = wh * scale
    return [PixelBox.from_center_wh(c, s) for c, s in zip(centers, wh)]
