"""The full network (scene + trajectory + size head) and sample -> tensor encoding."""
from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .bbox import BBoxNet, build_bbox_net
from .core import GridSpec, ModelConfig, Sample, corners_to_center_wh, make_grid_spec
from .heatmap import render_gaussians
from .scene import SceneFeatureNet, build_scene_net
from .trajectory import TrajectoryNet, build_trajectory_net

IMAGENET_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
IMAGENET_STD = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)


def sub_seed(master: int, *tags) -> int:
    """Deterministic child seed for a (master seed, tag...) path."""
    words = [int(master) & 0xFFFFFFFF]
    for t in tags:
        words.append(zlib.crc32(t.encode()) if isinstance(t, str) else int(t) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


class GoalNet(nn.Module):
    def __init__(self, config: ModelConfig, grid: GridSpec):
        super().__init__()
        self.config = config
        self.grid = grid
        self.scene_net: SceneFeatureNet | None = (
            build_scene_net(config, grid.downsample_factor) if config.use_scene_features else None
        )
        self.traj_net: TrajectoryNet = build_trajectory_net(config, grid)
        self.bbox_net: BBoxNet = build_bbox_net(config)

    def scene_input(self, images: torch.Tensor) -> torch.Tensor:
        """Normalised RGB ``(B, 3, scene_h, scene_w)`` -> scene channels on the grid."""
        if self.scene_net is not None:
            return self.scene_net(images)
        return F.avg_pool2d(images, self.grid.downsample_factor)

    def namespaced_modules(self) -> dict[str, nn.Module]:
        mods = {"traj": self.traj_net, "bbox": self.bbox_net}
        if self.scene_net is not None:
            mods["scene"] = self.scene_net
        return mods


class SceneImageLoader:
    """Loads, resizes and normalises scene frames, with a small LRU cache."""

    def __init__(self, root, scene_size: tuple[int, int], cache_size: int = 512):
        self.root = Path(root) if root is not None else None
        self.scene_size = tuple(scene_size)
        self.cache_size = cache_size
        self._cache: OrderedDict[str, torch.Tensor] = OrderedDict()

    def __call__(self, ref: str) -> torch.Tensor:
        if ref in self._cache:
            self._cache.move_to_end(ref)
            return self._cache[ref]
        from PIL import Image

        path = Path(ref)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != self.scene_size:
                im = im.resize(self.scene_size, Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
        t = (torch.from_numpy(arr).permute(2, 0, 1) - IMAGENET_MEAN) / IMAGENET_STD
        self._cache[ref] = t.contiguous()
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return self._cache[ref]


@dataclass
class EncodedSample:
    obs_grid: np.ndarray  # (obs_len, 2)
    fut_grid: np.ndarray  # (pred_len, 2)
    obs_norm: np.ndarray  # (obs_len, 4) cx, cy, w, h / frame size
    fut_centers_norm: np.ndarray  # (pred_len, 2)
    fut_wh_norm: np.ndarray  # (pred_len, 2)
    image_ref: str
    grid: GridSpec


def encode_sample(sample: Sample, scene_size, downsample_factor: int) -> EncodedSample:
    grid = make_grid_spec(sample.image_size, scene_size, downsample_factor)
    scale = np.array(sample.image_size, dtype=np.float64)
    obs = corners_to_center_wh(sample.observed.as_array())
    fut = corners_to_center_wh(sample.future.as_array())
    return EncodedSample(
        obs_grid=grid.to_grid(obs[:, :2]),
        fut_grid=grid.to_grid(fut[:, :2]),
        obs_norm=obs / np.tile(scale, 2),
        fut_centers_norm=fut[:, :2] / scale,
        fut_wh_norm=fut[:, 2:] / scale,
        image_ref=sample.scene_image_ref,
        grid=grid,
    )


@dataclass
class Batch:
    obs_heatmaps: torch.Tensor  # (B, obs_len, H, W)
    images: torch.Tensor  # (B, 3, scene_h, scene_w)
    fut_grid: torch.Tensor  # (B, pred_len, 2)
    obs_norm: torch.Tensor
    fut_centers_norm: torch.Tensor
    fut_wh_norm: torch.Tensor


def make_batch(items: list[EncodedSample], loader: SceneImageLoader, sigma: float,
               device="cpu") -> Batch:
    grid = items[0].grid
    f32 = lambda key: torch.as_tensor(np.stack([getattr(it, key) for it in items]), dtype=torch.float32)
    obs_grid = f32("obs_grid")
    return Batch(
        obs_heatmaps=render_gaussians(obs_grid, grid.grid_h, grid.grid_w, sigma).to(device),
        images=torch.stack([loader(it.image_ref) for it in items]).to(device),
        fut_grid=f32("fut_grid").to(device),
        obs_norm=f32("obs_norm").to(device),
        fut_centers_norm=f32("fut_centers_norm").to(device),
        fut_wh_norm=f32("fut_wh_norm").to(device),
    )
