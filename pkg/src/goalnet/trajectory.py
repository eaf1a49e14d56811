"""Goal-conditioned U-Net over observed-trajectory heatmaps and scene features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, GridSpec, ModelConfig, ShapeError
from .heatmap import GoalSet, render_gaussians, sample_secondary_goals, spatial_soft_argmax, unwrap
from .layers import ASPP, AttentionGate, ConvNormAct, DoubleConv, make_downsample


class TrajectoryNet(nn.Module):
    """Encoder-decoder with stride-2 (or pooling) downsampling, ASPP centre and gated skips.

    Input channels: ``obs_len`` trajectory heatmaps, the scene channels
    (learned scene features, or raw RGB pooled to the grid when scene features
    are disabled) and one goal-conditioning channel.  Output: ``pred_len``
    per-timestep logit maps.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        ch = config.encoder_channels
        norm, act = config.norm_kind, config.act_kind
        self.scene_channels = config.scene_feature_channels if config.use_scene_features else 3
        self.in_channels = config.obs_len + self.scene_channels + 1
        self.out_channels = config.pred_len

        self.down = nn.ModuleList()
        self.encoder = nn.ModuleList()
        prev = self.in_channels
        for i, c in enumerate(ch):
            if i > 0:
                self.down.append(make_downsample(config.downsample_kind, prev))
            if i == len(ch) - 1 and config.use_aspp:
                self.encoder.append(nn.Sequential(ConvNormAct(prev, c, norm, act),
                                                  ASPP(c, c, config.aspp_rates, norm, act)))
            else:
                self.encoder.append(DoubleConv(prev, c, norm, act))
            prev = c

        self.up = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for i in range(len(ch) - 1, 0, -1):
            self.up.append(ConvNormAct(ch[i], ch[i - 1], norm, act))
            if config.use_attention_gate:
                self.gates.append(AttentionGate(ch[i - 1], ch[i - 1], max(ch[i - 1] // 2, 1)))
            self.decoder.append(DoubleConv(2 * ch[i - 1], ch[i - 1], norm, act))
        self.head = nn.Conv2d(ch[0], config.pred_len, 1)
        # start from uniform spatial distributions
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def encoder_channels(self) -> list[int]:
        return list(self.config.encoder_channels)

    def check_grid(self, height: int, width: int) -> None:
        f = 2 ** (len(self.config.encoder_channels) - 1)
        if height % f or width % f:
            raise ShapeError(f"grid {width}x{height} not divisible by {f}")

    def forward(self, obs: torch.Tensor, scene: torch.Tensor, goal: torch.Tensor) -> torch.Tensor:
        h, w = obs.shape[-2:]
        self.check_grid(h, w)
        if scene.shape[1] != self.scene_channels or goal.shape[1] != 1 or obs.shape[1] != self.config.obs_len:
            raise ShapeError(
                f"channels obs/scene/goal = {obs.shape[1]}/{scene.shape[1]}/{goal.shape[1]}, "
                f"expected {self.config.obs_len}/{self.scene_channels}/1"
            )
        if self.config.use_scene_features:
            # scene maps sum to 1 over space; rescale so a uniform map reads as ones
            scene = scene * (h * w)
        x = torch.cat([obs, scene, goal], dim=1)
        skips = []
        for i, block in enumerate(self.encoder):
            if i > 0:
                x = self.down[i - 1](x)
            x = block(x)
            skips.append(x)
        skips.pop()
        for j, (up, dec) in enumerate(zip(self.up, self.decoder)):
            skip = skips.pop()
            x = up(F.interpolate(x, size=skip.shape[-2:], mode="nearest"))
            if self.gates:
                skip = self.gates[j](x, skip)
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)


def build_trajectory_net(config: ModelConfig, grid: GridSpec | None = None) -> TrajectoryNet:
    if grid is not None:
        f = 2 ** (config.n_stages - 1)
        if grid.grid_h % f or grid.grid_w % f:
            raise ConfigError("encoder_channels",
                              f"grid {grid.grid_w}x{grid.grid_h} not divisible by 2^(stages-1) = {f}")
        net = TrajectoryNet(config)
        # start every cell at the prior odds of a target cell; the map stays spatially uniform
        mass = min(2 * np.pi * config.heatmap_sigma ** 2 / (grid.grid_h * grid.grid_w), 0.5)
        nn.init.constant_(net.head.bias, float(np.log(mass / (1 - mass))))
        return net
    return TrajectoryNet(config)


@dataclass
class TrajectoryNetOutput:
    future_logits: torch.Tensor  # (pred_len, H, W)
    goal_map: torch.Tensor  # (H, W) probabilities of the final timestep
    decoded_centers: torch.Tensor  # (pred_len, 2) grid coords


@dataclass
class PredictionBundle:
    modes: np.ndarray  # (K, pred_len, 2) pixel centres
    goal_set: GoalSet
    per_mode_bbox: np.ndarray | None = None  # (K, pred_len, 4) pixel corners
    degenerate: bool = False

    def __post_init__(self):
        self.modes = np.asarray(self.modes, dtype=np.float64)
        if self.modes.ndim != 3 or self.modes.shape[-1] != 2:
            raise ValueError(f"modes must be (K, T, 2), got {self.modes.shape}")
        if self.per_mode_bbox is not None:
            self.per_mode_bbox = np.asarray(self.per_mode_bbox, dtype=np.float64)
            if self.per_mode_bbox.shape != self.modes.shape[:2] + (4,):
                raise ValueError("per_mode_bbox must be (K, T, 4)")

    @property
    def k(self) -> int:
        return len(self.modes)


def goal_channel(goal_hint, height: int, width: int, sigma: float, dtype=torch.float32) -> torch.Tensor:
    """``(1, H, W)`` conditioning map: zeros, or a Gaussian at ``goal_hint`` (grid coords)."""
    if goal_hint is None:
        return torch.zeros(1, height, width, dtype=dtype)
    pt = torch.as_tensor(np.asarray(goal_hint, dtype=np.float64)).reshape(1, 2).to(dtype)
    return render_gaussians(pt, height, width, sigma)


def forward_single(model: TrajectoryNet, obs_heatmaps, scene, goal_hint=None,
                   temperature: float | None = None) -> TrajectoryNetOutput:
    cfg = model.config
    temperature = cfg.decode_temperature if temperature is None else temperature
    obs = unwrap(obs_heatmaps)
    scene = unwrap(scene)
    if obs.ndim != 3 or scene.ndim != 3 or obs.shape[-2:] != scene.shape[-2:]:
        raise ShapeError(f"obs {tuple(obs.shape)} and scene {tuple(scene.shape)} must be (C, H, W) on one grid")
    h, w = obs.shape[-2:]
    if goal_hint is not None:
        gx, gy = goal_hint
        if not (-0.5 <= gx < w - 0.5 and -0.5 <= gy < h - 0.5):
            raise ValueError(f"goal hint {goal_hint} outside the {w}x{h} grid")
    goal = goal_channel(goal_hint, h, w, cfg.heatmap_sigma, obs.dtype)
    logits = model(obs[None], scene[None], goal[None])[0]
    return _decode(logits, temperature)


def _decode(logits: torch.Tensor, temperature: float) -> TrajectoryNetOutput:
    h, w = logits.shape[-2:]
    goal_map = torch.softmax(logits[-1].reshape(-1) / temperature, 0).reshape(h, w)
    return TrajectoryNetOutput(logits, goal_map, spatial_soft_argmax(logits, temperature))


@torch.no_grad()
def predict_multimodal(model: TrajectoryNet, obs_heatmaps, scene, K: int, seed: int, grid: GridSpec,
                       goal_map_override=None) -> PredictionBundle:
    """Two-pass multi-modal prediction.

    Pass 1 predicts the goal map without a goal hint.  Its soft-argmax is the
    main goal; weighted K-means on the map yields ``K - 1`` secondary goals.
    Pass 2 re-runs the network once per goal with that goal as hint.  Mode 0
    is always the main-goal trajectory.  ``goal_map_override`` replaces the
    pass-1 goal map (a test hook).
    """
    cfg = model.config
    if K < 1:
        raise ValueError("K must be >= 1")
    obs = unwrap(obs_heatmaps)
    scene = unwrap(scene)
    h, w = obs.shape[-2:]
    if goal_map_override is None:
        goal_map = forward_single(model, obs, scene, None).goal_map
    else:
        goal_map = torch.as_tensor(np.asarray(goal_map_override, dtype=np.float64)).to(obs.dtype).reshape(h, w)
        goal_map = goal_map / goal_map.sum()
    main = tuple(float(v) for v in spatial_soft_argmax(goal_map, is_logits=False))
    flat = goal_map.reshape(-1)
    degenerate = bool(flat.max() >= 1.0 - 1e-6)
    if K > 1:
        sec = sample_secondary_goals(goal_map[None], K - 1, seed, cfg.mass_threshold, main=main)
        goal_set = GoalSet(main, sec.centroids, sec.masses, degenerate or sec.degenerate)
    else:
        goal_set = GoalSet(main, [], [], degenerate)
    goals = torch.tensor(goal_set.all_goals(), dtype=obs.dtype)
    goals[:, 0] = goals[:, 0].clamp(-0.5, w - 0.5 - 1e-6)
    goals[:, 1] = goals[:, 1].clamp(-0.5, h - 0.5 - 1e-6)
    goal_maps = render_gaussians(goals, h, w, cfg.heatmap_sigma).unsqueeze(1)
    # the main goal runs on its own so mode 0 is bit-identical for every K
    # (batch size can change float rounding inside the convolutions)
    logits = model(obs[None], scene[None], goal_maps[:1])
    if K > 1:
        rest = model(obs.expand(K - 1, -1, -1, -1), scene.expand(K - 1, -1, -1, -1), goal_maps[1:])
        logits = torch.cat([logits, rest])
    centers = spatial_soft_argmax(logits, cfg.decode_temperature)
    modes = grid.to_pixels(centers.double().numpy())
    return PredictionBundle(modes, goal_set, None, goal_set.degenerate)


@torch.no_grad()
def sample_trajectories(model: TrajectoryNet, obs_heatmaps, scene, n: int, seed: int, grid: GridSpec,
                        chunk: int = 64) -> np.ndarray:
    """``n`` pixel-space trajectories from goals drawn i.i.d. from the pass-1 goal map.

    Each goal is a cell sampled with its probability, jittered uniformly inside
    the cell, then decoded by a goal-conditioned pass.  Used for KDE-NLL.
    """
    cfg = model.config
    obs = unwrap(obs_heatmaps)
    scene = unwrap(scene)
    h, w = obs.shape[-2:]
    goal_map = forward_single(model, obs, scene, None).goal_map.double().numpy().reshape(-1)
    rng = np.random.default_rng(seed)
    cells = rng.choice(h * w, size=n, p=goal_map / goal_map.sum())
    goals = np.stack([cells % w, cells // w], axis=1) + rng.uniform(-0.5, 0.5, size=(n, 2))
    goals = np.clip(goals, -0.5, [w - 0.5 - 1e-6, h - 0.5 - 1e-6])
    out = []
    for start in range(0, n, chunk):
        g = torch.as_tensor(goals[start:start + chunk], dtype=obs.dtype)
        maps = render_gaussians(g, h, w, cfg.heatmap_sigma).unsqueeze(1)
        logits = model(obs.expand(len(g), -1, -1, -1), scene.expand(len(g), -1, -1, -1), maps)
        out.append(spatial_soft_argmax(logits, cfg.decode_temperature).double().numpy())
    return grid.to_pixels(np.concatenate(out))
