"""Scene feature extraction: RGB frame -> per-channel spatial probability maps on the heatmap grid."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .core import GridSpec, ModelConfig, ShapeError
from .layers import ChannelLayerNorm, ConvNormAct

BACKBONE_STRIDE = 32


@dataclass
class SceneFeatureMap:
    data: torch.Tensor  # (C_s, H_g, W_g)
    grid: GridSpec


class StubBackbone(nn.Module):
    """Four conv stages reaching stride 32; a CPU-friendly stand-in for ConvNeXt-T."""

    def __init__(self, channels=(16, 32, 64, 128)):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, channels[0], 4, stride=4), ChannelLayerNorm(channels[0]))
        stages = [ConvNormAct(channels[0], channels[0])]
        for cin, cout in zip(channels[:-1], channels[1:]):
            stages.append(nn.Sequential(nn.Conv2d(cin, cout, 2, stride=2), ConvNormAct(cout, cout)))
        self.stages = nn.ModuleList(stages)
        self.out_channels = channels[-1]

    def forward(self, x):
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return x


def convnext_tiny_backbone() -> nn.Module:
    from torchvision.models import convnext_tiny

    features = convnext_tiny(weights=None).features
    features.out_channels = 768
    return features


class SceneFeatureNet(nn.Module):
    """Backbone encoder + nearest-upsample conv decoder + spatial softmax."""

    def __init__(self, out_channels: int = 6, backbone: str = "stub", downsample_factor: int = 4):
        super().__init__()
        n_up = math.log2(BACKBONE_STRIDE / downsample_factor)
        if n_up != int(n_up) or n_up < 0:
            raise ValueError(f"downsample_factor must be a power of two <= {BACKBONE_STRIDE}")
        self.encoder = StubBackbone() if backbone == "stub" else convnext_tiny_backbone()
        c = self.encoder.out_channels
        ups = []
        for _ in range(int(n_up)):
            ups += [nn.Upsample(scale_factor=2, mode="nearest"), ConvNormAct(c, c // 2)]
            c //= 2
        self.decoder = nn.Sequential(*ups)
        self.head = nn.Conv2d(c, out_channels, 1)
        self.downsample_factor = downsample_factor

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` -> ``(B, C_s, H/ds, W/ds)`` with every channel summing to 1."""
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) image batch, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
            raise ShapeError(f"image size {w}x{h} must be a multiple of {BACKBONE_STRIDE}")
        x = self.head(self.decoder(self.encoder(image)))
        b, c = x.shape[:2]
        return torch.softmax(x.reshape(b, c, -1), dim=-1).reshape(x.shape)


def build_scene_net(config: ModelConfig, downsample_factor: int = 4) -> SceneFeatureNet:
    return SceneFeatureNet(config.scene_feature_channels, config.backbone, downsample_factor)


def extract_features(image: torch.Tensor, model: SceneFeatureNet, grid: GridSpec) -> SceneFeatureMap:
    if tuple(image.shape) != (3, grid.scene_h, grid.scene_w):
        raise ShapeError(f"image {tuple(image.shape)} does not match scene size {(3, grid.scene_h, grid.scene_w)}")
    out = model(image.unsqueeze(0))[0]
    if tuple(out.shape[1:]) != (grid.grid_h, grid.grid_w):
        raise ShapeError(f"feature map {tuple(out.shape[1:])} misaligned with grid")
    return SceneFeatureMap(out, grid)


_COUNTED = (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)


def count_parameters_and_flops(model: nn.Module, input_size=None, example_inputs=None) -> tuple[int, int]:
    """Exact parameter count and conv/linear FLOPs.

    Every output element costs one multiply-accumulate per weight in its
    receptive field plus one for the bias when present; a MAC is 2 FLOPs.

    Pass ``input_size`` (a full input shape) or ``example_inputs`` (a tuple of
    forward arguments).  FLOPs are 0 when neither is given.
    """
    params = sum(p.numel() for p in model.parameters())
    if input_size is None and example_inputs is None:
        return params, 0
    macs = 0

    def hook(mod, inp, out):
        nonlocal macs
        bias = out.numel() if getattr(mod, "bias", None) is not None else 0
        if isinstance(mod, nn.Linear):
            macs += out.numel() * mod.in_features + bias
        elif isinstance(mod, nn.ConvTranspose2d):
            macs += inp[0].numel() * mod.out_channels * math.prod(mod.kernel_size) // mod.groups + bias
        else:
            macs += out.numel() * (mod.in_channels // mod.groups) * math.prod(mod.kernel_size) + bias

    handles = [m.register_forward_hook(hook) for m in model.modules() if isinstance(m, _COUNTED)]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if example_inputs is None:
                example_inputs = (torch.zeros(input_size),)
            model(*example_inputs)
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return params, 2 * macs
