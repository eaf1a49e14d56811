"""Convolutional building blocks shared by the scene and trajectory networks."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis at every spatial position of an NCHW map."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        x = F.layer_norm(x.permute(0, 2, 3, 1), x.shape[1:2], self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


def make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "none":
        return nn.Identity()
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "group":
        # GN needs channels divisible by the group count
        groups = next(g for g in (8, 4, 2, 1) if channels % g == 0)
        return nn.GroupNorm(groups, channels)
    if kind == "layer":
        return ChannelLayerNorm(channels)
    raise ValueError(f"unknown norm kind {kind!r}")


def make_act(kind: str) -> nn.Module:
    if kind == "relu":
        return nn.ReLU()
    if kind == "leaky_relu":
        return nn.LeakyReLU(0.1)
    if kind == "prelu":
        return nn.PReLU()
    if kind == "silu":
        return nn.SiLU()
    if kind == "gelu":
        return nn.GELU()
    raise ValueError(f"unknown activation kind {kind!r}")


class ConvNormAct(nn.Sequential):
    def __init__(self, cin, cout, norm="layer", act="relu", kernel_size=3, stride=1, dilation=1):
        pad = dilation * (kernel_size - 1) // 2
        super().__init__(
            nn.Conv2d(cin, cout, kernel_size, stride=stride, padding=pad, dilation=dilation),
            make_norm(norm, cout),
            make_act(act),
        )


class DoubleConv(nn.Sequential):
    def __init__(self, cin, cout, norm="layer", act="relu"):
        super().__init__(ConvNormAct(cin, cout, norm, act), ConvNormAct(cout, cout, norm, act))


def make_downsample(kind: str, channels: int) -> nn.Module:
    if kind == "stride2conv":
        return nn.Conv2d(channels, channels, 3, stride=2, padding=1)
    if kind == "maxpool":
        return nn.MaxPool2d(2)
    if kind == "avgpool":
        return nn.AvgPool2d(2)
    raise ValueError(f"unknown downsample kind {kind!r}")


class ASPP(nn.Module):
    """Atrous spatial pyramid pooling: a 1x1 branch for rate 1, dilated 3x3
    branches for the other rates, an image-pooling branch, then a 1x1 fuse."""

    def __init__(self, cin, cout, rates=(1, 2, 4, 8), norm="layer", act="relu"):
        super().__init__()
        branches = []
        for r in rates:
            k = 1 if r == 1 else 3
            branches.append(ConvNormAct(cin, cout, norm, act, kernel_size=k, dilation=r))
        self.branches = nn.ModuleList(branches)
        # pooled branch sees a 1x1 map, where channel LayerNorm is still well defined
        # but BatchNorm with batch 1 is not
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), make_act(act))
        self.project = ConvNormAct(cout * (len(rates) + 1), cout, norm, act, kernel_size=1)

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        pooled = self.pool(x).expand(-1, -1, *x.shape[-2:])
        return self.project(torch.cat(outs + [pooled], dim=1))


class AttentionGate(nn.Module):
    """Additive attention gate on a skip connection.

    ``g`` is the gating signal from the decoder, ``x`` the encoder skip; both at
    the skip's resolution.
    """

    def __init__(self, g_channels, x_channels, inter_channels):
        super().__init__()
        self.w_g = nn.Conv2d(g_channels, inter_channels, 1)
        self.w_x = nn.Conv2d(x_channels, inter_channels, 1, bias=False)
        self.psi = nn.Conv2d(inter_channels, 1, 1)

    def forward(self, g, x):
        a = torch.sigmoid(self.psi(F.relu(self.w_g(g) + self.w_x(x))))
        return x * a
