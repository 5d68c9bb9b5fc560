"""ResNet18 encoder variants, MoCo-style projection head, and the FCN scoring head."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import resnet18

ENCODER_VARIANTS = ("standard", "no_maxpool", "small_image")
ENCODER_STRIDES = {"standard": 32, "no_maxpool": 16, "small_image": 8}


class Encoder(nn.Module):
    """ResNet18 backbone exposing the spatial grid before global average pooling.

    Variants trade output stride for compute on small inputs:
    standard keeps the stock stem (stride 32), no_maxpool drops the stem
    pooling (stride 16), small_image additionally swaps the 7x7 stem conv
    for a 3x3 one (stride 8).
    """

    def __init__(self, variant: str = "standard"):
        super().__init__()
        if variant not in ENCODER_VARIANTS:
            raise ValueError(f"unknown encoder variant {variant!r}")
        net = resnet18(weights=None)
        if variant == "small_image":
            net.conv1 = nn.Conv2d(3, 64, kernel_size=3, stride=1, padding=1, bias=False)
        if variant != "standard":
            net.maxpool = nn.Identity()
        self.variant = variant
        self.stride = ENCODER_STRIDES[variant]
        self.out_channels = 512
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Spatial feature grid (B, 512, d, d) right before global average pooling."""
        x = self.stem(x)
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        return self.layer4(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Globally pooled embedding (B, 512)."""
        return self.features(x).mean(dim=(2, 3))


class ProjectionHead(nn.Module):
    """Two-layer MLP projector applied to pooled features."""

    def __init__(self, in_dim: int = 512, hidden_dim: int = 512, out_dim: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, out_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(x), dim=1)


class SegmentationHead(nn.Module):
    """Minimal fully-convolutional head: 1x1 scoring conv + bilinear upsampling."""

    def __init__(self, in_channels: int, n_classes: int):
        super().__init__()
        self.score = nn.Conv2d(in_channels, n_classes, kernel_size=1)

    def forward(self, grid: torch.Tensor, out_size: tuple[int, int]) -> torch.Tensor:
        logits = self.score(grid)
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)
