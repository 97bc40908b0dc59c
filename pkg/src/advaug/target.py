"""Task networks with per-augmentation-group batch normalization.

Every normalization site holds four independent BatchNorm2d instances, one
per data group (clean "main" plus one per augmentation kind). A forward pass
is tagged with the group whose statistics and affine parameters it should
use; the convolutional backbone is shared by all groups. Evaluation always
goes through the main group.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ContractViolation

BN_GROUPS = ("main", "affine", "deform", "appearance")

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class GroupedBatchNorm2d(nn.Module):
    """Four-way switched batch normalization; all groups initialized identically."""

    def __init__(self, num_features: int):
        super().__init__()
        for g in BN_GROUPS:
            self.add_module(g, nn.BatchNorm2d(num_features, eps=BN_EPS, momentum=BN_MOMENTUM))

    def forward(self, x: Tensor, group: str) -> Tensor:
        if group not in BN_GROUPS:
            raise ValueError(f"unknown BN group {group!r}, expected one of {BN_GROUPS}")
        if not self.training and group != "main":
            raise ContractViolation("evaluation-mode forward must use the main BN group")
        return getattr(self, group)(x)


class ConvBlock(nn.Module):
    """conv3x3 -> grouped BN -> ReLU."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn = GroupedBatchNorm2d(cout)

    def forward(self, x: Tensor, group: str) -> Tensor:
        return F.relu(self.bn(self.conv(x), group), inplace=True)


class DoubleConv(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.block1 = ConvBlock(cin, cout)
        self.block2 = ConvBlock(cout, cout)

    def forward(self, x: Tensor, group: str) -> Tensor:
        return self.block2(self.block1(x, group), group)


class TargetClassifier(nn.Module):
    """Small CNN classifier: four conv-BN-ReLU-pool blocks, global pool, linear head."""

    task = "classification"
    WIDTHS = (32, 64, 128, 128)

    def __init__(self, *, image_channels: int = 3, num_classes: int = 4, image_size: int = 32):
        super().__init__()
        if image_size < 16:
            raise ValueError(f"classifier needs resolution >= 16, got {image_size}")
        self.num_classes = num_classes
        self.image_size = image_size
        blocks, cin = [], image_channels
        for wdt in self.WIDTHS:
            blocks.append(ConvBlock(cin, wdt))
            cin = wdt
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(self.WIDTHS[-1], num_classes)

    def forward(self, x: Tensor, group: str = "main") -> Tensor:
        h = x
        for block in self.blocks:
            h = F.max_pool2d(block(h, group), 2)
        return self.fc(h.mean(dim=(2, 3)))


class TargetSegmenter(nn.Module):
    """Three-level U-Net-style segmenter emitting per-pixel class logits."""

    task = "segmentation"
    WIDTHS = (16, 32, 64)

    def __init__(self, *, image_channels: int = 3, num_classes: int = 4, image_size: int = 32):
        super().__init__()
        if image_size % 4 != 0 or image_size < 8:
            raise ValueError(f"segmenter needs resolution divisible by 4 and >= 8, got {image_size}")
        self.num_classes = num_classes
        self.image_size = image_size
        w1, w2, w3 = self.WIDTHS
        self.enc1 = DoubleConv(image_channels, w1)
        self.enc2 = DoubleConv(w1, w2)
        self.bottom = DoubleConv(w2, w3)
        self.dec2 = DoubleConv(w3 + w2, w2)
        self.dec1 = DoubleConv(w2 + w1, w1)
        self.head = nn.Conv2d(w1, num_classes, 1)

    def forward(self, x: Tensor, group: str = "main") -> Tensor:
        e1 = self.enc1(x, group)
        e2 = self.enc2(F.max_pool2d(e1, 2), group)
        b = self.bottom(F.max_pool2d(e2, 2), group)
        d2 = self.dec2(torch.cat([F.interpolate(b, scale_factor=2, mode="nearest"), e2], dim=1), group)
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2, mode="nearest"), e1], dim=1), group)
        return self.head(d1)


def build_target(task: str, *, image_channels: int, num_classes: int, image_size: int) -> nn.Module:
    if task == "classification":
        return TargetClassifier(image_channels=image_channels, num_classes=num_classes,
                                image_size=image_size)
    if task == "segmentation":
        return TargetSegmenter(image_channels=image_channels, num_classes=num_classes,
                               image_size=image_size)
    raise ValueError(f"unknown task {task!r}")


def bn_state(net: nn.Module) -> dict[str, dict[str, Tensor]]:
    """Snapshot of every BN buffer and parameter, keyed by group then tensor path.

    Used by isolation tests to verify that a pass tagged one group leaves all
    other groups bitwise untouched.
    """
    out: dict[str, dict[str, Tensor]] = {g: {} for g in BN_GROUPS}
    for name, module in net.named_modules():
        if isinstance(module, GroupedBatchNorm2d):
            for g in BN_GROUPS:
                bn = getattr(module, g)
                for key, t in list(bn.named_parameters()) + list(bn.named_buffers()):
                    out[g][f"{name}.{g}.{key}"] = t.detach().clone()
    return out
