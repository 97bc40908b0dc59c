"""Conditional augmentation generators and the shared discriminator.

Each generator maps (noise vector, image) to one transform parameterization:
a global 2x3 affine matrix, a residual deformation field, or an additive
appearance mask. All three share the same two-branch layout: the noise vector
is projected to a 4x4 feature map and upsampled through six conv layers to
image resolution, the image passes through four conv layers, and the
concatenated features go through a four-conv trunk into a kind-specific head.
Heads are zero-initialized (plus an identity bias for the affine head) so the
whole pipeline starts as the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ConsistencyError
from .warp import affine_to_flow, residual_to_flow, warp, warp_labels

KINDS = ("affine", "deform", "appearance")

IDENTITY_AFFINE = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


@dataclass
class GeneratorOutput:
    """One transform parameterization; exactly the payload matching ``kind`` is set."""

    kind: str
    affine: Optional[Tensor] = None          # (B, 2, 3)
    residual_flow: Optional[Tensor] = None   # (B, H, W, 2), bounded by flow_scale
    mask: Optional[Tensor] = None            # (B, C, H, W), bounded by mask_scale

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConsistencyError(f"unknown generator kind {self.kind!r}")
        payloads = {"affine": self.affine, "deform": self.residual_flow, "appearance": self.mask}
        populated = [k for k, v in payloads.items() if v is not None]
        if populated != [self.kind]:
            raise ConsistencyError(
                f"output of kind {self.kind!r} must populate exactly its own payload, got {populated}"
            )

    @property
    def payload(self) -> Tensor:
        return {"affine": self.affine, "deform": self.residual_flow, "appearance": self.mask}[self.kind]


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def _check_resolution(size: int) -> int:
    """Generators build up from a 4x4 seed map; resolution must be 4 * 2**k."""
    n_up = 0
    s = size
    while s > 4 and s % 2 == 0:
        s //= 2
        n_up += 1
    if s != 4 or n_up < 1 or n_up > 6:
        raise ValueError(f"generator resolution must be 4*2^k with k in 1..6, got {size}")
    return n_up


class AugmentationGenerator(nn.Module):
    """Two-branch conditional generator for one augmentation kind.

    ``base_width`` scales all channel counts; the defaults give a noise branch
    of 128->64->32->16 channels (halving at each x2 upsampling), an image
    branch of 16/32/32/32 and a trunk of width 32.
    """

    def __init__(self, kind: str, *, image_channels: int = 3, image_size: int = 32,
                 noise_dim: int = 128, base_width: int = 32,
                 flow_scale: float = 0.1, mask_scale: float = 0.5):
        super().__init__()
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
        self.kind = kind
        self.image_channels = image_channels
        self.image_size = image_size
        self.noise_dim = noise_dim
        self.flow_scale = flow_scale
        self.mask_scale = mask_scale
        self.n_up = _check_resolution(image_size)
        self.forward_calls = 0

        seed_ch = 4 * base_width
        self.noise_fc = nn.Linear(noise_dim, seed_ch * 4 * 4)
        chans = [seed_ch]
        for i in range(6):
            chans.append(max(chans[-1] // 2, 2) if i < self.n_up else chans[-1])
        self.noise_blocks = nn.ModuleList(_conv_block(chans[i], chans[i + 1]) for i in range(6))

        img_widths = (base_width // 2, base_width, base_width, base_width)
        blocks, cin = [], image_channels
        for wdt in img_widths:
            blocks.append(_conv_block(cin, wdt))
            cin = wdt
        self.image_blocks = nn.Sequential(*blocks)

        trunk_in = chans[-1] + img_widths[-1]
        self.trunk = nn.Sequential(
            _conv_block(trunk_in, base_width),
            *(_conv_block(base_width, base_width) for _ in range(3)),
        )

        if kind == "affine":
            self.head = nn.Linear(base_width, 6)
        else:
            out_ch = 2 if kind == "deform" else image_channels
            self.head = nn.Conv2d(base_width, out_ch, 3, padding=1)
        self.reset_head_to_identity()

    def reset_head_to_identity(self):
        """Zero the head so the generator starts as a no-op transform."""
        nn.init.zeros_(self.head.weight)
        if self.kind == "affine":
            with torch.no_grad():
                self.head.bias.copy_(torch.tensor(IDENTITY_AFFINE))
        else:
            nn.init.zeros_(self.head.bias)

    def forward(self, z: Tensor, x: Tensor) -> GeneratorOutput:
        if z.dim() != 2 or z.shape[1] != self.noise_dim:
            raise ValueError(f"noise must be (B, {self.noise_dim}), got {tuple(z.shape)}")
        if x.dim() != 4 or x.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(
                f"images must be (B, C, {self.image_size}, {self.image_size}), got {tuple(x.shape)}"
            )
        if z.shape[0] != x.shape[0]:
            raise ValueError(f"noise batch {z.shape[0]} != image batch {x.shape[0]}")
        self.forward_calls += 1

        h = self.noise_fc(z).reshape(z.shape[0], -1, 4, 4)
        for i, block in enumerate(self.noise_blocks):
            if i < self.n_up:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(h)
        g = self.image_blocks(x)
        h = self.trunk(torch.cat([h, g], dim=1))

        if self.kind == "affine":
            theta = self.head(h.mean(dim=(2, 3))).reshape(-1, 2, 3)
            return GeneratorOutput("affine", affine=theta)
        if self.kind == "deform":
            r = torch.tanh(self.head(h)) * self.flow_scale
            return GeneratorOutput("deform", residual_flow=r.permute(0, 2, 3, 1))
        m = torch.tanh(self.head(h)) * self.mask_scale
        return GeneratorOutput("appearance", mask=m)


class Discriminator(nn.Module):
    """Strided conv stack scoring whether an image is an original sample.

    Four stride-2 conv+BN+LeakyReLU(0.2) stages followed by a zero-initialized
    1x1 conv head averaged to one logit per example; ``scores`` applies the
    sigmoid.
    """

    NEGATIVE_SLOPE = 0.2

    def __init__(self, *, image_channels: int = 3, image_size: int = 32, base_width: int = 32):
        super().__init__()
        self.image_size = image_size
        self.forward_calls = 0
        widths = (base_width, 2 * base_width, 4 * base_width, 8 * base_width)
        layers, cin = [], image_channels
        for wdt in widths:
            layers += [
                nn.Conv2d(cin, wdt, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(wdt),
                nn.LeakyReLU(self.NEGATIVE_SLOPE, inplace=True),
            ]
            cin = wdt
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(widths[-1], 1, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: Tensor) -> Tensor:
        """Per-example logit."""
        if x.dim() != 4 or x.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(
                f"images must be (B, C, {self.image_size}, {self.image_size}), got {tuple(x.shape)}"
            )
        self.forward_calls += 1
        return self.head(self.features(x)).mean(dim=(1, 2, 3))

    def scores(self, x: Tensor) -> Tensor:
        """Per-example probability in (0, 1)."""
        return torch.sigmoid(self(x))


def realize_flow(output: GeneratorOutput, height: int, width: int) -> Tensor:
    """Sampling flow realized by a geometric generator output."""
    if output.kind == "affine":
        return affine_to_flow(output.affine, height, width)
    if output.kind == "deform":
        return residual_to_flow(output.residual_flow)
    raise ConsistencyError(f"{output.kind!r} output has no sampling flow")


def apply_augmentation(output: GeneratorOutput, image: Tensor,
                       labels: Optional[Tensor] = None, task: str = "classification"):
    """Apply a generator output to an image (and label map, for segmentation).

    Geometric kinds warp image and any label map with the same flow (bilinear
    zeros-padded for images, nearest border-padded for labels); the appearance
    kind adds its mask without clamping and leaves labels untouched. Returns
    (augmented_image, labels).
    """
    h, w = image.shape[-2], image.shape[-1]
    if output.kind == "appearance":
        mask = output.mask
        if mask.shape[-2:] != (h, w):
            raise ValueError(f"mask spatial size {tuple(mask.shape[-2:])} does not match image {h}x{w}")
        if image.dim() == 3 and mask.dim() == 4:
            mask = mask.squeeze(0)
        return image + mask, labels
    flow = realize_flow(output, h, w)
    warped = warp(image, flow, mode="bilinear", padding="zeros")
    if labels is not None and task == "segmentation":
        labels = warp_labels(labels, flow, padding="border")
    return warped, labels
