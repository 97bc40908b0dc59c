"""Differentiable geometric-transform primitives.

All spatial coordinates are normalized so that -1 and +1 are the centers of
the first and last pixel along each axis (align-corners convention). A flow
field stores, for every output pixel, the normalized (x, y) location in the
input image it samples from; the identity flow therefore samples every pixel
from itself. Gradients flow to every floating-point input of every op.

Flow tensors have shape (H, W, 2) or (B, H, W, 2) with channel 0 = x (width
axis) and channel 1 = y (height axis). Images are (C, H, W) or (B, C, H, W).
"""

from __future__ import annotations

import torch
from torch import Tensor

__all__ = [
    "identity_flow",
    "affine_to_flow",
    "residual_to_flow",
    "warp",
    "warp_labels",
    "spatial_gradient",
]


def _norm_coords(n: int, dtype, device) -> Tensor:
    """Normalized center coordinates of n pixels: -1 + 2k/(n-1), or 0 if n == 1."""
    if n == 1:
        return torch.zeros(1, dtype=dtype, device=device)
    k = torch.arange(n, dtype=dtype, device=device)
    return -1 + 2 * k / (n - 1)


def identity_flow(height: int, width: int, *, dtype=torch.float32, device=None) -> Tensor:
    """Flow field that samples every pixel from its own location.

    Returns an (H, W, 2) tensor with entry [i, j] = (norm(j, W), norm(i, H)).
    """
    if height < 1 or width < 1:
        raise ValueError(f"pixel counts must be positive, got {height}x{width}")
    nx = _norm_coords(width, dtype, device)
    ny = _norm_coords(height, dtype, device)
    gy, gx = torch.meshgrid(ny, nx, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def affine_to_flow(matrix: Tensor, height: int, width: int) -> Tensor:
    """Convert a 2x3 affine matrix (or a (B, 2, 3) batch) into a flow field.

    The matrix acts on normalized homogeneous coordinates: row-major
    [[a, b, tx], [c, d, ty]] maps (x, y) to (a*x + b*y + tx, c*x + d*y + ty).
    Differentiable with respect to ``matrix``. The identity matrix reproduces
    ``identity_flow`` bitwise.
    """
    if matrix.shape[-2:] != (2, 3):
        raise ValueError(f"affine matrix must have shape (..., 2, 3), got {tuple(matrix.shape)}")
    base = identity_flow(height, width, dtype=matrix.dtype, device=matrix.device)
    x, y = base[..., 0], base[..., 1]
    if matrix.dim() == 3:
        m = matrix[:, None, None]  # (B, 1, 1, 2, 3)
    else:
        m = matrix
    fx = m[..., 0, 0] * x + m[..., 0, 1] * y + m[..., 0, 2]
    fy = m[..., 1, 0] * x + m[..., 1, 1] * y + m[..., 1, 2]
    return torch.stack([fx, fy], dim=-1)


def residual_to_flow(residual: Tensor) -> Tensor:
    """Add the identity flow to a residual displacement field."""
    h, w = residual.shape[-3], residual.shape[-2]
    return residual + identity_flow(h, w, dtype=residual.dtype, device=residual.device)


def _check_flow(flow: Tensor, height: int, width: int) -> None:
    if flow.shape[-1] != 2 or flow.dim() not in (3, 4):
        raise ValueError(f"flow must have shape (H, W, 2) or (B, H, W, 2), got {tuple(flow.shape)}")
    if flow.shape[-3] != height or flow.shape[-2] != width:
        raise ValueError(
            f"flow spatial size {flow.shape[-3]}x{flow.shape[-2]} does not match image {height}x{width}"
        )
    if torch.isnan(flow).any():
        raise ValueError("flow contains NaN")


def _pixel_positions(flow: Tensor, height: int, width: int) -> tuple[Tensor, Tensor]:
    """Unnormalize flow to fractional pixel positions (px, py).

    Computed relative to the identity flow so that a bitwise-identity flow
    yields exactly integer positions (algebraically this equals
    (coord + 1) * (n - 1) / 2, but the relative form is exact at the grid).
    """
    dtype, device = flow.dtype, flow.device
    base = identity_flow(height, width, dtype=dtype, device=device)
    jj = torch.arange(width, dtype=dtype, device=device).expand(height, width)
    ii = torch.arange(height, dtype=dtype, device=device).unsqueeze(1).expand(height, width)
    px = (flow[..., 0] - base[..., 0]) * ((width - 1) / 2.0) + jj
    py = (flow[..., 1] - base[..., 1]) * ((height - 1) / 2.0) + ii
    return px, py


def _gather(image: Tensor, xi: Tensor, yi: Tensor, padding: str) -> Tensor:
    """Read image values at integer positions, applying the padding rule."""
    b, c, h, w = image.shape
    inside = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
    xc = xi.clamp(0, w - 1)
    yc = yi.clamp(0, h - 1)
    idx = (yc * w + xc).unsqueeze(1).expand(b, c, *xc.shape[-2:]).reshape(b, c, -1)
    vals = torch.gather(image.reshape(b, c, h * w), 2, idx).reshape(b, c, *xc.shape[-2:])
    if padding == "zeros":
        vals = vals * inside.unsqueeze(1).to(image.dtype)
    return vals


def warp(image: Tensor, flow: Tensor, mode: str = "bilinear", padding: str = "zeros") -> Tensor:
    """Sample ``image`` at the normalized locations given by ``flow``.

    Output pixel (i, j) is the interpolated value of the input at flow[i, j].
    Under bilinear interpolation gradients flow to both the image and the
    flow. Accepts (C, H, W) or (B, C, H, W) images with an (H, W, 2) or
    (B, H, W, 2) flow; an unbatched image is returned unbatched.
    """
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if padding not in ("zeros", "border"):
        raise ValueError(f"unknown padding mode {padding!r}")
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    if image.dim() != 4:
        raise ValueError(f"image must have shape (C, H, W) or (B, C, H, W), got {tuple(image.shape)}")
    b, c, h, w = image.shape
    _check_flow(flow, h, w)
    px, py = _pixel_positions(flow, h, w)
    if px.dim() == 2:
        px = px.unsqueeze(0).expand(b, h, w)
        py = py.unsqueeze(0).expand(b, h, w)
    elif px.shape[0] != b:
        raise ValueError(f"flow batch {px.shape[0]} does not match image batch {b}")

    if mode == "nearest":
        xi = torch.round(px).long()
        yi = torch.round(py).long()
        out = _gather(image, xi, yi, padding)
    else:
        x0 = torch.floor(px)
        y0 = torch.floor(py)
        wx = (px - x0).unsqueeze(1)
        wy = (py - y0).unsqueeze(1)
        x0i, y0i = x0.long(), y0.long()
        v00 = _gather(image, x0i, y0i, padding)
        v01 = _gather(image, x0i + 1, y0i, padding)
        v10 = _gather(image, x0i, y0i + 1, padding)
        v11 = _gather(image, x0i + 1, y0i + 1, padding)
        top = v00 * (1 - wx) + v01 * wx
        bot = v10 * (1 - wx) + v11 * wx
        out = top * (1 - wy) + bot * wy
    return out.squeeze(0) if squeeze else out


def warp_labels(labels: Tensor, flow: Tensor, padding: str = "border") -> Tensor:
    """Warp an integer label map with nearest-neighbor sampling.

    Accepts (H, W) or (B, H, W) label maps. Border padding avoids inventing
    a background class for out-of-frame samples.
    """
    squeeze = labels.dim() == 2
    lab = labels.unsqueeze(0) if squeeze else labels
    out = warp(lab.unsqueeze(1).to(torch.float64), flow, mode="nearest", padding=padding)
    out = out.squeeze(1).to(labels.dtype)
    return out.squeeze(0) if squeeze else out


def spatial_gradient(flow: Tensor) -> Tensor:
    """Forward differences of a flow-like field along both spatial axes.

    Input (..., H, W, 2) -> output (..., H, W, 2, 2); the last axis indexes
    the difference direction (0 = along width, 1 = along height). The
    trailing column/row, where no forward neighbor exists, is zero.
    """
    if flow.shape[-1] != 2 or flow.dim() < 3:
        raise ValueError(f"expected a (..., H, W, 2) field, got {tuple(flow.shape)}")
    h, w = flow.shape[-3], flow.shape[-2]
    if h < 2 or w < 2:
        raise ValueError(f"spatial gradient requires H, W >= 2, got {h}x{w}")
    dx = flow[..., :, 1:, :] - flow[..., :, :-1, :]
    dx = torch.cat([dx, torch.zeros_like(flow[..., :, :1, :])], dim=-2)
    dy = flow[..., 1:, :, :] - flow[..., :-1, :, :]
    dy = torch.cat([dy, torch.zeros_like(flow[..., :1, :, :])], dim=-3)
    return torch.stack([dx, dy], dim=-1)
