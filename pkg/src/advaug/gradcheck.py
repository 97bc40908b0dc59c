"""Finite-difference audit of every differentiable primitive.

Each check compares analytic gradients against central differences in double
precision and reports the worst relative error. Bilinear sampling is only
piecewise smooth, so flow coordinates whose sample position falls within a
small neighborhood of a pixel-cell boundary are excluded; network checks
likewise drop coordinates where halving the step changes the estimate (a
ReLU kink crossed inside the stencil).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .generators import AugmentationGenerator, apply_augmentation
from .losses import grad_reverse, reg_affine, reg_appear, reg_deform
from .warp import affine_to_flow, identity_flow, warp

DEFAULT_H = 1e-5
KINK_MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_checked: int
    n_excluded: int
    threshold: float

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_err < self.threshold


def _rel_err(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-6) -> torch.Tensor:
    return (a - b).abs() / torch.maximum(torch.maximum(a.abs(), b.abs()),
                                         torch.full_like(a, floor))


def _central_diff(f, x: torch.Tensor, coords, h: float) -> torch.Tensor:
    """Central difference of scalar f at the given flat coordinates of x."""
    flat = x.detach().clone().reshape(-1)
    est = torch.empty(len(coords), dtype=x.dtype)
    for n, c in enumerate(coords):
        orig = flat[c].item()
        flat[c] = orig + h
        fp = f(flat.reshape(x.shape))
        flat[c] = orig - h
        fm = f(flat.reshape(x.shape))
        flat[c] = orig
        est[n] = (fp - fm) / (2 * h)
    return est


def _scalar_grad(f, x: torch.Tensor) -> torch.Tensor:
    xg = x.detach().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(xg), xg)
    return grad.reshape(-1)


def check_warp_image(seed: int, threshold: float) -> CheckResult:
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, 1, 8, 8, dtype=torch.float64, generator=g)
    flow = identity_flow(8, 8, dtype=torch.float64) + \
        0.6 * torch.rand(8, 8, 2, dtype=torch.float64, generator=g) - 0.3
    w = torch.randn(1, 1, 8, 8, dtype=torch.float64, generator=g)
    f = lambda img: (warp(img, flow) * w).sum()
    analytic = _scalar_grad(f, x)
    coords = list(range(x.numel()))
    numeric = _central_diff(f, x, coords, DEFAULT_H)
    err = _rel_err(analytic, numeric).max().item()
    return CheckResult("warp/d_image", err, len(coords), 0, threshold)


def check_warp_flow(seed: int, threshold: float) -> CheckResult:
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, 1, 8, 8, dtype=torch.float64, generator=g)
    flow = identity_flow(8, 8, dtype=torch.float64) + \
        0.6 * torch.rand(8, 8, 2, dtype=torch.float64, generator=g) - 0.3
    w = torch.randn(1, 1, 8, 8, dtype=torch.float64, generator=g)
    # sample positions within KINK_MARGIN of an integer sit on a bilinear kink
    px = (flow[..., 0] + 1) * 3.5
    py = (flow[..., 1] + 1) * 3.5
    smooth = ((px - px.round()).abs() > KINK_MARGIN) & ((py - py.round()).abs() > KINK_MARGIN)
    keep = smooth.unsqueeze(-1).expand_as(flow).reshape(-1)
    f = lambda fl: (warp(x, fl) * w).sum()
    analytic = _scalar_grad(f, flow)
    coords = [c for c in range(flow.numel()) if keep[c]]
    numeric = _central_diff(f, flow, coords, DEFAULT_H)
    err = _rel_err(analytic[coords], numeric).max().item()
    return CheckResult("warp/d_flow", err, len(coords), flow.numel() - len(coords), threshold)


def check_affine_to_flow(seed: int, threshold: float) -> CheckResult:
    g = torch.Generator().manual_seed(seed)
    mat = torch.eye(2, 3, dtype=torch.float64) + 0.2 * torch.randn(2, 3, dtype=torch.float64, generator=g)
    w = torch.randn(8, 8, 2, dtype=torch.float64, generator=g)
    f = lambda m: (affine_to_flow(m, 8, 8) * w).sum()
    analytic = _scalar_grad(f, mat)
    numeric = _central_diff(f, mat, list(range(6)), DEFAULT_H)
    err = _rel_err(analytic, numeric).max().item()
    return CheckResult("affine_to_flow/d_matrix", err, 6, 0, threshold)


def _check_simple(name, fn, x, threshold) -> CheckResult:
    analytic = _scalar_grad(fn, x)
    coords = list(range(x.numel()))
    numeric = _central_diff(fn, x, coords, DEFAULT_H)
    err = _rel_err(analytic, numeric).max().item()
    return CheckResult(name, err, len(coords), 0, threshold)


def check_regularizers(seed: int, threshold: float) -> list[CheckResult]:
    g = torch.Generator().manual_seed(seed)
    flow = identity_flow(8, 8, dtype=torch.float64) + \
        0.2 * torch.randn(8, 8, 2, dtype=torch.float64, generator=g)
    residual = 0.1 * torch.randn(8, 8, 2, dtype=torch.float64, generator=g)
    mask = 0.5 * torch.randn(1, 1, 8, 8, dtype=torch.float64, generator=g)
    return [
        _check_simple("reg_affine/d_flow", reg_affine, flow, threshold),
        _check_simple("reg_deform/d_residual", reg_deform, residual, threshold),
        _check_simple("reg_appear/d_mask", reg_appear, mask, threshold),
    ]


def check_grad_reverse(seed: int, threshold: float) -> CheckResult:
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(16, dtype=torch.float64, generator=g)
    w = torch.randn(16, dtype=torch.float64, generator=g)
    scale = 0.5
    f = lambda t: (grad_reverse(t, scale) * w).sum()
    analytic = _scalar_grad(f, x)
    numeric = _central_diff(f, x, list(range(16)), DEFAULT_H)
    # the reversal claims -scale times the true forward derivative
    err = _rel_err(analytic, -scale * numeric).max().item()
    return CheckResult("grad_reverse/d_input", err, 16, 0, threshold)


def check_generator(kind: str, seed: int, threshold: float,
                    coords_per_tensor: int = 8) -> CheckResult:
    """FD check of d(scalar of augmented image)/d(generator parameters).

    Parameters are subsampled per tensor; coordinates whose h vs h/2
    estimates disagree (ReLU kink inside the stencil) are excluded.
    """
    torch.manual_seed(seed)
    gen = AugmentationGenerator(kind, image_channels=1, image_size=8,
                                noise_dim=16, base_width=8).double()
    # random head so outputs and gradients are non-degenerate
    torch.nn.init.normal_(gen.head.weight, std=0.3)
    torch.nn.init.normal_(gen.head.bias, std=0.3)
    gen.train()
    g = torch.Generator().manual_seed(seed + 1)
    x = torch.randn(2, 1, 8, 8, dtype=torch.float64, generator=g)
    z = torch.randn(2, 16, dtype=torch.float64, generator=g)
    w = torch.randn(2, 1, 8, 8, dtype=torch.float64, generator=g)

    def scalar() -> torch.Tensor:
        out = gen(z, x)
        aug, _ = apply_augmentation(out, x)
        return (aug * w).sum()

    params = [p for p in gen.parameters() if p.requires_grad]
    gen.zero_grad()
    scalar().backward()

    max_err, n_checked, n_excluded = 0.0, 0, 0
    pick = torch.Generator().manual_seed(seed + 2)
    for p in params:
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        k = min(coords_per_tensor, flat.numel())
        coords = torch.randperm(flat.numel(), generator=pick)[:k]
        for c in coords:
            orig = flat[c].item()
            est = []
            with torch.no_grad():
                for h in (DEFAULT_H, DEFAULT_H / 2):
                    flat[c] = orig + h
                    fp = float(scalar())
                    flat[c] = orig - h
                    fm = float(scalar())
                    est.append((fp - fm) / (2 * h))
                flat[c] = orig
            scale_ref = max(abs(est[0]), abs(est[1]), abs(float(grad[c])), 1e-6)
            if abs(est[0] - est[1]) / scale_ref > 1e-4:
                n_excluded += 1
                continue
            err = abs(float(grad[c]) - est[1]) / scale_ref
            max_err = max(max_err, err)
            n_checked += 1
    return CheckResult(f"generator_{kind}/d_params", max_err, n_checked, n_excluded, threshold)


def run_all(seed: int = 0, threshold: float | None = None) -> list[CheckResult]:
    """The full audit. Per-op default thresholds unless one global is forced."""
    thr = lambda default: threshold if threshold is not None else default
    results = [
        check_warp_image(seed, thr(1e-4)),
        check_warp_flow(seed, thr(1e-4)),
        check_affine_to_flow(seed, thr(1e-4)),
        *check_regularizers(seed, thr(1e-3)),
        check_grad_reverse(seed, thr(1e-3)),
        check_generator("affine", seed, thr(1e-3)),
        check_generator("deform", seed, thr(1e-3)),
        check_generator("appearance", seed, thr(1e-3)),
    ]
    return results


def write_report(results: list[CheckResult], path) -> None:
    lines = ["op,max_rel_err,n_checked,n_excluded,threshold,passed"]
    for r in results:
        lines.append(f"{r.name},{r.max_rel_err!r},{r.n_checked},{r.n_excluded},"
                     f"{r.threshold!r},{r.passed}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
