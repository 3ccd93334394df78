"""Full-reference quality metrics (PSNR, SSIM) and evaluation reports."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import ShapeError

PSNR_CAP = 99.0


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images; capped at 99 dB."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def _gaussian_kernel(window: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(window, dtype=torch.float64) - (window - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).view(1, 1, window, window)


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-windowed SSIM, averaged over valid positions and channels."""
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    _, c, h, w = a.shape
    if h < window or w < window:
        raise ShapeError(f"image {h}x{w} smaller than SSIM window {window}")

    x = a.double().reshape(-1, 1, h, w)
    y = b.double().reshape(-1, 1, h, w)
    kernel = _gaussian_kernel(window, sigma)

    mu_x = F.conv2d(x, kernel)
    mu_y = F.conv2d(y, kernel)
    sigma_x = F.conv2d(x * x, kernel) - mu_x**2
    sigma_y = F.conv2d(y * y, kernel) - mu_y**2
    sigma_xy = F.conv2d(x * y, kernel) - mu_x * mu_y

    c1, c2 = k1**2, k2**2  # dynamic range 1
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (sigma_x + sigma_y + c2)
    )
    return float(ssim_map.mean())


@dataclass
class EvalReport:
    per_image: list[tuple[str, float, float]]
    mean_psnr: float
    mean_ssim: float
    config_echo: str = ""

    def rows(self) -> list[str]:
        out = ["name\tpsnr_db\tssim"]
        out += [f"{n}\t{p:.6f}\t{s:.6f}" for n, p, s in self.per_image]
        out.append(f"AGGREGATE\t{self.mean_psnr:.6f}\t{self.mean_ssim:.6f}")
        return out


def evaluate_pairs(forward_fn, hazy: torch.Tensor, clean: torch.Tensor,
                   names: list[str] | None = None,
                   out: str | os.PathLike | None = None,
                   config_echo: str = "") -> EvalReport:
    """Run forward_fn over each hazy image and score against its clean pair."""
    per_image = []
    with torch.no_grad():
        for i in range(hazy.shape[0]):
            name = names[i] if names else f"img_{i:04d}"
            pred = forward_fn(hazy[i : i + 1])
            per_image.append((name, psnr(pred[0], clean[i]), ssim(pred[0], clean[i])))
    mean_psnr = sum(p for _, p, _ in per_image) / len(per_image)
    mean_ssim = sum(s for _, _, s in per_image) / len(per_image)
    report = EvalReport(per_image=per_image, mean_psnr=mean_psnr,
                        mean_ssim=mean_ssim, config_echo=config_echo)
    if out is not None:
        with open(out, "w") as fh:
            fh.write("\n".join(report.rows()) + "\n")
    return report
