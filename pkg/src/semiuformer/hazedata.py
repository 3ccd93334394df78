"""Self-contained synthetic haze data: toy scenes, depth fields, scattering
model synthesis, and paired/unpaired dataset iterators."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .core import seeded_rng, split_seed


@dataclass(frozen=True)
class HazeParams:
    airlight: float          # scalar A in [0.7, 1.0] (may carry per-channel jitter separately)
    beta: float              # scattering coefficient per unit depth
    depth: np.ndarray        # [H,W] non-negative

    def transmission(self) -> np.ndarray:
        return np.exp(-self.beta * self.depth)


@dataclass(frozen=True)
class DomainShift:
    """Transform that turns synthetic haze into a statistically distinct 'real' split."""

    noise_sigma: float = 0.01
    gamma: float = 0.8
    beta_range: tuple[float, float] = (1.2, 2.5)
    airlight_jitter: float = 0.05


@dataclass(frozen=True)
class DatasetSpec:
    n_paired: int = 256
    n_unpaired_real: int = 64
    image_size: tuple[int, int] = (64, 64)
    seed: int = 0
    real_domain_shift: DomainShift = field(default_factory=DomainShift)


def _rand(g: torch.Generator, *shape) -> np.ndarray:
    return torch.rand(*shape, generator=g).numpy().astype(np.float64)


_AA_SIGMA = 0.8


def _antialias(img: np.ndarray, sigma: float = _AA_SIGMA) -> np.ndarray:
    """Separable Gaussian band-limiting; procedural masks otherwise leave
    single-pixel edges no optical system would produce."""
    k = 5
    x = np.arange(k) - k // 2
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    pad = k // 2
    out = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.apply_along_axis(lambda r: np.convolve(r, g, mode="valid"), 1, out)
    out = np.apply_along_axis(lambda r: np.convolve(r, g, mode="valid"), 2, out)
    return out


def make_clean_image(rng: torch.Generator, size: tuple[int, int]) -> np.ndarray:
    """Procedural toy scene [3,H,W] in [0.02, 0.98]: smooth gradients, a few
    rectangles and disks, and thin strokes for high-frequency content,
    band-limited like a camera image."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)

    img = np.empty((3, h, w))
    for c in range(3):
        a, b, bias = _rand(rng, 3)
        img[c] = 0.25 + 0.5 * (a * xx + b * yy + bias) / 3.0 + 0.15 * bias

    n_shapes = int(4 + 4 * _rand(rng, 1)[0])
    for _ in range(n_shapes):
        cx, cy, r, kind = _rand(rng, 4)
        color = 0.05 + 0.9 * _rand(rng, 3)
        radius = 0.05 + 0.2 * r
        if kind < 0.5:
            mask = (np.abs(xx - cx) < radius) & (np.abs(yy - cy) < radius * 0.8)
        else:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < radius**2
        img[:, mask] = color[:, None]

    n_strokes = int(3 + 3 * _rand(rng, 1)[0])
    for _ in range(n_strokes):
        p0, slope, level = _rand(rng, 3)
        stroke = np.abs(yy - (p0 + (slope - 0.5) * xx)) < 1.5 / max(h, w)
        img[:, stroke] = level

    return np.clip(_antialias(img), 0.02, 0.98)


def make_depth_field(rng: torch.Generator, size: tuple[int, int]) -> np.ndarray:
    """Smooth random depth field [H,W] in [0, 3] with bounded spatial gradient."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)

    depth = np.zeros((h, w))
    for _ in range(3):
        a, b, c = _rand(rng, 3)
        depth += (a - 0.5) * xx + (b - 0.5) * yy + c
    for _ in range(2):
        fx, fy, phase, amp = _rand(rng, 4)
        depth += 0.3 * amp * np.sin(2 * np.pi * ((1 + fx) * xx + (1 + fy) * yy) + 2 * np.pi * phase)

    depth -= depth.min()
    peak = depth.max()
    if peak > 1e-9:
        depth *= 3.0 / peak
    return depth


def synthesize_haze(clean: np.ndarray, params: HazeParams,
                    airlight_rgb: np.ndarray | None = None) -> np.ndarray:
    """Atmospheric scattering model: I = J*t + A*(1 - t), t = exp(-beta*depth)."""
    t = params.transmission()[None, :, :]
    a = params.airlight if airlight_rgb is None else airlight_rgb[:, None, None]
    return clean * t + a * (1.0 - t)


class PairedHazeDataset:
    """Synthetic (hazy, clean) pairs, fully in memory, deterministic per seed."""

    def __init__(self, hazy: np.ndarray, clean: np.ndarray, seed: int):
        self.hazy = hazy      # [N,3,H,W] float32
        self.clean = clean
        self.seed = seed

    def __len__(self) -> int:
        return self.hazy.shape[0]

    def batches(self, batch_size: int, epoch: int, shuffle: bool = True):
        order = np.arange(len(self))
        if shuffle:
            g = seeded_rng(split_seed(self.seed, 1_000_000 + epoch))
            order = torch.randperm(len(self), generator=g).numpy()
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield (torch.from_numpy(self.hazy[idx]), torch.from_numpy(self.clean[idx]))

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.from_numpy(self.hazy), torch.from_numpy(self.clean)


class UnpairedHazeDataset:
    """Domain-shifted hazy images with no ground-truth accessor.

    The generating clean images are retained privately for evaluation code
    only; training-facing API yields hazy images exclusively.
    """

    def __init__(self, hazy: np.ndarray, clean_heldout: np.ndarray, seed: int):
        self._hazy = hazy
        self.__clean_heldout = clean_heldout
        self.seed = seed

    def __len__(self) -> int:
        return self._hazy.shape[0]

    def batches(self, batch_size: int, epoch: int, shuffle: bool = True):
        order = np.arange(len(self))
        if shuffle:
            g = seeded_rng(split_seed(self.seed, 2_000_000 + epoch))
            order = torch.randperm(len(self), generator=g).numpy()
        for start in range(0, len(self), batch_size):
            yield torch.from_numpy(self._hazy[order[start : start + batch_size]])

    def tensors(self) -> torch.Tensor:
        return torch.from_numpy(self._hazy)


def _sample_item(spec: DatasetSpec, index: int, real: bool):
    """One (clean, hazy, params) triple derived from (seed, index)."""
    g = seeded_rng(split_seed(spec.seed, index if not real else 10_000_000 + index))
    clean = make_clean_image(g, spec.image_size)
    depth = make_depth_field(g, spec.image_size)
    u = _rand(g, 4)
    shift = spec.real_domain_shift
    if real:
        beta = shift.beta_range[0] + (shift.beta_range[1] - shift.beta_range[0]) * u[0]
        a = 0.7 + 0.3 * u[1]
        jitter = (2 * _rand(g, 3) - 1) * shift.airlight_jitter
        airlight_rgb = np.clip(a + jitter, 0.0, 1.0)
        params = HazeParams(airlight=a, beta=beta, depth=depth)
        hazy = synthesize_haze(clean, params, airlight_rgb=airlight_rgb)
        hazy = np.clip(hazy, 1e-9, 1.0) ** shift.gamma
        noise = torch.randn(hazy.shape, generator=g).numpy() * shift.noise_sigma
        hazy = np.clip(hazy + noise, 0.0, 1.0)
    else:
        beta = 0.6 + 1.2 * u[0]
        a = 0.7 + 0.3 * u[1]
        params = HazeParams(airlight=a, beta=beta, depth=depth)
        hazy = synthesize_haze(clean, params)
    return clean.astype(np.float32), hazy.astype(np.float32), params


def build_dataset(spec: DatasetSpec) -> tuple[PairedHazeDataset, UnpairedHazeDataset]:
    h, w = spec.image_size
    paired_hazy = np.empty((spec.n_paired, 3, h, w), dtype=np.float32)
    paired_clean = np.empty_like(paired_hazy)
    for i in range(spec.n_paired):
        clean, hazy, _ = _sample_item(spec, i, real=False)
        paired_clean[i], paired_hazy[i] = clean, hazy

    real_hazy = np.empty((spec.n_unpaired_real, 3, h, w), dtype=np.float32)
    real_clean = np.empty_like(real_hazy)
    for i in range(spec.n_unpaired_real):
        clean, hazy, _ = _sample_item(spec, i, real=True)
        real_clean[i], real_hazy[i] = clean, hazy

    return (PairedHazeDataset(paired_hazy, paired_clean, spec.seed),
            UnpairedHazeDataset(real_hazy, real_clean, spec.seed))


def save_png(path: str, img: np.ndarray) -> None:
    """[3,H,W] or [H,W] float in [0,1] -> 8-bit PNG."""
    arr = np.clip(img, 0.0, 1.0)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_png(path: str) -> np.ndarray:
    """8-bit PNG -> [3,H,W] float32 in [0,1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def write_dataset(spec: DatasetSpec, out_dir: str) -> str:
    """Persist the dataset as PNGs plus a tab-separated manifest; returns the
    manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.tsv")
    rows = []
    for i in range(spec.n_paired):
        clean, hazy, params = _sample_item(spec, i, real=False)
        hazy_name, clean_name = f"paired_{i:04d}_hazy.png", f"paired_{i:04d}_clean.png"
        save_png(os.path.join(out_dir, hazy_name), hazy)
        save_png(os.path.join(out_dir, clean_name), clean)
        rows.append((i, hazy_name, params.airlight, params.beta,
                     split_seed(spec.seed, i), "paired"))
    for i in range(spec.n_unpaired_real):
        _, hazy, params = _sample_item(spec, i, real=True)
        name = f"real_{i:04d}_hazy.png"
        save_png(os.path.join(out_dir, name), hazy)
        rows.append((i, name, params.airlight, params.beta,
                     split_seed(spec.seed, 10_000_000 + i), "real"))
    with open(manifest, "w") as fh:
        for row in rows:
            fh.write("{}\t{}\t{:.6f}\t{:.6f}\t{}\t{}\n".format(*row))
    return manifest
