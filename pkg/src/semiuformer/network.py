"""Transformer U-Net dehazing generator, uncertainty head, and discriminator."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import NetConfig, ShapeError, clamp_log_theta, validate_image_batch


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """[B,C,H,W] -> [B*nW, ws*ws, C] token windows."""
    b, c, h, w = x.shape
    x = x.view(b, c, h // ws, ws, w // ws, ws)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(-1, ws * ws, c)


def window_reverse(windows: torch.Tensor, ws: int, h: int, w: int) -> torch.Tensor:
    """Inverse of window_partition back to [B,C,H,W]."""
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // ws) * (w // ws))
    x = windows.view(b, h // ws, w // ws, ws, ws, c)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)


def _relative_position_index(ws: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij"))
    flat = coords.flatten(1)
    rel = flat[:, :, None] - flat[:, None, :]
    rel = rel.permute(1, 2, 0) + (ws - 1)
    return (rel[..., 0] * (2 * ws - 1) + rel[..., 1]).contiguous()


class WindowAttentionPC(nn.Module):
    """Window multi-head self-attention with a parallel 3x3 conv branch on V.

    The conv branch output is added to the attention output before the final
    1x1 projection. shift=True cyclically rolls by half a window before the
    attention and rolls back after.
    """

    def __init__(self, dim: int, window_size: int, num_heads: int, shift: bool = False):
        super().__init__()
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.shift = shift
        self.scale = (dim // num_heads) ** -0.5

        self.qkv = nn.Conv2d(dim, dim * 3, 1)
        self.v_conv = nn.Conv2d(dim, dim, 3, padding=1)
        self.proj = nn.Conv2d(dim, dim, 1)
        self.relative_position_bias = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads)
        )
        self.register_buffer("rel_index", _relative_position_index(window_size), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        ws = self.window_size
        if h % ws or w % ws:
            raise ShapeError(f"spatial size {h}x{w} not divisible by window size {ws}")

        if self.shift:
            x = torch.roll(x, shifts=(-(ws // 2), -(ws // 2)), dims=(2, 3))

        q, k, v = self.qkv(x).chunk(3, dim=1)
        conv_out = self.v_conv(v)

        n = ws * ws
        hd = c // self.num_heads

        def heads(t):
            return window_partition(t, ws).view(-1, n, self.num_heads, hd).transpose(1, 2)

        qh, kh, vh = heads(q), heads(k), heads(v)
        attn = (qh @ kh.transpose(-2, -1)) * self.scale
        bias = self.relative_position_bias[self.rel_index.view(-1)].view(n, n, -1)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        attn = attn.softmax(dim=-1)
        out = (attn @ vh).transpose(1, 2).reshape(-1, n, c)
        out = window_reverse(out, ws, h, w)

        out = self.proj(out + conv_out)
        if self.shift:
            out = torch.roll(out, shifts=(ws // 2, ws // 2), dims=(2, 3))
        return out


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel dimension of NCHW feature maps."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class DehazeformerBlock(nn.Module):
    """Two residual sub-layers: windowed attention and a pointwise MLP."""

    def __init__(self, dim: int, window_size: int, num_heads: int, mlp_ratio: float,
                 shift: bool = False):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = ChannelLayerNorm(dim)
        self.attn = WindowAttentionPC(dim, window_size, num_heads, shift=shift)
        self.norm2 = ChannelLayerNorm(dim)
        self.mlp = nn.Sequential(nn.Conv2d(dim, hidden, 1), nn.GELU(), nn.Conv2d(hidden, dim, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class ResidualConvBlock(nn.Module):
    """conv3x3 -> ReLU -> conv3x3, deliberately without any normalization."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv2(F.relu(self.conv1(x)))


class MixDehazeformerBlock(nn.Module):
    """depth transformer blocks, then (optionally) conv fusion: RB(y) + y.

    With fusion=False this degrades to a plain transformer-block stack, the
    configuration used as the ablation baseline.
    """

    def __init__(self, dim: int, depth: int, window_size: int, num_heads: int,
                 mlp_ratio: float, fusion: bool = True):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.blocks = nn.ModuleList(
            DehazeformerBlock(dim, window_size, num_heads, mlp_ratio, shift=(i % 2 == 1))
            for i in range(depth)
        )
        self.fusion = ResidualConvBlock(dim) if fusion else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x)
        if self.fusion is not None:
            x = self.fusion(x) + x
        return x


class UncertaintyHead(nn.Module):
    """Predicts the per-pixel log Laplace scale, clamped to [-8, 8]."""

    def __init__(self, in_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_dim, in_dim, 3, padding=1)
        self.conv2 = nn.Conv2d(in_dim, 1, 3, padding=1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return clamp_log_theta(self.conv2(F.relu(self.conv1(features))))


@dataclass
class ForwardOutput:
    dehazed: torch.Tensor                    # [B,3,H,W] clamped to [0,1]
    log_theta: torch.Tensor | None           # [B,1,H,W] when uncertainty requested
    kl_embedding: torch.Tensor               # [B, embed_dims[kl_tap_stage]]


class DehazeNet(nn.Module):
    """5-stage transformer U-Net: shallow conv, mixed transformer stages with
    stride-2 down / pixelshuffle up, skip fusion, pixelshuffle reconstruction,
    plus the uncertainty head."""

    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        cfg = config or NetConfig()
        self.config = cfg
        d = cfg.embed_dims

        def mdb(stage):
            return MixDehazeformerBlock(d[stage], cfg.depths[stage], cfg.window_size,
                                        cfg.num_heads[stage], cfg.mlp_ratio,
                                        fusion=cfg.mdb_fusion)

        self.shallow = nn.Conv2d(3, d[0], 3, padding=1)
        self.stage0 = mdb(0)
        self.down0 = nn.Conv2d(d[0], d[1], 3, stride=2, padding=1)
        self.stage1 = mdb(1)
        self.down1 = nn.Conv2d(d[1], d[2], 3, stride=2, padding=1)
        self.stage2 = mdb(2)
        self.up0 = nn.Conv2d(d[2], d[3] * 4, 1)
        self.fuse0 = nn.Conv2d(d[3] + d[1], d[3], 1)
        self.stage3 = mdb(3)
        self.up1 = nn.Conv2d(d[3], d[4] * 4, 1)
        self.fuse1 = nn.Conv2d(d[4] + d[0], d[4], 1)
        self.stage4 = mdb(4)
        self.recon_tail = nn.Conv2d(d[4], d[4], 3, stride=2, padding=1)
        self.recon_head = nn.Conv2d(d[4], 12, 3, padding=1)
        self.shuffle = nn.PixelShuffle(2)
        self.ueb = UncertaintyHead(3 if cfg.ueb_on_image else d[4])

    def stage_features(self, img: torch.Tensor) -> list[torch.Tensor]:
        """Per-stage feature maps (used for the distillation tap)."""
        f0 = self.stage0(self.shallow(img))
        f1 = self.stage1(self.down0(f0))
        f2 = self.stage2(self.down1(f1))
        f3 = self.stage3(self.fuse0(torch.cat([self.shuffle(self.up0(f2)), f1], dim=1)))
        f4 = self.stage4(self.fuse1(torch.cat([self.shuffle(self.up1(f3)), f0], dim=1)))
        return [f0, f1, f2, f3, f4]

    def forward(self, img: torch.Tensor, want_uncertainty: bool = False,
                validate: bool = True) -> ForwardOutput:
        if validate:
            validate_image_batch(img, self.config.size_divisor)
        feats = self.stage_features(img)
        recon = self.shuffle(self.recon_head(self.recon_tail(feats[4])))
        if self.config.input_skip:
            recon = recon + img
        dehazed = recon.clamp(0.0, 1.0)
        kl_embedding = feats[self.config.kl_tap_stage].mean(dim=(2, 3))
        log_theta = None
        if want_uncertainty:
            log_theta = self.ueb(dehazed if self.config.ueb_on_image else feats[4])
        return ForwardOutput(dehazed=dehazed, log_theta=log_theta, kl_embedding=kl_embedding)

    def ueb_parameters(self) -> list[nn.Parameter]:
        return list(self.ueb.parameters())

    def backbone_parameters(self) -> list[nn.Parameter]:
        ueb_ids = {id(p) for p in self.ueb.parameters()}
        return [p for p in self.parameters() if id(p) not in ueb_ids]


def expected_param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    """Shape of every learnable tensor as a pure function of the config.

    This is the machine-checked form of the weight manifest in
    docs/weight_manifest.md; checkpoints store exactly these names.
    """
    d = cfg.embed_dims
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cout, cin, k):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    def mdb(prefix, stage):
        dim, heads = d[stage], cfg.num_heads[stage]
        hidden = int(dim * cfg.mlp_ratio)
        for i in range(cfg.depths[stage]):
            blk = f"{prefix}.blocks.{i}"
            shapes[f"{blk}.norm1.norm.weight"] = (dim,)
            shapes[f"{blk}.norm1.norm.bias"] = (dim,)
            conv(f"{blk}.attn.qkv", dim * 3, dim, 1)
            conv(f"{blk}.attn.v_conv", dim, dim, 3)
            conv(f"{blk}.attn.proj", dim, dim, 1)
            shapes[f"{blk}.attn.relative_position_bias"] = ((2 * cfg.window_size - 1) ** 2, heads)
            shapes[f"{blk}.norm2.norm.weight"] = (dim,)
            shapes[f"{blk}.norm2.norm.bias"] = (dim,)
            conv(f"{blk}.mlp.0", hidden, dim, 1)
            conv(f"{blk}.mlp.2", dim, hidden, 1)
        if cfg.mdb_fusion:
            conv(f"{prefix}.fusion.conv1", dim, dim, 3)
            conv(f"{prefix}.fusion.conv2", dim, dim, 3)

    conv("shallow", d[0], 3, 3)
    mdb("stage0", 0)
    conv("down0", d[1], d[0], 3)
    mdb("stage1", 1)
    conv("down1", d[2], d[1], 3)
    mdb("stage2", 2)
    conv("up0", d[3] * 4, d[2], 1)
    conv("fuse0", d[3], d[3] + d[1], 1)
    mdb("stage3", 3)
    conv("up1", d[4] * 4, d[3], 1)
    conv("fuse1", d[4], d[4] + d[0], 1)
    mdb("stage4", 4)
    conv("recon_tail", d[4], d[4], 3)
    conv("recon_head", 12, d[4], 3)
    ueb_in = 3 if cfg.ueb_on_image else d[4]
    conv("ueb.conv1", ueb_in, ueb_in, 3)
    conv("ueb.conv2", 1, ueb_in, 3)
    return shapes


def expected_param_count(cfg: NetConfig) -> int:
    total = 0
    for shape in expected_param_shapes(cfg).values():
        n = 1
        for s in shape:
            n *= s
        total += n
    return total


class PatchDiscriminator(nn.Module):
    """4-layer stride-2 PatchGAN head used with the least-squares GAN objective."""

    def __init__(self, in_channels: int = 3):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, 16, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(16, 32, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(32, 64, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(64, 1, 4, stride=2, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)
