"""The eleven loss terms and the composite teacher/student objectives.

Per-pixel residuals are channel-summed L1 throughout, so a "per-pixel
residual of r" means the RGB absolute differences at that pixel sum to r.
The single-channel log-uncertainty map broadcasts across RGB.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .core import LossWeights
from .network import DehazeNet, PatchDiscriminator

LN2 = 0.6931471805599453


@dataclass
class LossReport:
    total: torch.Tensor
    components: dict[str, torch.Tensor] = field(default_factory=dict)

    def scalar_components(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.components.items()}

    def log_line(self) -> str:
        parts = [f"{k}={v:.6e}" for k, v in sorted(self.scalar_components().items())]
        return "\t".join(parts + [f"total={float(self.total.detach()):.6e}"])


def _pixel_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Channel-summed absolute residual, [B,3,H,W] pair -> [B,1,H,W]."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().sum(dim=1, keepdim=True)


def laplace_loglik(gt: torch.Tensor, pred: torch.Tensor,
                   log_theta: torch.Tensor) -> torch.Tensor:
    """Per-pixel log-likelihood under a Laplace noise model with Jeffreys prior:
    -|gt - pred|_1 / theta - 2 ln theta - ln 2."""
    r = _pixel_l1(gt, pred)
    return -r * torch.exp(-log_theta) - 2.0 * log_theta - LN2


def loss_ue(gt: torch.Tensor, pred_coarse: torch.Tensor,
            log_theta: torch.Tensor) -> torch.Tensor:
    """Uncertainty estimation loss: mean_i exp(-ln th_i) |r_i|_1 + 2 ln th_i.

    The minimizer over theta for a fixed residual r is theta* = r/2.
    """
    r = _pixel_l1(gt, pred_coarse)
    return (torch.exp(-log_theta) * r + 2.0 * log_theta).mean()


def _uncertainty_weights(log_theta: torch.Tensor) -> torch.Tensor:
    """ln theta minus its per-image spatial minimum; detached guidance signal."""
    lt = log_theta.detach()
    min_lt = lt.amin(dim=(2, 3), keepdim=True)
    return lt - min_lt


def loss_ugs(gt: torch.Tensor, pred_student: torch.Tensor,
             log_theta: torch.Tensor) -> torch.Tensor:
    """Uncertainty-guided supervised loss: min-shifted ln theta weighted L1."""
    return (_uncertainty_weights(log_theta) * _pixel_l1(gt, pred_student)).mean()


def loss_ugu(pseudo_clean: torch.Tensor, re_dehazed: torch.Tensor,
             log_theta_real: torch.Tensor) -> torch.Tensor:
    """Uncertainty-guided unsupervised identity loss on pseudo-clean inputs."""
    return (_uncertainty_weights(log_theta_real) * _pixel_l1(pseudo_clean, re_dehazed)).mean()


def loss_adversarial(disc: PatchDiscriminator, fake: torch.Tensor, mode: str,
                     real: torch.Tensor | None = None) -> torch.Tensor:
    """Least-squares GAN objective."""
    if mode == "generator":
        return ((disc(fake) - 1.0) ** 2).mean()
    if mode == "discriminator":
        if real is None:
            raise ValueError("discriminator mode requires real samples")
        return 0.5 * ((disc(real) - 1.0) ** 2).mean() + 0.5 * (disc(fake.detach()) ** 2).mean()
    raise ValueError(f"unknown adversarial mode {mode!r}")


def loss_identity(clean: torch.Tensor, net_output_on_clean: torch.Tensor) -> torch.Tensor:
    return (net_output_on_clean - clean).abs().mean()


def dark_channel(img: torch.Tensor, patch: int = 7) -> torch.Tensor:
    """Min over RGB then min over a patch x patch neighborhood (replicate pad)."""
    if patch % 2 == 0:
        raise ValueError("patch size must be odd")
    mins = img.amin(dim=1, keepdim=True)
    pad = patch // 2
    mins = F.pad(mins, (pad, pad, pad, pad), mode="replicate")
    return -F.max_pool2d(-mins, patch, stride=1).squeeze(1)


def loss_dc(dehazed: torch.Tensor, patch: int = 7) -> torch.Tensor:
    return dark_channel(dehazed, patch).mean()


def loss_tv(img: torch.Tensor) -> torch.Tensor:
    """Anisotropic total variation over valid forward differences."""
    if img.shape[-1] < 2 and img.shape[-2] < 2:
        raise ValueError("total variation needs H or W >= 2")
    total = img.new_zeros(())
    if img.shape[-1] >= 2:
        total = total + (img[..., :, 1:] - img[..., :, :-1]).abs().mean()
    if img.shape[-2] >= 2:
        total = total + (img[..., 1:, :] - img[..., :-1, :]).abs().mean()
    return total


def loss_kl(v_real: torch.Tensor, v_syn: torch.Tensor,
            temperature: float = 1.0) -> torch.Tensor:
    """KL(softmax(v_syn) || softmax(v_real)), the synthetic embedding acting
    as the pseudo-label; mean over the batch, always >= 0."""
    log_p = F.log_softmax(v_syn.detach() / temperature, dim=-1)
    log_q = F.log_softmax(v_real / temperature, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=-1).mean()


def combine_components(components: dict[str, torch.Tensor],
                       weights: LossWeights) -> LossReport:
    """Weighted sum of named loss components into a LossReport."""
    lam = {"ue": weights.lambda1, "ugs": weights.lambda1, "adv": weights.lambda2,
           "ide": weights.lambda3, "ugu": weights.lambda3, "dc": weights.lambda4,
           "tv": weights.lambda5, "kl": weights.lambda6, "l1": weights.lambda1}
    total = None
    for name, value in components.items():
        term = lam[name] * value
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no loss components")
    return LossReport(total=total, components=dict(components))


@dataclass
class ModelBundle:
    teacher: DehazeNet
    disc: PatchDiscriminator
    student: DehazeNet | None = None


@dataclass(frozen=True)
class LossFlags:
    """Ablation and interpretation switches for the composite objectives."""

    use_uncertainty: bool = True    # off: plain L1 in place of the uncertainty losses
    use_kl: bool = True
    ugu_consistency: bool = False   # alternative reading: |J_j - G2(I_j)| instead of identity on J_j
    base_l1: bool = False           # extra plain L1 term beside loss_ugs (ablation probe only)
    kl_temperature: float = 1.0


def teacher_loss(batch_syn: tuple[torch.Tensor, torch.Tensor] | None,
                 batch_real: torch.Tensor | None,
                 nets: ModelBundle, weights: LossWeights, branch: str,
                 flags: LossFlags = LossFlags()) -> LossReport:
    """Composite teacher objective for one alternation branch."""
    if branch == "supervised":
        if batch_syn is None:
            raise ValueError("supervised branch requires paired synthetic data")
        hazy, clean = batch_syn
        out = nets.teacher(hazy, want_uncertainty=True)
        if flags.use_uncertainty:
            rec = loss_ue(clean, out.dehazed, out.log_theta)
            components = {"ue": rec}
        else:
            components = {"l1": loss_identity(clean, out.dehazed)}
        components["adv"] = loss_adversarial(nets.disc, out.dehazed, "generator")
        return combine_components(components, weights)
    if branch == "unsupervised":
        if batch_syn is None or batch_real is None:
            raise ValueError("unsupervised branch requires clean and real images")
        _, clean = batch_syn
        on_clean = nets.teacher(clean).dehazed
        dehazed_real = nets.teacher(batch_real).dehazed
        components = {
            "ide": loss_identity(clean, on_clean),
            "dc": loss_dc(dehazed_real),
            "tv": loss_tv(dehazed_real),
        }
        return combine_components(components, weights)
    raise ValueError(f"unknown branch {branch!r}")


def student_loss(batch_syn: tuple[torch.Tensor, torch.Tensor] | None,
                 batch_real: torch.Tensor | None,
                 nets: ModelBundle, weights: LossWeights, branch: str,
                 flags: LossFlags = LossFlags()) -> LossReport:
    """Composite student objective; the teacher supplies frozen guidance."""
    if nets.student is None:
        raise ValueError("student network missing from bundle")
    if branch == "supervised":
        if batch_syn is None:
            raise ValueError("supervised branch requires paired synthetic data")
        hazy, clean = batch_syn
        with torch.no_grad():
            log_theta = nets.teacher(hazy, want_uncertainty=True).log_theta
        pred = nets.student(hazy).dehazed
        if flags.use_uncertainty:
            components = {"ugs": loss_ugs(clean, pred, log_theta)}
            if flags.base_l1:
                components["l1"] = loss_identity(clean, pred)
        else:
            components = {"l1": loss_identity(clean, pred)}
        components["adv"] = loss_adversarial(nets.disc, pred, "generator")
        return combine_components(components, weights)
    if branch == "unsupervised":
        if batch_real is None:
            raise ValueError("unsupervised branch requires real hazy images")
        with torch.no_grad():
            t_out = nets.teacher(batch_real, want_uncertainty=True)
            pseudo_clean = t_out.dehazed
            log_theta_real = t_out.log_theta
        s_real = nets.student(batch_real)
        if flags.ugu_consistency:
            re_dehazed = s_real.dehazed
        else:
            re_dehazed = nets.student(pseudo_clean).dehazed
        if flags.use_uncertainty:
            components = {"ugu": loss_ugu(pseudo_clean, re_dehazed, log_theta_real)}
        else:
            components = {"ugu": loss_identity(pseudo_clean, re_dehazed)}
        components["dc"] = loss_dc(s_real.dehazed)
        components["tv"] = loss_tv(s_real.dehazed)
        if flags.use_kl:
            if batch_syn is None:
                raise ValueError("KL distillation requires a synthetic batch")
            hazy_syn = batch_syn[0]
            with torch.no_grad():
                v_syn = nets.teacher(hazy_syn).kl_embedding
            components["kl"] = loss_kl(s_real.kl_embedding, v_syn,
                                       temperature=flags.kl_temperature)
        return combine_components(components, weights)
    raise ValueError(f"unknown branch {branch!r}")
