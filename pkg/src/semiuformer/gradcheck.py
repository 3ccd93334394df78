"""Central finite-difference verification of every loss and layer gradient.

All checks run on float64 shadow copies with h = 1e-3. Inputs for the
kink-bearing operations (|.|, min) are built from permuted lattices so every
pairwise gap clears the difference stencil.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from . import losses
from .core import seeded_rng
from .network import (DehazeformerBlock, MixDehazeformerBlock, PatchDiscriminator,
                      UncertaintyHead, WindowAttentionPC)

H_STEP = 1e-3
TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def finite_difference_gradient(f: Callable[[torch.Tensor], torch.Tensor],
                               x: torch.Tensor, h: float = H_STEP) -> torch.Tensor:
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            f_plus = float(f(x))
            flat[i] = orig - h
            f_minus = float(f(x))
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def check_gradient(name: str, f: Callable[[torch.Tensor], torch.Tensor],
                   x0: torch.Tensor, h: float = H_STEP) -> CheckResult:
    """Analytic (autograd) vs central-difference gradient of a scalar function."""
    x = x0.detach().double().clone().requires_grad_(True)
    f(x).backward()
    analytic = x.grad.detach().clone()
    numeric = finite_difference_gradient(f, x.detach().clone(), h=h)
    scale = max(float(analytic.abs().max()), float(numeric.abs().max()), 1e-8)
    max_rel = float((analytic - numeric).abs().max()) / scale
    return CheckResult(name=name, max_rel_err=max_rel)


def _lattice(g: torch.Generator, *shape) -> torch.Tensor:
    """Random tensor whose values sit on a well-separated permuted lattice, so
    |.| and min subgradients are unambiguous under the FD stencil."""
    n = 1
    for s in shape:
        n *= s
    vals = (torch.randperm(n, generator=g).double() + 0.5) / n
    return (0.05 + 0.9 * vals).reshape(shape)


def _module_check(name: str, module: torch.nn.Module, x0: torch.Tensor,
                  g: torch.Generator) -> CheckResult:
    module = module.double()
    probe = torch.randn(module(x0.double()).shape, generator=g, dtype=torch.float64)

    def f(x):
        return (module(x) * probe).sum()

    return check_gradient(name, f, x0)


def run_suite(seed: int = 0, extra: list[tuple[str, Callable, torch.Tensor]] | None = None
              ) -> list[CheckResult]:
    g = seeded_rng(seed)
    torch.manual_seed(seed)
    results: list[CheckResult] = []

    # ---- loss gradients ----
    gt = _lattice(g, 1, 3, 6, 6)
    pred = _lattice(g, 1, 3, 6, 6)
    log_theta = (2.0 * _lattice(g, 1, 1, 6, 6) - 1.0)

    results.append(check_gradient(
        "loss_laplace_loglik", lambda x: losses.laplace_loglik(gt, x, log_theta).sum(), pred))
    results.append(check_gradient(
        "loss_ue_pred", lambda x: losses.loss_ue(gt, x, log_theta), pred))
    results.append(check_gradient(
        "loss_ue_theta", lambda lt: losses.loss_ue(gt, pred, lt), log_theta))
    results.append(check_gradient(
        "loss_ugs", lambda x: losses.loss_ugs(gt, x, log_theta), pred))
    results.append(check_gradient(
        "loss_ugu", lambda x: losses.loss_ugu(gt, x, log_theta), pred))
    results.append(check_gradient(
        "loss_identity", lambda x: losses.loss_identity(gt, x), pred))
    results.append(check_gradient(
        "loss_dc", lambda x: losses.loss_dc(x, patch=3), _lattice(g, 1, 3, 6, 6)))
    results.append(check_gradient(
        "loss_tv", lambda x: losses.loss_tv(x), _lattice(g, 1, 3, 6, 6)))

    v_syn = torch.randn(2, 8, generator=g, dtype=torch.float64)
    results.append(check_gradient(
        "loss_kl", lambda v: losses.loss_kl(v, v_syn),
        torch.randn(2, 8, generator=g, dtype=torch.float64)))

    disc = PatchDiscriminator().double()
    results.append(check_gradient(
        "loss_adversarial_gen",
        lambda x: losses.loss_adversarial(disc, x, "generator"),
        _lattice(g, 1, 3, 16, 16)))

    # ---- layer gradients ----
    results.append(_module_check(
        "shallow_conv", torch.nn.Conv2d(3, 8, 3, padding=1), _lattice(g, 1, 3, 8, 8), g))
    results.append(_module_check(
        "w_mhsa_pc", WindowAttentionPC(8, 4, 2, shift=False), _lattice(g, 1, 8, 8, 8), g))
    results.append(_module_check(
        "w_mhsa_pc_shifted", WindowAttentionPC(8, 4, 2, shift=True), _lattice(g, 1, 8, 8, 8), g))
    results.append(_module_check(
        "dehazeformer_block", DehazeformerBlock(8, 4, 2, 2.0), _lattice(g, 1, 8, 8, 8), g))
    results.append(_module_check(
        "mix_dehazeformer_block", MixDehazeformerBlock(8, 1, 4, 2, 2.0),
        _lattice(g, 1, 8, 8, 8), g))
    results.append(_module_check(
        "ueb_head", UncertaintyHead(8), _lattice(g, 1, 8, 8, 8), g))

    if extra:
        for name, f, x0 in extra:
            results.append(check_gradient(name, f, x0))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'}\t{r.name}\tmax_rel_err={r.max_rel_err:.3e}"
             for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results)} checks, {n_fail} failures (tolerance {TOLERANCE})")
    return "\n".join(lines)
