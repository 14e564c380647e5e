"""Segmentation calibration: virtual adversarial perturbations of low-cost inputs.

The perturbation search takes a random direction, follows the gradient of
the prediction divergence with respect to the input, and rescales the result
to radius ``epsilon``.  The consistency loss then penalises the divergence
between the clean prediction (held fixed) and the prediction on the perturbed
input.
"""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

CLAMP = 1e-7


@dataclass(frozen=True)
class VatConfig:
    epsilon: float = 0.05
    n_power_iters: int = 1
    xi: float = 1e-2
    alpha: float = 0.1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.n_power_iters < 1:
            raise ValueError("n_power_iters must be >= 1")
        if self.xi <= 0:
            raise ValueError("xi must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def bernoulli_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Mean over all elements of KL(Bernoulli(p) || Bernoulli(q))."""
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(q.shape)}")
    p = p.clamp(CLAMP, 1 - CLAMP)
    q = q.clamp(CLAMP, 1 - CLAMP)
    kl = p * (torch.log(p) - torch.log(q)) + (1 - p) * (torch.log1p(-p) - torch.log1p(-q))
    return kl.mean()


def scale_to_norm(g: torch.Tensor, radius: float, fallback: torch.Tensor | None = None) -> torch.Tensor:
    """Rescale each sample of ``g`` to L2 norm ``radius``.

    Samples whose norm is below 1e-12 take the direction of ``fallback``.
    """
    flat = g.reshape(g.shape[0], -1)
    norm = flat.norm(dim=1, keepdim=True)
    bad = norm < 1e-12
    if bad.any():
        if fallback is None:
            raise ValueError("zero-norm direction and no fallback given")
        fb = fallback.reshape(g.shape[0], -1)
        flat = torch.where(bad, fb, flat)
        norm = flat.norm(dim=1, keepdim=True)
    return (radius * flat / norm).reshape(g.shape)


def _probs(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    out = model(x)
    return out.probmap if hasattr(out, "probmap") else out


@contextlib.contextmanager
def frozen_bn_stats(model: nn.Module):
    """Keep batch-norm running statistics unchanged during auxiliary forward passes."""
    saved = []
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            saved.append((m, m.momentum))
            m.momentum = 0.0
    try:
        yield
    finally:
        for m, mom in saved:
            m.momentum = mom


def compute_adv_perturbation(model: nn.Module, x: torch.Tensor, cfg: VatConfig,
                             generator: torch.Generator | None = None,
                             target: torch.Tensor | None = None) -> torch.Tensor:
    """Adversarial input perturbation with per-sample L2 norm ``cfg.epsilon``.

    ``target`` is the clean prediction; it is recomputed without gradient when
    omitted.  Model parameters receive no gradient from this search.
    """
    x = x.detach()
    with frozen_bn_stats(model):
        if target is None:
            with torch.no_grad():
                target = _probs(model, x)
        target = target.detach()
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype).to(x.device)
        noise = scale_to_norm(noise, 1.0)
        d = cfg.xi * noise
        g = d
        for _ in range(cfg.n_power_iters):
            d = d.detach().requires_grad_(True)
            kl = bernoulli_kl(target, _probs(model, x + d))
            g = torch.autograd.grad(kl, d, allow_unused=True)[0] if kl.requires_grad else None
            if g is None:  # output ignores the input: flat loss
                g = torch.zeros_like(d)
            d = scale_to_norm(g, cfg.xi, fallback=noise)
    return scale_to_norm(g.detach(), cfg.epsilon, fallback=noise)


def vat_loss(model: nn.Module, x: torch.Tensor, xi_adv: torch.Tensor,
             target: torch.Tensor | None = None) -> torch.Tensor:
    """Consistency loss KL(G(x) || G(x + xi_adv)) with the clean branch held fixed.

    The perturbed input is deliberately not clipped to [0, 1].
    """
    if target is None:
        with torch.no_grad(), frozen_bn_stats(model):
            target = _probs(model, x)
    return bernoulli_kl(target.detach(), _probs(model, x + xi_adv.detach()))
