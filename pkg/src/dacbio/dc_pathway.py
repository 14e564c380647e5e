"""Domain calibration: adversarial alignment of low-cost predictions to the high-end ones."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .nets import Discriminator, ForwardResult
from .validation import ShapeError

LOSS_FAMILIES = ("ls_gan", "vanilla_gan")
SPACES = ("output", "feature")


@dataclass(frozen=True)
class DcConfig:
    loss_family: str = "ls_gan"
    adapt_space: str = "output"
    beta: float = 1e-3

    def __post_init__(self):
        if self.loss_family not in LOSS_FAMILIES:
            raise ValueError(f"loss_family must be one of {LOSS_FAMILIES}")
        if self.adapt_space not in SPACES:
            raise ValueError(f"adapt_space must be one of {SPACES}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def adaptation_input(result: ForwardResult, space: str) -> torch.Tensor:
    """Pick the tensor the discriminator sees: probability map or bottleneck."""
    return result.probmap if space == "output" else result.bottleneck


def _check(disc, x: torch.Tensor):
    expected = getattr(disc, "in_channels", None)
    if expected is not None and x.shape[1] != expected:
        raise ShapeError(f"discriminator built for {getattr(disc, 'space', '?')} space expects "
                         f"{expected} channels, got {x.shape[1]}")


def disc_loss(disc: Discriminator, p_he: torch.Tensor, p_lc: torch.Tensor,
              loss_family: str = "ls_gan") -> torch.Tensor:
    """Discriminator objective: high-end patches -> 1, low-cost patches -> 0.

    Inputs should already be detached from the generator graph.
    """
    _check(disc, p_he)
    _check(disc, p_lc)
    s_he, s_lc = disc(p_he), disc(p_lc)
    if loss_family == "ls_gan":
        return 0.5 * ((s_he - 1.0) ** 2).mean() + 0.5 * (s_lc**2).mean()
    if loss_family == "vanilla_gan":
        return 0.5 * (F.binary_cross_entropy_with_logits(s_he, torch.ones_like(s_he))
                      + F.binary_cross_entropy_with_logits(s_lc, torch.zeros_like(s_lc)))
    raise ValueError(f"unknown loss family {loss_family!r}")


def gen_adv_loss(disc: Discriminator, p_lc: torch.Tensor, loss_family: str = "ls_gan") -> torch.Tensor:
    """Generator objective: make low-cost patches score as high-end."""
    _check(disc, p_lc)
    s_lc = disc(p_lc)
    if loss_family == "ls_gan":
        return 0.5 * ((s_lc - 1.0) ** 2).mean()
    if loss_family == "vanilla_gan":
        # non-saturating form
        return F.binary_cross_entropy_with_logits(s_lc, torch.ones_like(s_lc))
    raise ValueError(f"unknown loss family {loss_family!r}")
