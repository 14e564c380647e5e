import pytest
import torch

from dacbio.dc_pathway import DcConfig, adaptation_input, disc_loss, gen_adv_loss
from dacbio.nets import Discriminator, ForwardResult
from dacbio.validation import ShapeError


class ScoreStub(torch.nn.Module):
    """Discriminator whose patch scores are the first input channel."""

    in_channels = 3
    space = "output"

    def forward(self, p):
        return p[:, :1]


def _maps(value, n=2):
    return torch.full((n, 3, 4, 4), float(value))


@pytest.mark.parametrize("he, lc, want", [(1.0, 0.0, 0.0), (0.5, 0.5, 0.25), (0.0, 0.0, 0.5)])
def test_ls_disc_loss_plug_in(he, lc, want):
    assert float(disc_loss(ScoreStub(), _maps(he), _maps(lc))) == pytest.approx(want)


@pytest.mark.parametrize("lc, want", [(1.0, 0.0), (0.0, 0.5), (0.5, 0.125)])
def test_ls_gen_loss_plug_in(lc, want):
    assert float(gen_adv_loss(ScoreStub(), _maps(lc))) == pytest.approx(want)


def test_ls_disc_zero_only_at_targets():
    assert float(disc_loss(ScoreStub(), _maps(1.0), _maps(1e-3))) > 0
    assert float(disc_loss(ScoreStub(), _maps(0.999), _maps(0.0))) > 0


def test_vanilla_losses_nonnegative():
    torch.manual_seed(0)
    d = Discriminator()
    p_he, p_lc = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        for fam in ("ls_gan", "vanilla_gan"):
            assert float(disc_loss(d, p_he, p_lc, fam)) >= 0
            assert float(gen_adv_loss(d, p_lc, fam)) >= 0
    # logit 0 on both sides: BCE is ln 2 for each
    assert float(disc_loss(ScoreStub(), _maps(0.0), _maps(0.0), "vanilla_gan")) == pytest.approx(0.693147, abs=1e-6)
    with pytest.raises(ValueError):
        disc_loss(ScoreStub(), _maps(0), _maps(0), "wgan")


def test_space_toggle_routes_tensors():
    res = ForwardResult(torch.rand(2, 3, 64, 64), torch.rand(2, 512, 2, 2))
    assert adaptation_input(res, "output").shape[1] == 3
    assert adaptation_input(res, "feature").shape[1] == 512
    with pytest.raises(ShapeError):
        disc_loss(Discriminator("output"), res.bottleneck, res.bottleneck)
    with pytest.raises(ShapeError):
        gen_adv_loss(Discriminator("feature"), res.probmap)


def test_generator_loss_leaves_discriminator_untouched():
    torch.manual_seed(0)
    d = Discriminator()
    before = [p.clone() for p in d.parameters()]
    p_lc = torch.rand(1, 3, 32, 32, requires_grad=True)
    for p in d.parameters():
        p.requires_grad_(False)
    gen_adv_loss(d, p_lc).backward()
    assert p_lc.grad is not None and p_lc.grad.abs().sum() > 0
    assert all(p.grad is None for p in d.parameters())
    assert all(torch.equal(a, b) for a, b in zip(before, d.parameters()))


def test_config_validation():
    with pytest.raises(ValueError):
        DcConfig(loss_family="wgan")
    with pytest.raises(ValueError):
        DcConfig(adapt_space="input")
    with pytest.raises(ValueError):
        DcConfig(beta=-1)
