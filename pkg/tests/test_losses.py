import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semexp.exceptions import ContractError
from semexp.losses import (
    LossWeights,
    SemanticFeatureTriple,
    cos_color_loss,
    gram,
    ipa_loss,
    mse_loss,
    semantic_triple,
    sfc_loss,
    spc_loss,
    total_loss,
)
from semexp.network import ExposureNet

from conftest import TINY, make_image, numeric_grad, rel_err


def rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def triple(c=3, size=4, seed=0):
    return SemanticFeatureTriple(rand(1, c, size, size, seed=seed), rand(1, c, size, size, seed=seed + 1),
                                 rand(1, c, size, size, seed=seed + 2))


def sfc_oracle(f, g, l, eps=1e-8):
    """Loop-per-channel numpy version of the ratio-form consistency term."""
    f, g, l = (np.asarray(t, dtype=np.float64)[0] for t in (f, g, l))
    total = 0.0
    for k in range(f.shape[0]):
        a, b, c = f[k].ravel(), g[k].ravel(), l[k].ravel()
        d1, d2 = np.mean(np.abs(a - b)), np.mean(np.abs(a - c))
        ga, gb, gc = a @ a / a.size, b @ b / b.size, c @ c / c.size
        e1, e2 = abs(ga - gb), abs(ga - gc)
        total += d1 / (d1 + d2 + eps) + e1 / (e1 + e2 + eps)
    return total


# --------------------------------------------------------------------- SFC


def test_gram_hand_value():
    x = torch.tensor([[[1.0, 2.0]], [[3.0, 4.0]]])  # (C=2, H=1, W=2)
    assert torch.allclose(gram(x), torch.tensor([[2.5, 5.5], [5.5, 12.5]]))


def test_sfc_matches_oracle():
    t = triple(c=4, size=5, seed=3)
    assert sfc_loss(t).item() == pytest.approx(sfc_oracle(t.output, t.pseudo_gt, t.input), abs=1e-12)


def test_sfc_poles():
    t = triple(c=3)
    at_pgt = SemanticFeatureTriple(t.pseudo_gt.clone(), t.pseudo_gt, t.input)
    at_input = SemanticFeatureTriple(t.input.clone(), t.pseudo_gt, t.input)
    assert sfc_loss(at_pgt).item() == pytest.approx(0.0, abs=1e-6)
    assert sfc_loss(at_input).item() == pytest.approx(2 * 3, abs=1e-6)


def test_sfc_constant_maps_midway():
    one, zero = torch.ones(1, 1, 2, 2, dtype=torch.float64), torch.zeros(1, 1, 2, 2, dtype=torch.float64)
    t = SemanticFeatureTriple(0.5 * one, one, zero)
    # map term 0.5 / 1.0; gram term |0.25 - 1| / (0.75 + 0.25)
    assert sfc_loss(t).item() == pytest.approx(0.5 + 0.75, abs=1e-7)


def test_sfc_frobenius_mode_and_shape_check():
    t = triple()
    assert sfc_loss(t, gram_mode="frobenius").item() == pytest.approx(sfc_loss(t).item(), abs=1e-12)  # 1x1 grams
    with pytest.raises(ContractError):
        SemanticFeatureTriple(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 4, 4))


def test_sfc_gradient():
    t = triple(c=2, size=3, seed=7)
    f = t.output.clone().requires_grad_(True)

    def fn(v):
        return sfc_loss(SemanticFeatureTriple(v, t.pseudo_gt, t.input))

    fn(f).backward()
    assert rel_err(f.grad, numeric_grad(fn, t.output.clone())) < 1e-4


# --------------------------------------------------------------------- IPA


def test_ipa_equal_sims_is_two_log_two():
    assert ipa_loss(0.3, 0.3, 0.3).item() == pytest.approx(2 * math.log(2), abs=1e-9)


def test_ipa_hand_value_and_batch_mean():
    want = math.log1p(math.exp(-0.5)) + math.log1p(math.exp(0.25))
    assert ipa_loss(0.5, 0.0, 0.75).item() == pytest.approx(want, abs=1e-12)
    sims = torch.tensor([[0.5, 0.0, 0.75], [0.3, 0.3, 0.3]], dtype=torch.float64)
    assert ipa_loss(*sims.unbind(1)).item() == pytest.approx((want + 2 * math.log(2)) / 2, abs=1e-12)


def test_ipa_gradient():
    s = rand(3, seed=2).requires_grad_(True)

    def fn(v):
        return ipa_loss(v[0], v[1], v[2])

    fn(s).backward()
    assert rel_err(s.grad, numeric_grad(fn, s.detach().clone())) < 1e-6


def test_spc_combines_terms():
    w = LossWeights(beta1=2.0, beta2=0.5)
    assert spc_loss(1.5, 2.0, w) == pytest.approx(4.0)


# ------------------------------------------------------------- colour/MSE


def test_cos_color_hand_values():
    red = torch.zeros(1, 3, 1, 2, dtype=torch.float64)
    red[:, 0] = 1.0
    green = torch.zeros_like(red)
    green[:, 1] = 1.0
    assert cos_color_loss(red, green).item() == pytest.approx(1.0)
    assert cos_color_loss(red, 3 * red).item() == pytest.approx(0.0, abs=1e-15)
    half = red.clone()
    half[..., 1] = 0.0  # one black pixel contributes 0
    assert cos_color_loss(half, green).item() == pytest.approx(0.5)
    with pytest.raises(ContractError):
        cos_color_loss(red, torch.zeros(1, 3, 2, 2))


def test_cos_color_gradient():
    out = rand(1, 3, 2, 2, seed=4) + 0.1
    pgt = rand(1, 3, 2, 2, seed=5) + 0.1
    x = out.clone().requires_grad_(True)
    cos_color_loss(x, pgt).backward()
    assert rel_err(x.grad, numeric_grad(lambda v: cos_color_loss(v, pgt), out.clone())) < 1e-4


def test_mse_uniform_difference():
    a = torch.full((1, 3, 4, 4), 0.3, dtype=torch.float64)
    assert mse_loss(a, a + 0.1).item() == pytest.approx(0.01, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_are_non_negative(seed):
    t = triple(c=2, size=3, seed=seed)
    sims = rand(2, 3, seed=seed) * 2 - 1
    total, b = total_loss(rand(1, 3, 3, 3, seed=seed), rand(1, 3, 3, 3, seed=seed + 9), t, sims)
    assert min(b.mse, b.cos, b.sfc, b.ipa, b.spc) >= 0.0 and total.item() >= 0.0


# ------------------------------------------------------------------- total


def _total_fixture():
    out, pgt = rand(1, 3, 2, 2, seed=10), rand(1, 3, 2, 2, seed=11)
    return out, pgt, triple(c=2, size=2, seed=12), torch.tensor([[0.4, 0.2, 0.1]], dtype=torch.float64)


def test_breakdown_sums_to_total():
    out, pgt, t, sims = _total_fixture()
    w = LossWeights()
    total, b = total_loss(out, pgt, t, sims, w)
    assert b.total == total.item()
    assert b.spc == pytest.approx(w.beta1 * b.sfc + w.beta2 * b.ipa, abs=1e-12)
    assert b.total == pytest.approx(w.lambda1 * b.mse + w.lambda2 * b.cos + w.lambda3 * b.spc, abs=1e-12)


def test_disabling_ipa_drops_exactly_its_share():
    out, pgt, t, sims = _total_fixture()
    w = LossWeights()
    full, b = total_loss(out, pgt, t, sims, w)
    no_ipa, b2 = total_loss(out, pgt, t, sims, LossWeights(use_ipa=False))
    assert b2.ipa == 0.0
    assert (full - no_ipa).item() == pytest.approx(w.lambda3 * w.beta2 * b.ipa, abs=1e-12)


@pytest.mark.parametrize("switch,zeroed", [("use_spc", ("sfc", "ipa", "spc")), ("use_cos", ("cos",)),
                                           ("use_sfc", ("sfc",)), ("use_ipa", ("ipa",))])
def test_switches_zero_their_terms(switch, zeroed):
    out, pgt, t, sims = _total_fixture()
    _, b = total_loss(out, pgt, t, sims, LossWeights(**{switch: False}))
    assert all(getattr(b, k) == 0.0 for k in zeroed)
    assert b.mse > 0


def test_all_weights_zero_gives_zero():
    out, pgt, t, sims = _total_fixture()
    w = LossWeights(lambda1=0.0, lambda2=0.0, lambda3=0.0)
    assert total_loss(out, pgt, t, sims, w)[0].item() == 0.0


def test_weight_validation():
    with pytest.raises(ContractError):
        LossWeights(lambda1=-1.0)
    with pytest.raises(ContractError):
        LossWeights(epsilon=0.0)
    with pytest.raises(ContractError):
        LossWeights(gram_mode="max")


def test_total_gradient():
    out, pgt, t, sims = _total_fixture()

    def fn(v):
        return total_loss(v, pgt, SemanticFeatureTriple(t.output + v.mean(1, keepdim=True)[:, :1].expand_as(t.output),
                                                        t.pseudo_gt, t.input), sims)[0]

    x = out.clone().requires_grad_(True)
    fn(x).backward()
    assert rel_err(x.grad, numeric_grad(fn, out.clone())) < 1e-4


def test_semantic_triple_routes_gradient_to_output_only(segmenter):
    model = ExposureNet(TINY).double()
    img = torch.from_numpy(make_image(0.4, size=8)).permute(2, 0, 1)[None]
    out = (img * 1.1).requires_grad_(True)
    t = semantic_triple(segmenter, model.semantic.conv, out, img * 1.2, img)
    assert t.output.requires_grad and not t.pseudo_gt.requires_grad and not t.input.requires_grad
    sfc_loss(t).backward()
    assert out.grad is not None and model.semantic.conv.weight.grad is None
