import numpy as np
import pytest
import torch

from semexp.encoders import (
    ClipEncoder,
    PretrainedSegmenter,
    PromptSet,
    StubSegmenter,
    StubVisionLanguageEncoder,
    build_encoder,
    build_segmenter,
    cosine_sim,
    parameter_checksum,
)
from semexp.exceptions import BackendError, ContractError
from semexp.imaging import to_tensor

from conftest import make_image, numeric_grad, rel_err

# ------------------------------------------------------------ segmentation


def test_constant_image_is_one_segment(segmenter):
    seg = segmenter.segment(to_tensor(np.full((6, 7, 3), 0.3)))
    assert seg.shape == (1, 4, 6, 7)
    assert torch.all(seg.sum(1) == 1)
    assert torch.all(seg[:, 1] == 1)  # luma 0.3 falls in band [0.25, 0.5)


def test_half_black_half_white_splits_at_boundary(segmenter):
    img = np.zeros((4, 8, 3))
    img[:, 4:] = 1.0
    seg = segmenter.segment(to_tensor(img))
    assert torch.all(seg[0, 0, :, :4] == 1) and torch.all(seg[0, 3, :, 4:] == 1)
    assert int((seg.sum(dim=(2, 3)) > 0).sum()) == 2


def test_soft_segment_is_a_distribution(segmenter):
    x = to_tensor(make_image(0.5, size=5), torch.float64)
    soft = segmenter.soft_segment(x)
    assert soft.shape == (1, 4, 5, 5)
    assert torch.allclose(soft.sum(1), torch.ones(1, 5, 5, dtype=torch.float64))
    assert torch.equal(soft.argmax(1), segmenter.segment(x).argmax(1))


def test_pretrained_segmenter_without_backend_fails_loudly():
    with pytest.raises(BackendError):
        PretrainedSegmenter("missing.pt")
    with pytest.raises(BackendError):
        build_segmenter("pretrained", "missing.pt")
    with pytest.raises(BackendError):
        build_segmenter("nope")
    assert isinstance(build_segmenter("stub", num_channels=6), StubSegmenter)


# ------------------------------------------------------------ stub encoder


def test_stub_mid_grey_embeds_to_well_anchor(encoder):
    emb = encoder.encode_image(to_tensor(np.full((8, 8, 3), 0.5), torch.float64))[0]
    anchor = encoder.encode_prompt(encoder.anchor(0.5))
    assert torch.allclose(emb, anchor, atol=1e-5)
    assert emb.norm().item() == pytest.approx(1.0, abs=1e-12)


def test_stub_encode_deterministic_and_unit(encoder):
    x = to_tensor(make_image(0.3), torch.float64)
    a, b = encoder.encode_image(x), StubVisionLanguageEncoder().encode_image(x)
    assert torch.equal(a, b)
    assert a.norm().item() == pytest.approx(1.0, abs=1e-12)


def test_stub_prompts_distinct_and_unit(encoder):
    p, q = encoder.anchor(0.2), encoder.anchor(0.7)
    ep, eq = encoder.encode_prompt(p), encoder.encode_prompt(q)
    assert ep.norm().item() == pytest.approx(1.0, abs=1e-12)
    assert not torch.allclose(ep, eq)
    with pytest.raises(ContractError):
        encoder.encode_prompt(torch.zeros(6, dtype=torch.float64))


def test_stub_prompt_gradient_matches_finite_differences(encoder):
    c = encoder.encode_image(to_tensor(make_image(0.7), torch.float64))[0].detach()
    p = encoder.init_prompts(3).well.clone().requires_grad_(True)

    def f(v):
        return cosine_sim(encoder.encode_prompt(v), c)

    f(p).backward()
    assert rel_err(p.grad, numeric_grad(f, p.detach().clone())) < 1e-4


def test_stub_image_gradient_matches_finite_differences(encoder):
    target = encoder.encode_prompt(encoder.anchor(0.5))
    x = to_tensor(make_image(0.3, size=4), torch.float64).requires_grad_(True)

    def f(v):
        return cosine_sim(encoder.encode_image(v)[0], target)

    f(x).backward()
    assert rel_err(x.grad, numeric_grad(f, x.detach().clone())) < 1e-4


def test_stub_statistics_are_flip_invariant(encoder):
    x = to_tensor(make_image(0.3), torch.float64)
    assert torch.allclose(encoder.encode_image(x), encoder.encode_image(x.flip(-1).flip(-2)), atol=1e-14)


# -------------------------------------------------------------- cosine_sim


def test_cosine_sim_examples():
    a = torch.tensor([0.3, -1.2, 2.0])
    assert cosine_sim(a, a).item() == pytest.approx(1.0)
    assert cosine_sim(a, -a).item() == pytest.approx(-1.0)
    assert cosine_sim(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])).item() == 0.0
    with pytest.raises(ContractError):
        cosine_sim(torch.zeros(3), a)
    with pytest.raises(ContractError):
        cosine_sim(torch.ones(2), a)


# ---------------------------------------------------------------- prompts


def test_prompt_file_roundtrip(tmp_path, encoder):
    ps = encoder.init_prompts(1)
    back = PromptSet.load(ps.save(tmp_path / "prompts.bin"))
    assert all(torch.equal(a, b) for a, b in zip(ps.tensors(), back.tensors()))
    assert back.digest() == ps.digest() and back.backend == "stub"
    (tmp_path / "junk.bin").write_bytes(b"xx")
    with pytest.raises(ContractError):
        PromptSet.load(tmp_path / "junk.bin")


def test_prompt_set_requires_matching_shapes():
    with pytest.raises(ContractError):
        PromptSet(torch.zeros(6), torch.zeros(6), torch.zeros(5))


def test_build_encoder_selection():
    assert isinstance(build_encoder("stub"), StubVisionLanguageEncoder)
    with pytest.raises(BackendError):
        build_encoder("pretrained", "no/such/dir")
    with pytest.raises(BackendError):
        build_encoder("other")


# ------------------------------------------------------- CLIP (tiny random)


@pytest.fixture(scope="module")
def tiny_clip():
    transformers = pytest.importorskip("transformers")
    torch.manual_seed(0)
    cfg = transformers.CLIPConfig(
        text_config=dict(vocab_size=100, hidden_size=32, intermediate_size=64, num_hidden_layers=2,
                         num_attention_heads=4, max_position_embeddings=32, bos_token_id=98,
                         eos_token_id=99, pad_token_id=0),
        vision_config=dict(hidden_size=32, intermediate_size=64, num_hidden_layers=2, num_attention_heads=4,
                           image_size=32, patch_size=8),
        projection_dim=16,
    )
    model = transformers.CLIPModel(cfg).eval()
    ids = {"well": [5, 6], "under": [7], "over": [8]}
    return model, ClipEncoder(model=model, n_ctx=4, class_token_ids=ids)


def test_clip_prompt_matches_reference_text_path(tiny_clip):
    model, enc = tiny_clip
    ctx_ids = torch.tensor([10, 11, 12, 13])
    params = model.text_model.embeddings.token_embedding(ctx_ids).detach()
    ours = enc.encode_prompt(params, "well")
    ids = torch.tensor([[98, 10, 11, 12, 13, 5, 6, 99]])
    with torch.no_grad():
        ref = model.get_text_features(input_ids=ids)
    ref = ref if isinstance(ref, torch.Tensor) else ref.pooler_output
    ref = ref[0] / ref[0].norm()
    assert torch.allclose(ours, ref, atol=1e-5)


def test_clip_prompt_tuning_touches_only_prompts(tiny_clip):
    from semexp.pseudogt import tune_prompts

    model, enc = tiny_clip
    before = parameter_checksum(enc.parameters())
    groups = {c: [make_image(m, size=20, seed=i) for i in range(2)] for c, m in
              (("well", 0.5), ("under", 0.1), ("over", 0.9))}
    init = enc.init_prompts(0)
    out = tune_prompts(groups, init, enc, steps=3, lr=0.01)
    assert parameter_checksum(enc.parameters()) == before
    assert not torch.equal(out.prompts.well, init.well)
    emb = enc.encode_image(to_tensor(make_image(0.4, size=20)))
    assert emb.shape == (1, 16)
    assert emb.norm().item() == pytest.approx(1.0, abs=1e-5)


def test_clip_image_is_differentiable(tiny_clip):
    _, enc = tiny_clip
    x = to_tensor(make_image(0.4, size=20)).requires_grad_(True)
    enc.encode_image(x).sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()
