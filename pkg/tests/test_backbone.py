import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tadp.backbone import (
    SD_SCALE_FACTOR,
    AttentionSite,
    BackboneConfig,
    DimensionMismatchError,
    FeatureScale,
    ScaledLatent,
    StubBackboneError,
    TokenOverflowError,
    aggregate_attention,
    decode,
    encode_and_scale,
    encode_raw,
    extract_features,
    image_variation,
    load_backbone,
    make_stub_backbone,
    unscale,
)
from tadp.backbone.config import FeatureBundle


def small_config(embed_dim=32, max_tokens=16, **kw):
    return BackboneConfig(
        feature_scales=kw.get("scales", (FeatureScale("s8", 16, 8), FeatureScale("s16", 32, 16))),
        attention_sites=kw.get("sites", (AttentionSite("L0", 4, 8),)),
        embed_dim=embed_dim,
        max_text_tokens=max_tokens,
    )


def test_scale_factor_value():
    assert SD_SCALE_FACTOR == 0.18215


def test_scaled_latent_scalar_probes():
    lat = ScaledLatent(torch.tensor([1.0], dtype=torch.float64) * SD_SCALE_FACTOR)
    assert lat.values.item() == 0.18215
    assert unscale(ScaledLatent(torch.tensor([0.18215]))).item() == pytest.approx(1.0, rel=1e-7)
    assert torch.equal(unscale(ScaledLatent(torch.zeros(4))), torch.zeros(4))


def test_scaled_latent_is_raw_times_factor(stub):
    x = torch.rand(1, 3, 64, 64) * 2 - 1
    raw = encode_raw(x, stub)
    assert torch.equal(encode_and_scale(x, stub).values, raw * SD_SCALE_FACTOR)
    assert torch.equal(ScaledLatent(torch.zeros(4) * SD_SCALE_FACTOR).values, torch.zeros(4))


def test_encode_round_trip_and_determinism(stub):
    x = torch.rand(2, 3, 64, 64) * 2 - 1
    a, b = encode_and_scale(x, stub), encode_and_scale(x, stub)
    assert torch.equal(a.values, b.values)
    assert a.timestep == 0 and a.scale_factor == SD_SCALE_FACTOR
    raw = encode_raw(x, stub)
    rel = (unscale(a) - raw).abs().max() / raw.abs().max()
    assert rel < 1e-6


def test_decoder_reconstructs(stub):
    x = torch.rand(1, 3, 64, 64) * 2 - 1
    y = decode(encode_and_scale(x, stub), stub)
    assert y.shape == x.shape
    # the stub autoencoder is a blockwise projection; smooth images survive it
    smooth = torch.nn.functional.interpolate(torch.rand(1, 3, 8, 8) * 2 - 1, size=64, mode="nearest")
    rec = decode(encode_and_scale(smooth, stub), stub)
    assert (rec - smooth).abs().max() < 1e-4


def test_encode_rejects_bad_size(stub):
    with pytest.raises(DimensionMismatchError):
        encode_and_scale(torch.zeros(1, 3, 60, 64), stub)


def test_extract_features_layout_example():
    cfg = small_config(embed_dim=768, max_tokens=77)
    bb = make_stub_backbone(cfg, seed=0)
    lat = encode_and_scale(torch.rand(1, 3, 64, 64), bb)
    bundle = extract_features(lat, torch.randn(10, 768), bb)
    assert bundle.attention["L0"].shape == (1, 4, 10, 8, 8)
    assert bundle.layout == {8: 10 + 16, 16: 32}
    assert bundle.total_channels == 10 + 16 + 32
    assert cfg.v_layout(10) == bundle.layout


def test_extract_features_deterministic_and_token_axis(stub):
    lat = encode_and_scale(torch.rand(1, 3, 64, 64), stub)
    c5, c7 = torch.randn(5, 768), torch.randn(7, 768)
    b1, b2 = extract_features(lat, c5, stub), extract_features(lat, c5, stub)
    for k in b1.concatenated:
        assert torch.equal(b1.concatenated[k], b2.concatenated[k])
    b7 = extract_features(lat, c7, stub)
    assert all(a.shape[2] == 5 for a in b1.attention.values())
    assert all(a.shape[2] == 7 for a in b7.attention.values())
    assert {k: v.shape for k, v in b1.features.items()} == {k: v.shape for k, v in b7.features.items()}


def test_token_overflow(stub):
    lat = encode_and_scale(torch.rand(1, 3, 64, 64), stub)
    with pytest.raises(TokenOverflowError):
        extract_features(lat, torch.randn(78, 768), stub)


def test_gradients_reach_denoiser(stub):
    lat = encode_and_scale(torch.rand(1, 3, 64, 64), stub)
    bundle = extract_features(lat, torch.randn(4, 768), stub)
    sum(v.sum() for v in bundle.concatenated.values()).backward()
    grads = [p.grad for p in stub.denoiser.parameters() if p.requires_grad]
    assert any(g is not None and g.abs().sum() > 0 for g in grads)


def test_aggregate_identity_and_average():
    a = torch.rand(1, 1, 3, 8, 8).softmax(2)
    b = FeatureBundle({"x": a}, {}, {}, 3)
    assert torch.equal(aggregate_attention(b, 8), a[:, 0])
    m1 = torch.rand(1, 2, 3, 4, 4).softmax(2)
    m2 = torch.rand(1, 2, 3, 8, 8).softmax(2)
    b2 = FeatureBundle({"x": m1, "y": m2}, {}, {}, 3)
    up = torch.nn.functional.interpolate(m1.mean(1), size=(8, 8), mode="bilinear", align_corners=False)
    expected = (up + m2.mean(1)) / 2
    assert torch.allclose(aggregate_attention(b2, 8), expected, atol=1e-7)


def test_aggregate_uniform():
    u = torch.full((1, 2, 4, 8, 8), 0.25)
    out = aggregate_attention(FeatureBundle({"x": u}, {}, {}, 4), 16)
    assert torch.allclose(out, torch.full_like(out, 0.25))


def test_load_backbone_specs():
    assert load_backbone("stub:3").is_stub
    with pytest.raises(ValueError):
        load_backbone("gpu:1")


def test_image_variation_refuses_stub(stub):
    with pytest.raises(StubBackboneError):
        image_variation(torch.zeros(1, 3, 64, 64), "a dog", 0.5, stub)


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig((FeatureScale("a", 4, 12),), (AttentionSite("b", 1, 8),))
    with pytest.raises(ValueError):
        BackboneConfig((), (AttentionSite("b", 1, 8),))
    cfg = small_config()
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg


pow2 = st.sampled_from([8, 16, 32])


@st.composite
def configs(draw):
    scales = draw(st.lists(st.tuples(st.integers(1, 24), pow2), min_size=1, max_size=3))
    sites = draw(st.lists(st.tuples(st.integers(1, 4), pow2), min_size=1, max_size=3))
    return BackboneConfig(
        feature_scales=tuple(FeatureScale(f"s{i}", c, d) for i, (c, d) in enumerate(scales)),
        attention_sites=tuple(AttentionSite(f"a{i}", h, d) for i, (h, d) in enumerate(sites)),
        embed_dim=32,
        max_text_tokens=16,
    )


@settings(max_examples=25, deadline=None)
@given(cfg=configs(), n_tokens=st.integers(1, 16), seed=st.integers(0, 1000))
def test_attention_contract_property(cfg, n_tokens, seed):
    bb = make_stub_backbone(cfg, seed=seed % 7)
    g = torch.Generator().manual_seed(seed)
    lat = encode_and_scale(torch.rand(1, 3, 64, 64, generator=g) * 2 - 1, bb)
    with torch.no_grad():
        bundle = extract_features(lat, torch.randn(n_tokens, 32, generator=g), bb)
    for a in bundle.attention.values():
        assert a.shape[2] == n_tokens
        assert torch.allclose(a.sum(2), torch.ones(()), atol=1e-5)
    agg = aggregate_attention(bundle, 64)
    assert torch.allclose(agg.sum(1), torch.ones(()), atol=1e-4)
    assert bundle.layout == cfg.v_layout(n_tokens)
