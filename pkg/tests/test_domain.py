import json
from pathlib import Path

import pytest
import torch
from safetensors.torch import load_file

from tadp.backbone import StubBackboneError, encode_and_scale, make_stub_backbone
from tadp.backbone.text import build_input_ids
from tadp.domain import (
    DB_TOKEN,
    TI_TOKEN,
    DomainModifier,
    LearnedToken,
    ModifierError,
    ModifierKind,
    apply_modifier,
    denoising_loss,
    dreambooth_config,
    install_token,
    load_dreambooth,
    make_modifier,
    textual_inversion_config,
    token_filename,
    train_dreambooth,
    train_textual_inversion,
)
from tadp.domain.personalization import PersonalizationConfig

GOLDEN = json.loads((Path(__file__).parent / "data" / "modifier_golden.json").read_text())


def golden_modifier(case):
    kind = ModifierKind(case["kind"])
    if kind is ModifierKind.TextualInversion:
        return make_modifier(kind, case["domain"], LearnedToken(TI_TOKEN, torch.zeros(4)))
    if kind is ModifierKind.DreamBooth:
        return make_modifier(kind, case["domain"], LearnedToken(DB_TOKEN, torch.zeros(4)), "ckpt/db")
    return make_modifier(kind, case["domain"])


@pytest.mark.parametrize("case", GOLDEN, ids=lambda c: f"{c['domain']}-{c['kind']}")
def test_modifier_golden(case):
    text, backbone = apply_modifier(case["plain"], golden_modifier(case))
    assert text == case["expected"]
    assert backbone == ("ckpt/db" if case["kind"] == "DreamBooth" else None)


def test_modifier_invariants():
    with pytest.raises(ModifierError):
        DomainModifier(ModifierKind.Null, style_text="a {STYLE} of {CAPTION}")
    with pytest.raises(ModifierError):
        DomainModifier(ModifierKind.Simple, style_text="no placeholders", style_word="x")
    with pytest.raises(ModifierError):
        DomainModifier(ModifierKind.TextualInversion, backbone_override="x")
    with pytest.raises(ModifierError, match="train_textual_inversion"):
        apply_modifier("a dog", make_modifier("TextualInversion", "watercolor"))
    with pytest.raises(ModifierError, match="train_dreambooth"):
        apply_modifier("a dog", make_modifier("DreamBooth", "watercolor", LearnedToken(DB_TOKEN, torch.zeros(2))))
    with pytest.raises(ModifierError):
        make_modifier("Simple", "mars")


def test_apply_modifier_is_pure():
    m = make_modifier("Simple", "comic")
    assert apply_modifier("a cat", m) == apply_modifier("a cat", m)
    assert m == make_modifier("Simple", "comic")


def test_token_file_roundtrip(tmp_path):
    tok = LearnedToken(TI_TOKEN, torch.randn(768))
    path = tok.save(tmp_path / token_filename("watercolor"))
    assert path.name == "watercolor_ti.token"
    back = LearnedToken.load(path)
    assert back.token == TI_TOKEN and torch.equal(back.embedding, tok.embedding)
    assert path.read_bytes()[:8] == b"TADPTOK1"
    (tmp_path / "junk").write_bytes(b"nope")
    with pytest.raises(ValueError):
        LearnedToken.load(tmp_path / "junk")


def test_config_defaults_and_validation():
    ti, db = textual_inversion_config(), dreambooth_config()
    assert (ti.steps, ti.learning_rate, ti.grad_accumulation) == (3000, 5e-4, 4)
    assert (db.steps, db.learning_rate) == (1000, 5e-6)
    with pytest.raises(NotImplementedError):
        PersonalizationConfig(steps=1, learning_rate=1e-4, prior_preservation=True)
    with pytest.raises(ValueError):
        PersonalizationConfig(steps=-1, learning_rate=1e-4)


def images(n=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, 64, 64, generator=g) * 2 - 1


def snapshot(bb):
    return {name: {k: v.clone() for k, v in m.state_dict().items()} for name, m in bb.modules().items()}


def test_stub_refusal():
    bb = make_stub_backbone(seed=0)
    with pytest.raises(StubBackboneError):
        train_textual_inversion(images(), bb, textual_inversion_config(steps=1))
    with pytest.raises(ValueError):
        train_textual_inversion(torch.empty(0, 3, 64, 64), bb, allow_stub=True)


def test_ti_zero_steps_returns_init():
    bb = make_stub_backbone(seed=0)
    word_ids, _ = bb.text_encoder.tokenize("painting")
    init = bb.text_encoder.get_input_embeddings().weight[word_ids].mean(0).detach().clone()
    tok = train_textual_inversion(images(), bb, textual_inversion_config(steps=0), allow_stub=True)
    assert tok.token == TI_TOKEN and torch.equal(tok.embedding, init)


def test_ti_freeze_contract():
    bb = make_stub_backbone(seed=0)
    before = snapshot(bb)
    cfg = textual_inversion_config(steps=3, grad_accumulation=1, learning_rate=1e-2)
    tok = train_textual_inversion(images(2), bb, cfg, allow_stub=True)
    after = snapshot(bb)
    token_id = bb.text_encoder.added_tokens()[TI_TOKEN]
    for name in before:
        for k, v in before[name].items():
            if name == "text_encoder" and k == "token_embedding.weight":
                assert torch.equal(after[name][k][:token_id], v)
            else:
                assert torch.equal(after[name][k], v), f"{name}.{k} changed"
    assert not torch.equal(tok.embedding, after["text_encoder"]["token_embedding.weight"][:token_id].mean(0))
    # requires_grad flags are restored after training
    assert all(p.requires_grad for p in bb.denoiser.parameters())


def test_ti_gradient_matches_finite_differences():
    bb = make_stub_backbone(seed=0)
    for m in bb.modules().values():
        m.double()
    token_id = bb.text_encoder.add_token(TI_TOKEN, "painting")
    weight = bb.text_encoder.get_input_embeddings().weight
    with torch.no_grad():
        latents = encode_and_scale(images().double(), bb).values
    ids, *_ = build_input_ids(bb.text_encoder, ["a painting in the style of <*>"])

    def loss_at(vec):
        with torch.no_grad():
            weight[token_id] = vec
        # same seed: one image, one timestep, one noise draw
        return denoising_loss(bb, latents, ids, torch.Generator().manual_seed(3))

    base = weight[token_id].detach().clone()
    weight.grad = None
    loss_at(base).backward()
    grad = weight.grad[token_id].clone()
    g = torch.Generator().manual_seed(0)
    h = 1e-5
    for _ in range(4):
        d = torch.randn(base.shape, generator=g, dtype=torch.float64)
        d /= d.norm()
        with torch.no_grad():
            fd = (loss_at(base + h * d) - loss_at(base - h * d)).item() / (2 * h)
        analytic = float(grad @ d)
        assert abs(fd - analytic) <= 1e-3 * abs(analytic), (fd, analytic)


def test_dreambooth_zero_steps_and_null_update(tmp_path):
    for cfg in (dreambooth_config(steps=0), dreambooth_config(steps=1, learning_rate=0.0)):
        bb = make_stub_backbone(seed=0)
        source = {k: v.clone() for k, v in bb.denoiser.state_dict().items()}
        tok, out = train_dreambooth(images(), bb, tmp_path / f"db{cfg.steps}", cfg, allow_stub=True)
        saved = load_file(str(out / "denoiser.safetensors"))
        assert saved.keys() == source.keys()
        assert all(torch.equal(saved[k], source[k]) for k in source)
        assert tok.token == DB_TOKEN


def test_dreambooth_leaves_autoencoder_and_reloads(tmp_path):
    bb = make_stub_backbone(seed=0)
    before = snapshot(bb)
    cfg = dreambooth_config(steps=2, learning_rate=1e-3)
    tok, out = train_dreambooth(images(), bb, tmp_path / "db", cfg, domain="watercolor", allow_stub=True)
    after = snapshot(bb)
    for name in ("encoder", "decoder"):
        assert all(torch.equal(after[name][k], v) for k, v in before[name].items())
    assert any(not torch.equal(after["denoiser"][k], v) for k, v in before["denoiser"].items())
    fresh = make_stub_backbone(seed=0)
    learned = load_dreambooth(fresh, out)
    assert torch.equal(learned.embedding, tok.embedding)
    for k, v in bb.denoiser.state_dict().items():
        assert torch.equal(fresh.denoiser.state_dict()[k], v)
    with pytest.raises(StubBackboneError):
        train_dreambooth(images(), make_stub_backbone(), tmp_path / "x", cfg)


def mean_loss(bb, latents, token, n=16):
    ids, *_ = build_input_ids(bb.text_encoder, [f"a painting in the style of {token}"] * latents.shape[0])
    g = torch.Generator().manual_seed(123)
    with torch.no_grad():
        return sum(denoising_loss(bb, latents, ids, g).item() for _ in range(n)) / n


def test_dreambooth_loss_decreases(tmp_path):
    bb = make_stub_backbone(seed=0)
    imgs = images(2, seed=5)
    latents = encode_and_scale(imgs, bb).values
    bb.text_encoder.add_token(DB_TOKEN, "painting")
    start = mean_loss(bb, latents, DB_TOKEN)
    cfg = dreambooth_config(steps=50, learning_rate=1e-3, templates=["a painting in the style of {}"])
    train_dreambooth(imgs, bb, tmp_path / "db", cfg, allow_stub=True)
    assert mean_loss(bb, latents, DB_TOKEN) < start


def test_install_token_sets_row():
    bb = make_stub_backbone(seed=0)
    tok = LearnedToken(TI_TOKEN, torch.arange(768, dtype=torch.float32))
    idx = install_token(bb.text_encoder, tok)
    assert torch.equal(bb.text_encoder.get_input_embeddings().weight[idx], tok.embedding)
    ids, _ = bb.text_encoder.tokenize("a <*> painting")
    assert idx in ids
