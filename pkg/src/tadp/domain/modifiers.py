"""Caption modifiers M(P): a string part applied to captions and an optional backbone swap."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import torch

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ModifierError(ValueError):
    pass


class ModifierKind(str, enum.Enum):
    Null = "Null"
    Simple = "Simple"
    TextualInversion = "TextualInversion"
    DreamBooth = "DreamBooth"
    NearbyDomain = "NearbyDomain"
    UnrelatedDomain = "UnrelatedDomain"


TI_TOKEN = "<*>"
DB_TOKEN = "<SKS>"

_TOKEN_MAGIC = b"TADPTOK1"


@dataclass(frozen=True)
class LearnedToken:
    token: str
    embedding: torch.Tensor  # (D,)

    def save(self, path: str | Path) -> Path:
        """Little-endian: magic, u32 token byte length, token utf-8, u32 dim, dim x f32."""
        path = Path(path)
        raw = self.token.encode("utf-8")
        vec = self.embedding.detach().cpu().to(torch.float32).reshape(-1)
        payload = _TOKEN_MAGIC + struct.pack("<I", len(raw)) + raw + struct.pack("<I", vec.numel())
        payload += struct.pack(f"<{vec.numel()}f", *vec.tolist())
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "LearnedToken":
        data = Path(path).read_bytes()
        if not data.startswith(_TOKEN_MAGIC):
            raise ValueError(f"{path} is not a learned-token file")
        off = len(_TOKEN_MAGIC)
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        token = data[off : off + n].decode("utf-8")
        off += n
        (dim,) = struct.unpack_from("<I", data, off)
        off += 4
        vec = struct.unpack_from(f"<{dim}f", data, off)
        return cls(token, torch.tensor(vec, dtype=torch.float32))


def token_filename(domain: str) -> str:
    return f"{domain}_ti.token"


@lru_cache(maxsize=None)
def domain_presets() -> dict:
    text = resources.files("tadp.data").joinpath("domain_presets.toml").read_text(encoding="utf-8")
    return tomllib.loads(text)


@dataclass(frozen=True)
class DomainModifier:
    kind: ModifierKind
    style_text: str | None = None
    style_word: str | None = None
    learned_token: LearnedToken | None = None
    backbone_override: str | None = None
    target_domain: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ModifierKind(self.kind))
        k = self.kind
        if k is ModifierKind.Null:
            if self.style_text or self.learned_token or self.backbone_override:
                raise ModifierError("a Null modifier carries no style text, token or backbone")
        elif k in (ModifierKind.Simple, ModifierKind.NearbyDomain, ModifierKind.UnrelatedDomain):
            if not self.style_text or not self.style_word:
                raise ModifierError(f"{k.value} modifier needs style_text and style_word")
            if self.learned_token or self.backbone_override:
                raise ModifierError(f"{k.value} modifier takes no learned token or backbone")
        elif k is ModifierKind.TextualInversion and self.backbone_override:
            raise ModifierError("TextualInversion modifier must not override the backbone")
        if self.style_text and ("{CAPTION}" not in self.style_text or "{STYLE}" not in self.style_text):
            raise ModifierError("style_text needs {STYLE} and {CAPTION} placeholders")

    @property
    def modifier_id(self) -> str:
        if self.kind is ModifierKind.Null:
            return "null"
        return f"{self.kind.value}:{self.target_domain or ''}"

    @property
    def needs_training(self) -> bool:
        return self.kind in (ModifierKind.TextualInversion, ModifierKind.DreamBooth)


def make_modifier(
    kind: ModifierKind | str,
    domain: str | None = None,
    learned_token: LearnedToken | None = None,
    backbone_override: str | None = None,
) -> DomainModifier:
    """Build a modifier from the shipped per-domain presets."""
    kind = ModifierKind(kind)
    if kind is ModifierKind.Null:
        return DomainModifier(kind, target_domain=domain)
    presets = domain_presets()
    if domain not in presets:
        raise ModifierError(f"no preset for domain {domain!r}; known: {sorted(presets)}")
    p = presets[domain]
    if kind in (ModifierKind.TextualInversion, ModifierKind.DreamBooth):
        token = TI_TOKEN if kind is ModifierKind.TextualInversion else DB_TOKEN
        return DomainModifier(
            kind,
            style_text=p["personalized"],
            style_word=learned_token.token if learned_token else token,
            learned_token=learned_token,
            backbone_override=backbone_override,
            target_domain=domain,
        )
    section = {ModifierKind.Simple: "simple", ModifierKind.NearbyDomain: "nearby", ModifierKind.UnrelatedDomain: "unrelated"}[kind]
    return DomainModifier(kind, style_text=p[section]["template"], style_word=p[section]["style"], target_domain=domain)


def apply_modifier(plain_caption: str, modifier: DomainModifier) -> tuple[str, str | None]:
    """Return (modified caption, backbone reference or None for the default backbone)."""
    kind = modifier.kind
    if kind is ModifierKind.Null:
        return plain_caption, None
    if kind is ModifierKind.TextualInversion and modifier.learned_token is None:
        raise ModifierError("TextualInversion modifier has no trained token; run train_textual_inversion first")
    if kind is ModifierKind.DreamBooth and (modifier.learned_token is None or modifier.backbone_override is None):
        raise ModifierError("DreamBooth modifier needs a trained token and backbone; run train_dreambooth first")
    style = modifier.learned_token.token if modifier.learned_token is not None else modifier.style_word
    text = modifier.style_text.replace("{STYLE}", style).replace("{CAPTION}", plain_caption)
    return text, modifier.backbone_override if kind is ModifierKind.DreamBooth else None


def install_token(text_encoder, learned: LearnedToken) -> int:
    """Register a learned token in a text encoder and set its embedding row."""
    token_id = text_encoder.add_token(learned.token)
    weight = text_encoder.get_input_embeddings().weight
    with torch.no_grad():
        weight[token_id] = learned.embedding.to(weight)
    return token_id
