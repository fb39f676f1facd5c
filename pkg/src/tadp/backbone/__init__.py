from .config import (
    SD_SCALE_FACTOR,
    AttentionSite,
    BackboneConfig,
    BackboneError,
    DimensionMismatchError,
    FeatureBundle,
    FeatureScale,
    ScaledLatent,
    SiteCaptureError,
    StubBackboneError,
    TokenOverflowError,
    default_stub_config,
)
from .core import (
    BackboneHandle,
    NoiseSchedule,
    aggregate_attention,
    decode,
    encode_and_scale,
    encode_raw,
    extract_features,
    make_stub_backbone,
    unscale,
)
from .text import ClipTextEncoder, EncodedText, FixtureTextEncoder, TextEncoder, encode_texts
from .variation import image_variation


def load_backbone(spec: str, config: BackboneConfig | None = None) -> BackboneHandle:
    """Resolve ``stub:<seed>`` or ``real:<path>``."""
    kind, _, arg = spec.partition(":")
    if kind == "stub":
        return make_stub_backbone(config, seed=int(arg or 0))
    if kind == "real":
        from .real import load_pretrained_backbone

        return load_pretrained_backbone(arg)
    raise ValueError(f"backbone spec must be 'stub:<seed>' or 'real:<path>', got {spec!r}")
