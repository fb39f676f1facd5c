"""Conditioning builders: one per prompting strategy."""
from __future__ import annotations

import logging
import warnings

import torch

from ..backbone.config import TokenOverflowError
from ..backbone.text import TextEncoder, build_input_ids, encode_texts
from .types import (
    CaptionTruncatedWarning,
    ClassVocabulary,
    ConditioningMatrix,
    PromptValidationError,
    Strategy,
)

log = logging.getLogger(__name__)


def _first_eos_mean(encoder: TextEncoder, texts: list[str]) -> torch.Tensor:
    enc = encode_texts(encoder, texts)
    # first EOS sits right after the content tokens
    idx = torch.tensor(enc.lengths, device=enc.embeddings.device) - 1
    rows = enc.embeddings[torch.arange(len(texts), device=idx.device), idx]
    return rows.mean(dim=0)


@torch.no_grad()
def build_avg_eos(vocab: ClassVocabulary, text_encoder: TextEncoder) -> ConditioningMatrix:
    """Average of the first-EOS embedding over every template, one row per class."""
    if not vocab.templates:
        raise PromptValidationError("vocabulary has no templates")
    rows = [_first_eos_mean(text_encoder, [t.format(name) for t in vocab.templates]) for name in vocab.names]
    return ConditioningMatrix(torch.stack(rows), Strategy.AvgEOS)


@torch.no_grad()
def build_single_eos(vocab: ClassVocabulary, template: str, text_encoder: TextEncoder) -> ConditioningMatrix:
    if template.count("{}") != 1:
        raise PromptValidationError(f"template {template!r} must contain exactly one '{{}}' placeholder")
    rows = [_first_eos_mean(text_encoder, [template.format(name)]) for name in vocab.names]
    return ConditioningMatrix(torch.stack(rows), Strategy.SingleEOS, source_text=template)


@torch.no_grad()
def build_class_embs(vocab: ClassVocabulary, text_encoder: TextEncoder) -> ConditioningMatrix:
    """Each class encoded alone; keep only the rows of its word tokens."""
    rows, texts = [], []
    for name in vocab.names:
        enc = encode_texts(text_encoder, [name])
        n = enc.lengths[0]
        if n <= 2:
            raise PromptValidationError(f"class {name!r} encodes to no content tokens")
        rows.append(enc.embeddings[0, 1 : n - 1])
        texts.extend(enc.token_texts[0][1 : n - 1])
    return ConditioningMatrix(torch.cat(rows), Strategy.ClassEmbs, token_texts=texts)


def class_names_string(names) -> str:
    return "".join(" " + b for b in names)


@torch.no_grad()
def build_class_names(vocab: ClassVocabulary, text_encoder: TextEncoder, pad_to: int | None = None) -> ConditioningMatrix:
    """Encode the space-joined class names once; full sequence incl. BOS/EOS."""
    text = class_names_string(vocab.names)
    ids, _ = text_encoder.tokenize(text)
    length = len(ids) + 2
    if length > text_encoder.max_tokens:
        raise TokenOverflowError(f"class-name string needs {length} tokens, limit is {text_encoder.max_tokens}")
    return _encode_string(text, text_encoder, Strategy.ClassNames, pad_to)


def _encode_string(text: str, text_encoder: TextEncoder, strategy: Strategy, pad_to: int | None) -> ConditioningMatrix:
    enc = encode_texts(text_encoder, [text], pad_to=pad_to)
    return ConditioningMatrix(enc.embeddings[0], strategy, source_text=text, token_texts=enc.token_texts[0])


@torch.no_grad()
def build_from_caption(
    caption: str,
    text_encoder: TextEncoder,
    strategy: Strategy = Strategy.Caption,
    pad_to: int | None = None,
    allow_empty: bool = False,
) -> ConditioningMatrix:
    """Encode a caption (or oracle / nouns-only string).

    Captions longer than the encoder context are truncated with a warning.
    ``pad_to`` pads with EOS so captions of different lengths batch together.
    """
    if not caption.strip() and not allow_empty:
        raise PromptValidationError("caption is empty")
    _, _, _, truncated = build_input_ids(text_encoder, [caption])
    if truncated[0]:
        msg = f"caption truncated to {text_encoder.max_tokens} tokens: {caption[:60]!r}..."
        log.warning(msg)
        warnings.warn(msg, CaptionTruncatedWarning, stacklevel=2)
    return _encode_string(caption, text_encoder, strategy, pad_to)


@torch.no_grad()
def build_room_type(room_type: str | None, text_encoder: TextEncoder, templates=None) -> ConditioningMatrix:
    """Depth conditioning: the averaged-EOS embedding of the scene's room type."""
    vocab = ClassVocabulary((room_type or "room",), **({"templates": tuple(templates)} if templates else {}))
    return build_avg_eos(vocab, text_encoder)
