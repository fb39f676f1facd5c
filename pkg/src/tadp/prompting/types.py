from __future__ import annotations

import enum
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import torch


class PromptValidationError(ValueError):
    pass


class EmptyPromptWarning(UserWarning):
    """A prompt builder produced an empty string (no nouns, no classes present)."""


class CaptionTruncatedWarning(UserWarning):
    pass


class Strategy(str, enum.Enum):
    AvgEOS = "AvgEOS"
    SingleEOS = "SingleEOS"
    ClassEmbs = "ClassEmbs"
    ClassNames = "ClassNames"
    Caption = "Caption"
    NounsOnly = "NounsOnly"
    Oracle = "Oracle"
    OracleNoised = "OracleNoised"

    @property
    def string_based(self) -> bool:
        return self not in (Strategy.AvgEOS, Strategy.SingleEOS)


@dataclass(frozen=True)
class ConditioningMatrix:
    """The text conditioning handed to the denoiser's cross-attention."""

    embeddings: torch.Tensor  # (N, D)
    strategy: Strategy
    source_text: str | None = None
    token_texts: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "token_texts", tuple(self.token_texts))
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise PromptValidationError(f"embeddings must be (N>=1, D), got {tuple(self.embeddings.shape)}")
        if self.token_texts and len(self.token_texts) != self.embeddings.shape[0]:
            raise PromptValidationError(
                f"{len(self.token_texts)} token texts for {self.embeddings.shape[0]} embedding rows"
            )

    @property
    def n_tokens(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    def token_index(self, word: str) -> int:
        """Row of the first token whose text equals ``word`` (case-insensitive)."""
        word = word.lower()
        for i, t in enumerate(self.token_texts):
            if t.lower() == word:
                return i
        raise KeyError(word)


def _read_lines(path: str | Path | None, package_file: str) -> list[str]:
    if path is None:
        text = resources.files("tadp.data").joinpath(package_file).read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return [line.rstrip("\r\n") for line in text.splitlines() if line.strip()]


def load_templates(path: str | Path | None = None) -> tuple[str, ...]:
    """One template per line with a single ``{}`` placeholder; defaults to the 80 CLIP templates."""
    return tuple(_read_lines(path, "clip_templates.txt"))


BUILTIN_VOCABS = {
    "pascal": "pascal_voc_classes.txt",
    "ade20k": "ade20k_classes.txt",
    "cityscapes": "cityscapes_classes.txt",
}


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple[str, ...]
    templates: tuple[str, ...] = field(default_factory=load_templates)

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "templates", tuple(self.templates))
        if not self.names:
            raise PromptValidationError("vocabulary is empty")
        if any(not n.strip() for n in self.names):
            raise PromptValidationError("class names must be nonempty")
        if len(set(self.names)) != len(self.names):
            raise PromptValidationError("class names must be unique")
        for t in self.templates:
            if t.count("{}") != 1:
                raise PromptValidationError(f"template {t!r} must contain exactly one '{{}}' placeholder")

    @classmethod
    def from_file(cls, path: str | Path, templates: Sequence[str] | None = None) -> "ClassVocabulary":
        names = _read_lines(path, "")
        return cls(tuple(names), tuple(templates) if templates is not None else load_templates())

    @classmethod
    def builtin(cls, name: str) -> "ClassVocabulary":
        return cls(tuple(_read_lines(None, BUILTIN_VOCABS[name])))

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __len__(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class OracleCaptionSpec:
    present_classes: frozenset[str]
    target_precision: float = 1.0
    target_recall: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "present_classes", frozenset(self.present_classes))
        for name in ("target_precision", "target_recall"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise PromptValidationError(f"{name} must lie in (0, 1], got {v}")
