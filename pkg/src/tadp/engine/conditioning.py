"""Per-image conditioning for training and evaluation."""
from __future__ import annotations

import logging
import warnings
import zlib

import numpy as np

from ..captions import CaptionCache
from ..domain import DomainModifier, ModifierKind, apply_modifier
from ..prompting import (
    ClassVocabulary,
    ConditioningMatrix,
    EmptyPromptWarning,
    OracleCaptionSpec,
    Strategy,
    build_avg_eos,
    build_class_embs,
    build_class_names,
    build_from_caption,
    build_oracle,
    build_single_eos,
    class_names_string,
    nouns_only,
    perturb_oracle,
)

log = logging.getLogger(__name__)


class CaptionCacheMissError(KeyError):
    def __init__(self, image_id: str, path):
        super().__init__(image_id)
        self.image_id = image_id
        self.path = path

    def __str__(self):
        return f"no caption for image {self.image_id!r} in {self.path}; run `tadp caption` first"


class ConditioningProvider:
    """Maps a Sample to its ConditioningMatrix; every matrix has ``n_tokens`` rows.

    Fixed strategies are built once. Per-image strategies (captions, nouns,
    oracles) are EOS-padded to ``pad_to`` rows and memoised by image id.
    """

    def __init__(
        self,
        strategy: Strategy | str,
        vocab: ClassVocabulary,
        text_encoder,
        *,
        template: str = "a photo of a {}.",
        caption_cache: CaptionCache | None = None,
        min_tokens: int = 0,
        modifier: DomainModifier | None = None,
        precision: float = 1.0,
        recall: float = 1.0,
        seed: int = 0,
        pad_to: int | None = None,
        ignore_index: int = 255,
    ):
        self.strategy = Strategy(strategy)
        self.vocab = vocab
        self.text_encoder = text_encoder
        self.cache = caption_cache
        self.min_tokens = min_tokens
        self.modifier = modifier
        self.precision, self.recall = precision, recall
        self.seed = seed
        self.ignore_index = ignore_index
        self.pad_to = pad_to or text_encoder.max_tokens
        self._memo: dict[str, ConditioningMatrix] = {}
        self._records = {}
        if caption_cache is not None:
            for r in caption_cache:
                if r.min_tokens == min_tokens:
                    self._records.setdefault(r.image_id, r)
        self._fixed = self._build_fixed(template)
        if self.strategy in (Strategy.Caption, Strategy.NounsOnly) and caption_cache is None:
            raise ValueError(f"strategy {self.strategy.value} needs a caption cache")

    def _build_fixed(self, template: str) -> ConditioningMatrix | None:
        s, te = self.strategy, self.text_encoder
        if s is Strategy.AvgEOS:
            return build_avg_eos(self.vocab, te)
        if s is Strategy.SingleEOS:
            return build_single_eos(self.vocab, template, te)
        if s is Strategy.ClassEmbs:
            return build_class_embs(self.vocab, te)
        if s is Strategy.ClassNames:
            return build_class_names(self.vocab, te)
        return None

    @property
    def n_tokens(self) -> int:
        return self._fixed.n_tokens if self._fixed is not None else self.pad_to

    def text_for(self, sample) -> str:
        """The string a per-image strategy encodes (after the modifier)."""
        s = self.strategy
        if s in (Strategy.Caption, Strategy.NounsOnly):
            rec = self._record(sample.image_id)
            text = rec.cleaned or rec.caption
            if s is Strategy.NounsOnly:
                text = nouns_only(text)
        elif s is Strategy.Oracle:
            text = build_oracle(self._label_map(sample), self.vocab.names, self.ignore_index)
        elif s is Strategy.OracleNoised:
            present = [self.vocab.names[i] for i in self._present(sample)]
            if not present:
                warnings.warn(f"no classes in {sample.image_id!r}", EmptyPromptWarning, stacklevel=2)
                text = ""
            else:
                spec = OracleCaptionSpec(frozenset(present), self.precision, self.recall, self._image_seed(sample.image_id))
                text = class_names_string(perturb_oracle(spec, self.vocab))
        else:
            raise ValueError(f"{s.value} is not a per-image strategy")
        if self.modifier is not None and self.modifier.kind is not ModifierKind.Null:
            text, _ = apply_modifier(text.strip(), self.modifier)
        return text

    def __call__(self, sample) -> ConditioningMatrix:
        if self._fixed is not None:
            return self._fixed
        hit = self._memo.get(sample.image_id)
        if hit is None:
            text = self.text_for(sample)
            hit = build_from_caption(text, self.text_encoder, self.strategy, pad_to=self.pad_to, allow_empty=True)
            self._memo[sample.image_id] = hit
        return hit

    def _record(self, image_id: str):
        try:
            return self._records[image_id]
        except KeyError:
            raise CaptionCacheMissError(image_id, self.cache.path) from None

    def _label_map(self, sample):
        if sample.mask is not None:
            return sample.mask.numpy()
        # detection: a pseudo-mask listing the labelled classes
        labels = sorted(set(sample.labels.tolist())) if sample.labels is not None else []
        return np.asarray(labels or [self.ignore_index], dtype=np.int64)

    def _present(self, sample) -> list[int]:
        arr = np.asarray(self._label_map(sample)).reshape(-1)
        return sorted(int(c) for c in np.unique(arr) if c != self.ignore_index and 0 <= c < len(self.vocab))

    def _image_seed(self, image_id: str) -> int:
        return (zlib.crc32(image_id.encode("utf-8")) ^ (self.seed * 2654435761)) & 0xFFFFFFFF
