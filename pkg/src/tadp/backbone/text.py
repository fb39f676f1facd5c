"""Text encoders (tau_theta) sharing one token/EOS convention.

Sequences are laid out as ``BOS, content..., EOS, EOS...`` with padding by
EOS, matching the CLIP tokenizer used by the reference stack. Encoders are
causal, so the contextual embedding at a position never depends on what
follows it; in particular the first-EOS embedding is unaffected by padding.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

BOS_TEXT = "<|startoftext|>"
EOS_TEXT = "<|endoftext|>"

_WORD_RE = re.compile(r"<[^<>\s]+>|[a-z0-9]+(?:'[a-z]+)?|[^\sa-z0-9]")


class TextEncoder(nn.Module):
    """Interface every text encoder implements."""

    embed_dim: int
    max_tokens: int
    bos_id: int
    eos_id: int

    def tokenize(self, text: str) -> tuple[list[int], list[str]]:
        """Content token ids and their surface strings, without BOS/EOS."""
        raise NotImplementedError

    def get_input_embeddings(self) -> nn.Embedding:
        raise NotImplementedError

    def add_token(self, token: str, init_word: str | None = None) -> int:
        raise NotImplementedError

    def forward(self, input_ids: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


@dataclass
class EncodedText:
    embeddings: torch.Tensor  # (B, L, D)
    input_ids: torch.Tensor  # (B, L)
    lengths: list[int]  # tokens up to and including the first EOS
    token_texts: list[list[str]]
    truncated: list[bool]


def build_input_ids(
    encoder: TextEncoder, texts: Sequence[str], pad_to: int | None = None
) -> tuple[torch.Tensor, list[int], list[list[str]], list[bool]]:
    rows, lengths, token_texts, truncated = [], [], [], []
    limit = encoder.max_tokens - 2
    for text in texts:
        ids, words = encoder.tokenize(text)
        cut = len(ids) > limit
        ids, words = ids[:limit], words[:limit]
        rows.append([encoder.bos_id, *ids, encoder.eos_id])
        token_texts.append([BOS_TEXT, *words, EOS_TEXT])
        lengths.append(len(ids) + 2)
        truncated.append(cut)
    width = max(lengths)
    if pad_to is not None:
        if pad_to > encoder.max_tokens:
            raise ValueError(f"pad_to={pad_to} exceeds max_tokens={encoder.max_tokens}")
        width = max(width, pad_to)
    for row, tt in zip(rows, token_texts):
        extra = width - len(row)
        row.extend([encoder.eos_id] * extra)
        tt.extend([EOS_TEXT] * extra)
    return torch.tensor(rows, dtype=torch.long), lengths, token_texts, truncated


def encode_texts(encoder: TextEncoder, texts: Sequence[str], pad_to: int | None = None) -> EncodedText:
    ids, lengths, token_texts, truncated = build_input_ids(encoder, texts, pad_to)
    ids = ids.to(next(encoder.parameters()).device)
    return EncodedText(encoder(ids), ids, lengths, token_texts, truncated)


def _stable_hash(word: str, modulo: int) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % modulo


class FixtureTextEncoder(TextEncoder):
    """Small seeded causal transformer standing in for the CLIP text encoder.

    Words map to ids by hashing, so any vocabulary works offline. Each
    whitespace/punctuation-delimited word is exactly one token, which makes
    token counts easy to reason about in tests.
    """

    def __init__(
        self,
        embed_dim: int = 768,
        max_tokens: int = 77,
        vocab_size: int = 4096,
        n_heads: int = 8,
        ff_dim: int = 1024,
        seed: int = 0,
    ):
        super().__init__()
        self.embed_dim = embed_dim
        self.max_tokens = max_tokens
        self.hashed_vocab = vocab_size
        self.bos_id, self.eos_id = 0, 1
        self._reserved = 2
        self._added: dict[str, int] = {}
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.token_embedding = nn.Embedding(vocab_size, embed_dim)
            self.position_embedding = nn.Parameter(torch.randn(max_tokens, embed_dim) * 0.02)
            # sequence-first keeps torch off its fused inference path, so outputs
            # are identical with and without autograd
            self.layer = nn.TransformerEncoderLayer(
                embed_dim, n_heads, ff_dim, dropout=0.0, batch_first=False, norm_first=True
            )
            self.final_norm = nn.LayerNorm(embed_dim)
        mask = torch.triu(torch.full((max_tokens, max_tokens), float("-inf")), diagonal=1)
        self.register_buffer("causal_mask", mask, persistent=False)
        self.eval()

    def tokenize(self, text: str) -> tuple[list[int], list[str]]:
        words = _WORD_RE.findall(text.lower())
        ids = []
        for w in words:
            if w in self._added:
                ids.append(self._added[w])
            else:
                ids.append(self._reserved + _stable_hash(w, self.hashed_vocab - self._reserved))
        return ids, words

    def get_input_embeddings(self) -> nn.Embedding:
        return self.token_embedding

    def add_token(self, token: str, init_word: str | None = None) -> int:
        token = token.lower()
        if token in self._added:
            return self._added[token]
        old = self.token_embedding
        new = nn.Embedding(old.num_embeddings + 1, self.embed_dim, device=old.weight.device, dtype=old.weight.dtype)
        with torch.no_grad():
            new.weight[:-1] = old.weight
            if init_word is not None:
                ids, _ = self.tokenize(init_word)
                new.weight[-1] = old.weight[ids].mean(0)
            else:
                new.weight[-1] = old.weight.mean(0)
        new.weight.requires_grad_(old.weight.requires_grad)
        self.token_embedding = new
        self._added[token] = old.num_embeddings
        return old.num_embeddings

    def added_tokens(self) -> dict[str, int]:
        return dict(self._added)

    def forward(self, input_ids: torch.Tensor) -> torch.Tensor:
        L = input_ids.shape[1]
        if L > self.max_tokens:
            raise ValueError(f"sequence of {L} tokens exceeds {self.max_tokens}")
        x = self.token_embedding(input_ids) + self.position_embedding[:L]
        x = self.layer(x.transpose(0, 1), src_mask=self.causal_mask[:L, :L], is_causal=True).transpose(0, 1)
        return self.final_norm(x)


class ClipTextEncoder(TextEncoder):
    """Adapter over a ``transformers`` CLIP tokenizer + text model."""

    def __init__(self, tokenizer, model):
        super().__init__()
        self.tokenizer = tokenizer
        self.model = model
        self.embed_dim = model.config.hidden_size
        self.max_tokens = tokenizer.model_max_length
        self.bos_id = tokenizer.bos_token_id
        self.eos_id = tokenizer.eos_token_id
        self.model.eval()

    @classmethod
    def from_pretrained(cls, path: str, subfolder_tokenizer="tokenizer", subfolder_model="text_encoder"):
        from transformers import CLIPTextModel, CLIPTokenizer

        tok = CLIPTokenizer.from_pretrained(path, subfolder=subfolder_tokenizer)
        model = CLIPTextModel.from_pretrained(path, subfolder=subfolder_model)
        return cls(tok, model)

    def tokenize(self, text: str) -> tuple[list[int], list[str]]:
        ids = self.tokenizer(text, add_special_tokens=False)["input_ids"]
        words = [t.replace("</w>", "") for t in self.tokenizer.convert_ids_to_tokens(ids)]
        return list(ids), words

    def get_input_embeddings(self) -> nn.Embedding:
        return self.model.get_input_embeddings()

    def add_token(self, token: str, init_word: str | None = None) -> int:
        if self.tokenizer.add_tokens([token]) == 0:
            return self.tokenizer.convert_tokens_to_ids(token)
        new_id = self.tokenizer.convert_tokens_to_ids(token)
        self.model.resize_token_embeddings(len(self.tokenizer))
        if init_word is not None:
            ids, _ = self.tokenize(init_word)
            w = self.get_input_embeddings().weight
            with torch.no_grad():
                w[new_id] = w[ids].mean(0)
        return new_id

    def forward(self, input_ids: torch.Tensor) -> torch.Tensor:
        return self.model(input_ids=input_ids).last_hidden_state
