"""Byte-pair subword tokenizer for attribute prompts and the pooled prompt embedding."""
from __future__ import annotations

import re
from collections import Counter
from typing import Iterable, Sequence

import torch
from torch import nn

from .attributes import all_prompts

_PIECE = re.compile(r"\s*\S+|\s+")
N_BYTES = 256


def _pieces(text: str) -> list[str]:
    # each piece keeps its leading whitespace, so joining pieces restores the text
    return _PIECE.findall(text)


class BPETokenizer:
    """Character-level BPE trained on a fixed corpus.

    Learned vocabulary ids come first; ids ``len(vocab) + b`` are byte-fallback
    tokens for characters outside the training alphabet, so encoding never fails.
    """

    def __init__(self, alphabet: Sequence[str], merges: Sequence[tuple[str, str]]):
        self.alphabet = list(alphabet)
        self.merges = [tuple(m) for m in merges]
        self.vocab = self.alphabet + [a + b for a, b in self.merges]
        self.token_to_id = {t: i for i, t in enumerate(self.vocab)}
        self.ranks = {m: i for i, m in enumerate(self.merges)}
        self._cache: dict[str, list[int]] = {}

    @classmethod
    def train(cls, corpus: Iterable[str], vocab_size: int = 64) -> "BPETokenizer":
        words = Counter(p for text in corpus for p in _pieces(text))
        alphabet = sorted({ch for w in words for ch in w})
        if len(alphabet) > vocab_size:
            raise ValueError(f"alphabet of {len(alphabet)} exceeds vocab_size {vocab_size}")
        splits = {w: list(w) for w in words}
        merges: list[tuple[str, str]] = []
        while len(alphabet) + len(merges) < vocab_size:
            pairs: Counter = Counter()
            for w, freq in words.items():
                sym = splits[w]
                for a, b in zip(sym, sym[1:]):
                    pairs[a, b] += freq
            if not pairs:
                break
            # most frequent pair, lexicographically smallest on ties
            best = min(pairs, key=lambda p: (-pairs[p], p))
            merges.append(best)
            for w in words:
                splits[w] = _merge_pair(splits[w], best)
        return cls(alphabet, merges)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def table_size(self) -> int:
        return len(self.vocab) + N_BYTES

    def _encode_piece(self, piece: str) -> list[int]:
        syms: list[str | int] = []
        for ch in piece:
            if ch in self.token_to_id:
                syms.append(ch)
            else:
                syms.extend(ch.encode("utf-8"))  # raw byte ints never merge
        while True:
            best, best_rank = None, None
            for a, b in zip(syms, syms[1:]):
                if isinstance(a, str) and isinstance(b, str):
                    r = self.ranks.get((a, b))
                    if r is not None and (best_rank is None or r < best_rank):
                        best, best_rank = (a, b), r
            if best is None:
                break
            syms = _merge_pair(syms, best)
        return [self.token_to_id[s] if isinstance(s, str) else len(self.vocab) + s for s in syms]

    def encode(self, text: str) -> list[int]:
        ids = self._cache.get(text)
        if ids is None:
            ids = [i for p in _pieces(text) for i in self._encode_piece(p)]
            self._cache[text] = ids
        return list(ids)

    def tokens(self, text: str) -> list[str]:
        n = len(self.vocab)
        return [self.vocab[i] if i < n else f"<0x{i - n:02X}>" for i in self.encode(text)]

    def decode(self, ids: Sequence[int]) -> str:
        n = len(self.vocab)
        buf = bytearray()
        for i in ids:
            buf.extend(self.vocab[i].encode("utf-8") if i < n else bytes([i - n]))
        return buf.decode("utf-8")

    def to_dict(self) -> dict:
        return {"alphabet": self.alphabet, "merges": [list(m) for m in self.merges]}

    @classmethod
    def from_dict(cls, d: dict) -> "BPETokenizer":
        return cls(d["alphabet"], [tuple(m) for m in d["merges"]])


def _merge_pair(syms: list, pair: tuple[str, str]) -> list:
    out, i = [], 0
    while i < len(syms):
        if i + 1 < len(syms) and syms[i] == pair[0] and syms[i + 1] == pair[1] \
                and isinstance(syms[i], str) and isinstance(syms[i + 1], str):
            out.append(pair[0] + pair[1])
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out


def prompt_tokenizer(vocab_size: int = 64) -> BPETokenizer:
    return BPETokenizer.train(all_prompts(), vocab_size)


class PromptEmbedder(nn.Module):
    """Token ids -> learned table lookup -> mean pool to a fixed-size vector."""

    def __init__(self, tokenizer: BPETokenizer, embed_dim: int):
        super().__init__()
        self.tokenizer = tokenizer
        self.embed_dim = embed_dim
        self.table = nn.EmbeddingBag(tokenizer.table_size, embed_dim, mode="mean")

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        ids, offsets = [], []
        for t in texts:
            offsets.append(len(ids))
            ids.extend(self.tokenizer.encode(t))
        dev = self.table.weight.device
        return self.table(torch.tensor(ids, dtype=torch.long, device=dev),
                          torch.tensor(offsets, dtype=torch.long, device=dev))
