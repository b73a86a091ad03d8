"""Visual and linguistic input embeddings.

The visual sequence gives each ROI row the sum of three projected parts:
its own region feature, the whole-image contextual feature (broadcast to
every row), and its box geometry. The linguistic sequence is the usual
token + position + segment sum plus a learned three-row keyword channel
("Sembedding") marking padding (0), ordinary tokens (1) and S-keywords (2).
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, add, as_tensor, embedding, matmul, mul

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")

SYMBOL_PAD, SYMBOL_TOKEN, SYMBOL_KEYWORD = 0, 1, 2

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def split_words(text: str) -> list[str]:
    """Lowercase and split into word and punctuation tokens."""
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Token to id map with the reserved ids PAD=0, CLS=1, SEP=2, MASK=3, UNK=4."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            if w not in self.stoi:
                self.stoi[w] = len(self.itos)
                self.itos.append(w)

    @classmethod
    def build(cls, texts: Iterable[str], exclude: Iterable[str] = (), min_count: int = 1) -> "Vocabulary":
        """Vocabulary of every word seen at least ``min_count`` times, most frequent first."""
        banned = set(exclude)
        counts = Counter(w for t in texts for w in split_words(t) if w not in banned)
        words = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        return cls(words)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def id(self, word: str) -> int:
        return self.stoi.get(word, UNK)

    def words(self) -> list[str]:
        """Non-reserved entries in id order, suitable for ``Vocabulary(words)``."""
        return self.itos[len(SPECIAL_TOKENS):]


@dataclass
class TokenizedText:
    token_ids: np.ndarray
    sembedding_symbols: np.ndarray
    attention_mask: np.ndarray
    words: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass(frozen=True)
class KeywordSet:
    sample_id: str
    keywords: frozenset[str]


def tokenize(text: str, vocab: Vocabulary, max_len: int, keywords: KeywordSet | None = None) -> TokenizedText:
    """BERT-style ``[CLS] words... [SEP] [PAD]...`` encoding of ``text``.

    Words beyond ``max_len - 2`` are dropped. Symbols are assigned from
    ``keywords`` when given, otherwise every real token gets symbol 1.
    """
    if max_len < 3:
        raise ValueError(f"max_len must be at least 3, got {max_len}")
    words = split_words(text)[: max_len - 2]
    surface = ["[CLS]", *words, "[SEP]"]
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[0] = CLS
    ids[1 : len(words) + 1] = [vocab.id(w) for w in words]
    ids[len(words) + 1] = SEP
    mask = np.zeros(max_len, dtype=np.int64)
    mask[: len(surface)] = 1
    tok = TokenizedText(ids, mask.copy(), mask, surface + ["[PAD]"] * (max_len - len(surface)))
    tok.sembedding_symbols = assign_sembedding_symbols(tok, keywords)
    return tok


def extract_keywords(
    text: str,
    noun_lexicon: set[str],
    stopwords: set[str],
    sample_id: str = "",
    override: Mapping[str, KeywordSet] | None = None,
) -> KeywordSet:
    """Keywords of ``text``: its words that are lexicon nouns and not stopwords.

    A precomputed entry for ``sample_id`` in ``override`` wins over the
    heuristic.
    """
    if override is not None and sample_id in override:
        return override[sample_id]
    found = {w for w in split_words(text) if w in noun_lexicon and w not in stopwords}
    return KeywordSet(sample_id, frozenset(found))


def assign_sembedding_symbols(tokens: TokenizedText, keywords: KeywordSet | None) -> np.ndarray:
    kw = keywords.keywords if keywords is not None else frozenset()
    symbols = np.where(tokens.attention_mask == 1, SYMBOL_TOKEN, SYMBOL_PAD).astype(np.int64)
    for i, w in enumerate(tokens.words):
        if tokens.attention_mask[i] and i > 0 and w in kw:
            symbols[i] = SYMBOL_KEYWORD
    return symbols


@dataclass
class VisualFeatures:
    """ROI features [..., R, D], boxes [..., R, 4], contextual [..., D], roi mask [..., R]."""

    roi_features: np.ndarray
    boxes: np.ndarray
    contextual: np.ndarray
    roi_mask: np.ndarray


@dataclass
class Linear:
    """Affine map ``x @ weight + bias`` with weight stored as [in, out]."""

    weight: Tensor
    bias: Tensor | None

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 1:
            return self(x.reshape(1, x.shape[0])).reshape(self.weight.shape[1])
        out = matmul(x, self.weight)
        return out if self.bias is None else add(out, self.bias)

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, std: float = 0.02,
             bias: bool = True) -> "Linear":
        return cls(Tensor(rng.normal(0.0, std, (n_in, n_out)), requires_grad=True),
                   Tensor(np.zeros(n_out), requires_grad=True) if bias else None)


@dataclass
class EmbeddingParams:
    token: Tensor
    position: Tensor
    segment: Tensor
    sembedding: Tensor
    roi_proj: Linear
    ctx_proj: Linear
    box_proj: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, vocab_size: int, max_len: int, visual_dim: int,
             hidden: int, std: float = 0.02) -> "EmbeddingParams":
        def table(rows):
            return Tensor(rng.normal(0.0, std, (rows, hidden)), requires_grad=True)

        return cls(
            token=table(vocab_size),
            position=table(max_len),
            segment=table(2),
            sembedding=table(3),
            roi_proj=Linear.init(rng, visual_dim, hidden, std),
            ctx_proj=Linear.init(rng, visual_dim, hidden, std),
            box_proj=Linear.init(rng, 4, hidden, std),
        )

    @property
    def hidden(self) -> int:
        return self.token.shape[1]


def fuse_visual(vf: VisualFeatures, params: EmbeddingParams) -> Tensor:
    """ROI rows plus broadcast contextual term plus box term; masked rows zeroed."""
    d_v = params.roi_proj.weight.shape[0]
    roi = as_tensor(vf.roi_features)
    ctx = as_tensor(vf.contextual)
    if roi.shape[-1] != d_v or ctx.shape[-1] != d_v:
        raise DimensionError(
            f"visual feature width {roi.shape[-1]}/{ctx.shape[-1]} does not match projection input {d_v}")
    ctx_row = params.ctx_proj(ctx.reshape(ctx.shape[:-1] + (1, d_v)))
    fused = params.roi_proj(roi) + ctx_row + params.box_proj(vf.boxes)
    mask = np.asarray(vf.roi_mask, dtype=np.float64)[..., None]
    return mul(fused, mask)


def fuse_linguistic(tokens: TokenizedText, params: EmbeddingParams) -> Tensor:
    ids = np.asarray(tokens.token_ids)
    t = ids.shape[-1]
    if t > params.position.shape[0]:
        raise DimensionError(f"sequence length {t} exceeds position table {params.position.shape[0]}")
    out = embedding(params.token, ids) + params.position[:t] + params.segment[0]
    return out + embedding(params.sembedding, tokens.sembedding_symbols)
