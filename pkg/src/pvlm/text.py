"""Caption tokenization, fixed-length encoding, and token masking."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD, CLS, MASK, UNK = 0, 1, 2, 3
RESERVED = ("[PAD]", "[CLS]", "[MASK]", "[UNK]")
IGNORE_LABEL = -1

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")

# module-wide encode statistics; truncation is silent but counted here
ENCODE_STATS = {"encoded": 0, "truncated": 0}


def tokenize(text: str) -> list[str]:
    """Lowercased split on whitespace, punctuation as standalone tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    """Immutable token table. Reserved tokens sit at ids 0-3."""

    token_to_id: dict
    id_to_token: tuple

    def __len__(self):
        return len(self.id_to_token)

    @property
    def content_ids(self) -> range:
        return range(len(RESERVED), len(self.id_to_token))

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def save(self, path):
        lines = [f"{tok}\t{i}" for i, tok in enumerate(self.id_to_token)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            tok, _, idx = line.partition("\t")
            if int(idx) != len(tokens):
                raise ValueError(f"{path}:{lineno}: non-dense id {idx}")
            tokens.append(tok)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"{path}: reserved tokens missing or reordered")
        return cls({t: i for i, t in enumerate(tokens)}, tuple(tokens))


def build_vocab(corpus, max_size: int) -> Vocab:
    """Frequency vocabulary over a caption corpus.

    Keeps the most frequent tokens up to ``max_size`` (reserved tokens
    included); frequency ties are broken lexicographically.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("build_vocab: empty corpus")
    if max_size < 5:
        raise ValueError(f"build_vocab: max_size {max_size} cannot hold "
                         "the reserved tokens plus content")
    counts = Counter()
    for caption in corpus:
        counts.update(tokenize(caption))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - len(RESERVED)]]
    tokens = list(RESERVED) + kept
    return Vocab({t: i for i, t in enumerate(tokens)}, tuple(tokens))


@dataclass
class TokenSequence:
    """Fixed-length id sequence with validity flags and masking labels.

    Position 0 is always [CLS]. ``valid`` is False exactly at [PAD]
    positions. ``mlm_labels`` holds the original id at masked positions and
    IGNORE_LABEL elsewhere; ``masked_positions`` indexes those positions.
    """

    ids: np.ndarray
    valid: np.ndarray
    mlm_labels: np.ndarray
    masked_positions: np.ndarray

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])

    def content_positions(self) -> np.ndarray:
        pos = np.nonzero(self.valid)[0]
        return pos[pos > 0]  # [CLS] is valid but never maskable content

    def copy(self) -> "TokenSequence":
        return TokenSequence(self.ids.copy(), self.valid.copy(),
                             self.mlm_labels.copy(), self.masked_positions.copy())


def encode(caption: str, vocab: Vocab, length: int = 128) -> TokenSequence:
    """[CLS] + token ids + [PAD] padding, truncated to ``length`` ids total."""
    tokens = tokenize(caption)
    if len(tokens) > length - 1:
        tokens = tokens[: length - 1]
        ENCODE_STATS["truncated"] += 1
    ENCODE_STATS["encoded"] += 1
    ids = np.full(length, PAD, dtype=np.int64)
    ids[0] = CLS
    for i, tok in enumerate(tokens, start=1):
        ids[i] = vocab.id_of(tok)
    valid = np.zeros(length, dtype=bool)
    valid[: len(tokens) + 1] = True
    labels = np.full(length, IGNORE_LABEL, dtype=np.int64)
    return TokenSequence(ids, valid, labels, np.empty(0, dtype=np.int64))


def decode(seq: TokenSequence, vocab: Vocab) -> list[str]:
    """Content tokens of a sequence, [CLS]/[PAD] dropped."""
    return [vocab.id_to_token[i] for i in seq.ids[seq.valid][1:]]


def apply_mlm_mask(seq: TokenSequence, vocab: Vocab, ratio: float,
                   rng: np.random.Generator) -> TokenSequence:
    """Independent per-token masking of content positions.

    Each content token is selected with probability ``ratio``; a selected
    token becomes [MASK] 80% of the time, a random vocabulary id 10%, and
    stays unchanged 10%. Labels record the original id at every selected
    position. [CLS] and [PAD] are never touched.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio {ratio} outside [0, 1]")
    out = seq.copy()
    content = seq.content_positions()
    if content.size == 0:
        raise ValueError("apply_mlm_mask: sequence has no content tokens")
    picks = rng.random(content.size) < ratio
    chosen = content[picks]
    out.mlm_labels[:] = IGNORE_LABEL
    out.mlm_labels[chosen] = seq.ids[chosen]
    out.masked_positions = chosen
    roll = rng.random(chosen.size)
    for pos, r in zip(chosen, roll):
        if r < 0.8:
            out.ids[pos] = MASK
        elif r < 0.9:
            out.ids[pos] = rng.integers(len(RESERVED), len(vocab))
        # else: keep the original token, label only
    return out
