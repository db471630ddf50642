"""Caption tokenization, vocabulary construction, and CBOW embedding pretraining."""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass

import numpy as np

PAD_ID = 0
SOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED = ("<pad>", "<sos>", "<eos>", "<unk>")

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


class Vocabulary:
    """Token <-> id table with reserved ids pad=0, sos=1, eos=2, unk=3."""

    def __init__(self, tokens: list[str]):
        self._id_to_token = list(RESERVED) + list(tokens)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    @property
    def size(self) -> int:
        return len(self._id_to_token)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self._token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self._id_to_token[i] for i in ids]

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def tokens(self) -> list[str]:
        """Non-reserved tokens in id order."""
        return self._id_to_token[len(RESERVED):]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens():
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            toks = [line.strip() for line in fh if line.strip()]
        return cls(toks)


def build_vocab(corpus: list[list[str]], min_count: int = 1) -> Vocabulary:
    """Vocabulary over tokens with frequency >= min_count.

    Ids are assigned in (frequency desc, then lexicographic) order after
    the reserved ids, so two builds on the same corpus agree exactly.
    """
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for caption in corpus for tok in caption)
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass
class CbowConfig:
    """Hyperparameters for CBOW pretraining of the word embedding layer."""

    embedding_dim: int = 128
    window: int = 5
    negatives: int = 5
    epochs: int = 20
    learning_rate: float = 0.025
    min_learning_rate: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def train_cbow(corpus: list[list[str]], vocab: Vocabulary,
               config: CbowConfig) -> tuple[np.ndarray, list[float]]:
    """Train context-mean CBOW with negative sampling on tokenized captions.

    Returns (input-side embedding matrix [vocab.size x dim], per-epoch mean
    losses). Reserved rows keep a small random-normal initialization. The
    negative distribution is unigram frequency raised to 0.75.
    """
    if not corpus:
        raise ValueError("cannot train CBOW on an empty corpus")
    rng = np.random.default_rng(config.seed)
    dim = config.embedding_dim
    v = vocab.size

    w_in = rng.normal(scale=0.01, size=(v, dim))
    w_in[len(RESERVED):] = (rng.random((v - len(RESERVED), dim)) - 0.5) / dim
    w_out = np.zeros((v, dim))

    sents = [[i for i in vocab.encode(toks) if i != UNK_ID] for toks in corpus]
    sents = [s for s in sents if len(s) >= 2]
    if not sents:
        raise ValueError("corpus has no usable captions after vocabulary lookup")

    counts = Counter(i for s in sents for i in s)
    table_ids = np.array(sorted(counts), dtype=np.int64)
    weights = np.array([counts[i] for i in table_ids], dtype=np.float64) ** 0.75
    cum = np.cumsum(weights / weights.sum())

    def draw_negative(center):
        for _ in range(8):
            tid = int(table_ids[np.searchsorted(cum, rng.random())])
            if tid != center:
                return tid
        return tid

    total = config.epochs * sum(len(s) for s in sents)
    processed = 0
    losses = []
    for _ in range(config.epochs):
        epoch_loss = 0.0
        n_pos = 0
        for sent in sents:
            for i, center in enumerate(sent):
                frac = processed / total
                lr = max(config.learning_rate * (1.0 - frac), config.min_learning_rate)
                processed += 1
                lo, hi = max(0, i - config.window), min(len(sent), i + config.window + 1)
                ctx = sent[lo:i] + sent[i + 1:hi]
                if not ctx:
                    continue
                h = w_in[ctx].mean(axis=0)
                err = np.zeros(dim)
                for target, label in [(center, 1.0)] + [
                        (draw_negative(center), 0.0) for _ in range(config.negatives)]:
                    z = _sigmoid(w_out[target] @ h)
                    epoch_loss += -np.log(z if label else 1.0 - z + 1e-12)
                    g = (label - z) * lr
                    err += g * w_out[target]
                    w_out[target] += g * h
                w_in[ctx] += err / len(ctx)
                n_pos += 1
        losses.append(epoch_loss / max(n_pos, 1))
    return w_in, losses
