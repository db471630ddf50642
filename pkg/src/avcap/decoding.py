"""Beam-search caption generation with length normalization.

Hypotheses hold content token ids only (no sos/eos); cum_logprob includes
the log-probability of every emitted token, eos included once a hypothesis
finishes. Live beams are pruned on raw cumulative log-probability; length
normalization is applied when selecting among finished hypotheses, with
hypotheses that hit the depth cap admitted at their capped length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .textproc import EOS_ID, PAD_ID, SOS_ID, UNK_ID

_BANNED = (PAD_ID, SOS_ID, UNK_ID)


@dataclass
class DecodeConfig:
    beam_width: int = 5
    max_depth: int = 20
    length_norm_alpha: float = 1.0
    normalize_during_pruning: bool = False

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")


@dataclass
class BeamHypothesis:
    tokens: list[int] = field(default_factory=list)
    cum_logprob: float = 0.0
    finished: bool = False


def normalized_score(h: BeamHypothesis, alpha: float) -> float:
    """cum_logprob / length^alpha; a finished zero-length hypothesis scores -inf."""
    n = len(h.tokens)
    if n == 0:
        return float("-inf")
    return h.cum_logprob / n ** alpha


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def beam_search(model, h_audio, h_secondary, mix, config: DecodeConfig) -> list[int]:
    """Decode one clip against precomputed encoder outputs.

    model.next_logits(prefixes, h_audio, h_secondary, mix) must return the
    next-token logits for a list of equal-length id prefixes. Reserved
    tokens other than eos are never emitted. Ties in pruning break toward
    the lower token id, then the earlier parent index.
    """
    return beam_search_hypothesis(model, h_audio, h_secondary, mix, config).tokens


def beam_search_hypothesis(model, h_audio, h_secondary, mix,
                           config: DecodeConfig) -> BeamHypothesis:
    """beam_search returning the winning hypothesis with its score fields."""
    if config.beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    ha = h_audio.data if hasattr(h_audio, "data") else np.asarray(h_audio)
    hs = h_secondary.data if hasattr(h_secondary, "data") else np.asarray(h_secondary)

    live = [BeamHypothesis()]
    pool: list[BeamHypothesis] = []

    def admit(h: BeamHypothesis) -> None:
        pool.append(h)
        if len(pool) > config.beam_width:
            alpha = config.length_norm_alpha
            # evict the worst by normalized score, earliest-added wins ties
            worst = min(range(len(pool)), key=lambda i: (normalized_score(pool[i], alpha), -i))
            pool.pop(worst)

    for depth in range(config.max_depth):
        logprobs = _log_softmax(model.next_logits([h.tokens for h in live], ha, hs, mix))
        vocab = logprobs.shape[-1]
        candidates = []
        for parent, h in enumerate(live):
            row = logprobs[parent]
            eos_cum = h.cum_logprob + row[EOS_ID]
            if np.isfinite(eos_cum):
                admit(BeamHypothesis(h.tokens, eos_cum, finished=True))
            for tok in range(vocab):
                if tok in _BANNED or tok == EOS_ID or not np.isfinite(row[tok]):
                    continue
                candidates.append((h.cum_logprob + row[tok], tok, parent))
        if not candidates:
            live = []
            break
        if config.normalize_during_pruning:
            n = len(live[0].tokens) + 1
            key = lambda c: (-(c[0] / n ** config.length_norm_alpha), c[1], c[2])
        else:
            key = lambda c: (-c[0], c[1], c[2])
        candidates.sort(key=key)
        live = [BeamHypothesis(live[parent].tokens + [tok], cum)
                for cum, tok, parent in candidates[: config.beam_width]]

    for h in live:  # depth-capped hypotheses, no eos term
        admit(BeamHypothesis(h.tokens, h.cum_logprob, finished=True))

    alpha = config.length_norm_alpha
    best = max(range(len(pool)), key=lambda i: (normalized_score(pool[i], alpha), -i))
    winner = pool[best]
    return BeamHypothesis(list(winner.tokens), winner.cum_logprob, True)
