import itertools
import math

import numpy as np
import pytest

from avcap.decoding import (BeamHypothesis, DecodeConfig, beam_search,
                            beam_search_hypothesis, normalized_score)
from avcap.model import MixingWeight, ModelConfig, MultiEncoderTransformer
from avcap.textproc import EOS_ID, PAD_ID, SOS_ID, UNK_ID

CONTENT = (4, 5, 6)  # ids after the reserved block for a 3-token vocabulary


class StubModel:
    """Frozen random next-token logits, a pure function of the prefix."""

    def __init__(self, vocab_size, seed, scale=1.0):
        self.vocab_size = vocab_size
        self.seed = seed
        self.scale = scale

    def next_logits(self, prefixes, h_audio, h_secondary, mix):
        out = np.empty((len(prefixes), self.vocab_size))
        for i, p in enumerate(prefixes):
            rng = np.random.default_rng([self.seed, 7 + len(p)] + [int(t) for t in p])
            out[i] = rng.normal(size=self.vocab_size) * self.scale
        return out


class OneHotModel:
    """Emits a fixed sequence with near-one probability, then eos."""

    def __init__(self, sequence, vocab_size):
        self.sequence = list(sequence)
        self.vocab_size = vocab_size

    def next_logits(self, prefixes, h_audio, h_secondary, mix):
        out = np.full((len(prefixes), self.vocab_size), -50.0)
        for i, p in enumerate(prefixes):
            want = self.sequence[len(p)] if len(p) < len(self.sequence) else EOS_ID
            out[i, want] = 50.0
        return out


class UniformModel:
    def __init__(self, vocab_size):
        self.vocab_size = vocab_size

    def next_logits(self, prefixes, h_audio, h_secondary, mix):
        return np.zeros((len(prefixes), self.vocab_size))


def _log_softmax_row(row):
    return row - np.logaddexp.reduce(row)


def _seq_logprob(model, tokens, with_eos):
    cum = 0.0
    for t, tok in enumerate(tokens):
        row = _log_softmax_row(model.next_logits([list(tokens[:t])], None, None, None)[0])
        cum += row[tok]
    if with_eos:
        row = _log_softmax_row(model.next_logits([list(tokens)], None, None, None)[0])
        cum += row[EOS_ID]
    return cum


def enumerate_best(model, config):
    """Score every sequence of content tokens up to max_depth by normalized
    log-probability; eos-terminated below the cap, capped at the cap."""
    best_score, best_seq = float("-inf"), None
    for length in range(0, config.max_depth + 1):
        capped = length == config.max_depth
        for seq in itertools.product(CONTENT, repeat=length):
            cum = _seq_logprob(model, seq, with_eos=not capped)
            score = (float("-inf") if length == 0
                     else cum / length ** config.length_norm_alpha)
            if score > best_score:
                best_score, best_seq = score, list(seq)
    return best_seq, best_score


def greedy_reference(model, config):
    """Argmax content path; eos-stop options compete by normalized score."""
    tokens, cum = [], 0.0
    options = []
    for _ in range(config.max_depth):
        row = _log_softmax_row(model.next_logits([tokens], None, None, None)[0])
        if tokens:
            options.append((cum + row[EOS_ID], list(tokens)))
        tok = min(CONTENT, key=lambda t: (-row[t], t))
        cum += row[tok]
        tokens = tokens + [tok]
    options.append((cum, list(tokens)))
    best = max(options, key=lambda o: (o[0] / len(o[1]) ** config.length_norm_alpha,
                                       -len(o[1])))
    return best[1]


# ---------------------------------------------------------------- scoring


def test_normalized_score_alpha_zero_is_raw():
    h = BeamHypothesis([4, 5, 6], -2.5)
    assert normalized_score(h, 0.0) == -2.5


def test_normalized_score_arithmetic():
    h = BeamHypothesis([4, 4, 4, 4], -4.0)
    assert normalized_score(h, 1.0) == pytest.approx(-1.0)


def test_normalized_score_prefers_longer_at_equal_cum():
    short = BeamHypothesis([4, 5], -3.0)
    longer = BeamHypothesis([4, 5, 6], -3.0)
    assert normalized_score(longer, 1.0) > normalized_score(short, 1.0)


def test_normalized_score_zero_length_is_neg_inf():
    assert normalized_score(BeamHypothesis([], -0.1, True), 1.0) == float("-inf")


# ------------------------------------------------------------ beam search


def test_one_hot_model_any_width():
    seq = [5, 4, 6, 4]
    model = OneHotModel(seq, vocab_size=7)
    for width in (1, 2, 5, 30):
        cfg = DecodeConfig(beam_width=width, max_depth=10)
        assert beam_search(model, None, None, None, cfg) == seq


def test_uniform_model_deterministic_lowest_ids():
    model = UniformModel(7)
    cfg = DecodeConfig(beam_width=3, max_depth=4)
    out = beam_search(model, None, None, None, cfg)
    # all continuations tie; lowest content id wins every step, and the
    # capped path beats any eos-terminated one under alpha=1
    assert out == [CONTENT[0]] * 4
    assert beam_search(model, None, None, None, cfg) == out


def test_beam_equals_enumeration_small():
    for seed in range(25):
        model = StubModel(7, seed=seed)
        cfg = DecodeConfig(beam_width=27, max_depth=3)
        got = beam_search(model, None, None, None, cfg)
        want, _ = enumerate_best(model, cfg)
        assert got == want, f"seed {seed}"


def test_width_one_equals_greedy():
    for seed in range(25):
        model = StubModel(7, seed=100 + seed)
        cfg = DecodeConfig(beam_width=1, max_depth=5)
        assert beam_search(model, None, None, None, cfg) == greedy_reference(model, cfg), seed


def test_width_monotonicity_over_random_models():
    # empirical property on a fixed model suite: widening the beam does not
    # reduce the selected hypothesis' normalized score (not a theorem for
    # this retained-set construction, so the suite is pinned)
    violations = []
    for seed in range(50):
        model = StubModel(8, seed=7000 + seed)
        prev = float("-inf")
        for width in range(1, 9):
            cfg = DecodeConfig(beam_width=width, max_depth=6)
            h = beam_search_hypothesis(model, None, None, None, cfg)
            score = normalized_score(h, cfg.length_norm_alpha)
            if score < prev - 1e-12:
                violations.append((seed, width))
            prev = score
    assert not violations, violations


def test_no_reserved_tokens_in_output():
    for seed in range(20):
        model = StubModel(9, seed=2000 + seed)
        out = beam_search(model, None, None, None, DecodeConfig(beam_width=4, max_depth=8))
        assert all(t not in (PAD_ID, SOS_ID, EOS_ID, UNK_ID) for t in out)


def test_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(beam_width=0)
    with pytest.raises(ValueError):
        DecodeConfig(max_depth=0)


def test_defaults_match_published_settings():
    cfg = DecodeConfig()
    assert (cfg.beam_width, cfg.max_depth, cfg.length_norm_alpha) == (5, 20, 1.0)


def test_normalize_during_pruning_flag_changes_pruning():
    # with normalization in the pruning step both readings stay valid
    # decodes; they may or may not coincide on a given model
    model = StubModel(7, seed=42)
    a = beam_search(model, None, None, None,
                    DecodeConfig(beam_width=2, max_depth=4))
    b = beam_search(model, None, None, None,
                    DecodeConfig(beam_width=2, max_depth=4, normalize_during_pruning=True))
    assert all(t in CONTENT for t in a) and all(t in CONTENT for t in b)


def test_beam_search_on_real_model():
    cfg = ModelConfig(vocab_size=9, d_audio_in=4, d_secondary_in=4, d_model=8,
                      n_heads=2, n_layers=1, d_ff=12, dropout=0.0, max_caption_len=6)
    m = MultiEncoderTransformer(cfg, seed=3)
    rng = np.random.default_rng(4)
    ha, hs = m.encode_pair(rng.normal(size=(5, 4)), rng.normal(size=(5, 4)))
    out1 = beam_search(m, ha, hs, MixingWeight(0.7), DecodeConfig(beam_width=3, max_depth=6))
    out2 = beam_search(m, ha, hs, MixingWeight(0.7), DecodeConfig(beam_width=3, max_depth=6))
    assert out1 == out2
    assert all(4 <= t < 9 for t in out1)
    assert len(out1) <= 6
