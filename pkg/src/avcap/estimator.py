"""sklearn-style facade over the captioning pipeline.

X is a list of (audio, secondary) feature-matrix pairs, y a list of caption
strings. fit() builds the vocabulary, pretrains CBOW embeddings and trains
the transformer; predict() beam-decodes captions at a fixed mixing weight.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import LoadedClip
from .decoding import DecodeConfig, beam_search
from .model import MixingWeight, ModelConfig, MultiEncoderTransformer
from .textproc import CbowConfig, build_vocab, tokenize, train_cbow
from .training import TrainConfig, fit


def check_feature_pairs(X, widths=None):
    """Validate a list of (audio, secondary) matrix pairs; returns the pairs
    as float arrays plus their (audio, secondary) widths."""
    pairs = []
    for i, item in enumerate(X):
        if len(item) != 2:
            raise ValueError(f"X[{i}] must be an (audio, secondary) pair")
        audio, secondary = (np.asarray(m, dtype=np.float64) for m in item)
        for name, mat in (("audio", audio), ("secondary", secondary)):
            if mat.ndim != 2 or mat.shape[0] < 1:
                raise ValueError(f"X[{i}] {name} must be a T x D matrix with T >= 1")
            if not np.isfinite(mat).all():
                raise ValueError(f"X[{i}] {name} has non-finite entries")
        if widths is None:
            widths = (audio.shape[1], secondary.shape[1])
        if (audio.shape[1], secondary.shape[1]) != widths:
            raise ValueError(f"X[{i}] widths {audio.shape[1]}/{secondary.shape[1]} "
                             f"differ from {widths[0]}/{widths[1]}")
        pairs.append((audio, secondary))
    if not pairs:
        raise ValueError("X must not be empty")
    return pairs, widths


def check_captions(y, n):
    if len(y) != n:
        raise ValueError(f"y has {len(y)} captions for {n} inputs")
    for i, cap in enumerate(y):
        if not isinstance(cap, str) or not tokenize(cap):
            raise ValueError(f"y[{i}] must be a non-empty caption string")
    return list(y)


class MultiEncoderCaptioner(BaseEstimator):
    """Audio captioner with an auxiliary feature stream.

    Parameters mirror the architecture and training defaults; eval_lambda
    is the acoustic mixing weight used by predict().
    """

    def __init__(self, d_model=128, n_heads=4, n_layers=2, d_ff=2048,
                 dropout=0.2, max_caption_len=20, epochs=30, batch_size=8,
                 peak_lr=1e-3, lambda_low=0.25, lambda_high=1.0,
                 eval_lambda=0.5, beam_width=5, max_depth=20,
                 cbow_epochs=20, seed=0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.d_ff = d_ff
        self.dropout = dropout
        self.max_caption_len = max_caption_len
        self.epochs = epochs
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.lambda_low = lambda_low
        self.lambda_high = lambda_high
        self.eval_lambda = eval_lambda
        self.beam_width = beam_width
        self.max_depth = max_depth
        self.cbow_epochs = cbow_epochs
        self.seed = seed

    def fit(self, X, y):
        pairs, widths = check_feature_pairs(X)
        captions = check_captions(y, len(pairs))
        clips = [LoadedClip(f"clip_{i:05d}", a, s, [cap], "train")
                 for i, ((a, s), cap) in enumerate(zip(pairs, captions))]
        corpus = [tokenize(c) for c in captions]
        self.vocab_ = build_vocab(corpus)
        embeddings, _ = train_cbow(
            corpus, self.vocab_,
            CbowConfig(embedding_dim=self.d_model, epochs=self.cbow_epochs,
                       seed=self.seed))
        config = ModelConfig(
            vocab_size=self.vocab_.size, d_audio_in=widths[0],
            d_secondary_in=widths[1], d_model=self.d_model,
            n_heads=self.n_heads, n_layers=self.n_layers, d_ff=self.d_ff,
            dropout=self.dropout, max_caption_len=self.max_caption_len)
        self.model_ = MultiEncoderTransformer(config, seed=self.seed)
        self.model_.load_token_embeddings(embeddings)
        train_cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            peak_lr=self.peak_lr, lambda_low=self.lambda_low,
            lambda_high=self.lambda_high, seed=self.seed)
        self.history_ = fit(self.model_, clips, [], self.vocab_, train_cfg)
        self.feature_widths_ = widths
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("fit this captioner before calling predict")

    def predict(self, X):
        self._require_fitted()
        pairs, _ = check_feature_pairs(X, self.feature_widths_)
        mix = MixingWeight(self.eval_lambda)
        cfg = DecodeConfig(beam_width=self.beam_width, max_depth=self.max_depth)
        out = []
        for audio, secondary in pairs:
            ha, hs = self.model_.encode_pair(audio, secondary)
            ids = beam_search(self.model_, ha.data, hs.data, mix, cfg)
            out.append(" ".join(self.vocab_.decode(ids)))
        return out

    def score(self, X, y):
        """Mean METEOR of predictions against the given captions."""
        from .metrics import EvalPair, meteor_pair
        self._require_fitted()
        captions = check_captions(y, len(X))
        preds = self.predict(X)
        scores = [meteor_pair(EvalPair(str(i), tokenize(p), [tokenize(c)]))
                  for i, (p, c) in enumerate(zip(preds, captions))]
        return float(np.mean(scores))
