"""Shared helpers for the test suite."""

import numpy as np

from avcap import tensor as T
from avcap.model import MixingWeight, MultiEncoderTransformer
from avcap.tensor import grad_check
from avcap.textproc import EOS_ID, SOS_ID


def model_fd_errors(cfg, model_seed, data_seed, lam=0.5, h=1e-5,
                    batch=2, t_feat=3, t_tok=3):
    """Finite-difference check of the full teacher-forced loss against the
    analytic gradient of every parameter tensor. Returns name -> max
    relative error."""
    m = MultiEncoderTransformer(cfg, seed=model_seed)
    rng = np.random.default_rng(data_seed)
    audio = rng.normal(size=(batch, t_feat, cfg.d_audio_in))
    sec = rng.normal(size=(batch, t_feat, cfg.d_secondary_in))
    tokens = np.concatenate(
        [np.full((batch, 1), SOS_ID, dtype=np.int64),
         rng.integers(4, cfg.vocab_size, size=(batch, t_tok))], axis=1)
    targets = np.concatenate(
        [tokens[:, 1:], np.full((batch, 1), EOS_ID, dtype=np.int64)], axis=1)

    def loss_fn():
        ha = m.encode_stream(audio, "audio")
        hs = m.encode_stream(sec, "secondary")
        logits = m.decode(tokens, ha, hs, MixingWeight(lam))
        return T.cross_entropy(logits, targets, ignore_id=0)

    return {name: grad_check(lambda t: loss_fn(), p, h=h)
            for name, p in m.params.items()}
