"""Teacher-forced training: Adam, warmup/step-decay schedule, per-batch mixing weight."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import LoadedClip, _mask_matrix, make_batches
from .model import MixingWeight, MultiEncoderTransformer, save_checkpoint
from .tensor import Tape, backward
from .textproc import PAD_ID


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    peak_lr: float = 1e-3
    warmup_epochs: int = 5
    decay_every: int = 7
    decay_factor: float = 0.1
    lambda_low: float = 0.25
    lambda_high: float = 1.0
    seed: int = 0
    decay_from_start: bool = False
    grad_clip: float | None = None
    spec_mask_t: int | None = None   # None = T // 16
    spec_mask_f: int | None = None   # None = D // 8

    def __post_init__(self):
        if not 0.0 <= self.lambda_low <= self.lambda_high <= 1.0:
            raise ValueError("need 0 <= lambda_low <= lambda_high <= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def lr_at(epoch: int, step_in_epoch: int, steps_per_epoch: int,
          config: TrainConfig) -> float:
    """Per-step linear warmup to peak_lr over the warmup epochs, then a
    piecewise-constant decay by decay_factor every decay_every epochs.

    By default the decay periods count from the end of warmup (first drop
    at warmup + decay_every); decay_from_start counts them from epoch 0.
    """
    warmup_steps = config.warmup_epochs * steps_per_epoch
    step = epoch * steps_per_epoch + step_in_epoch
    if step < warmup_steps:
        return config.peak_lr * step / warmup_steps
    anchor = 0 if config.decay_from_start else config.warmup_epochs
    n_decays = max(0, (epoch - anchor) // config.decay_every)
    return config.peak_lr * config.decay_factor ** n_decays


def sample_lambda(rng: np.random.Generator, config: TrainConfig) -> MixingWeight:
    """One mixing weight per batch, uniform on [lambda_low, lambda_high]."""
    return MixingWeight(float(rng.uniform(config.lambda_low, config.lambda_high)))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)


def batch_loss(model: MultiEncoderTransformer, batch, mix: MixingWeight,
               training: bool = False, rng=None):
    """Teacher-forced mean cross entropy per token for one batch."""
    ha = model.encode_stream(batch.audio, "audio")
    hs = model.encode_stream(batch.secondary, "secondary")
    logits = model.decode(batch.tokens_in, ha, hs, mix,
                          audio_mask=batch.audio_mask,
                          secondary_mask=batch.secondary_mask,
                          training=training, rng=rng)
    return T.cross_entropy(logits, batch.targets, ignore_id=PAD_ID)


def per_item_loss(model, batch, mix: MixingWeight) -> np.ndarray:
    """Evaluation-mode per-clip mean loss, for padding-invariance checks."""
    ha = model.encode_stream(batch.audio, "audio")
    hs = model.encode_stream(batch.secondary, "secondary")
    logits = model.decode(batch.tokens_in, ha, hs, mix,
                          audio_mask=batch.audio_mask,
                          secondary_mask=batch.secondary_mask)
    out = np.zeros(len(batch))
    for i in range(len(batch)):
        li = T.cross_entropy(
            T.Tensor(logits.data[i]), batch.targets[i], ignore_id=PAD_ID)
        out[i] = li.item()
    return out


def evaluate_loss(model, clips: list[LoadedClip], vocab, config: TrainConfig,
                  mix: MixingWeight) -> float:
    total, count = 0.0, 0
    for batch in make_batches(clips, vocab, config.batch_size,
                              max_caption_len=model.config.max_caption_len):
        n = int((batch.targets != PAD_ID).sum())
        total += batch_loss(model, batch, mix).item() * n
        count += n
    return total / max(count, 1)


def fit(model: MultiEncoderTransformer, train_clips: list[LoadedClip],
        val_clips: list[LoadedClip], vocab, config: TrainConfig,
        out_dir=None, batch_hook=None) -> list[dict]:
    """Train the model in place; returns the per-epoch history.

    Each epoch shuffles, masks the audio stream, samples one mixing weight
    per batch, and takes one Adam step per batch at the scheduled rate.
    Checkpoints (epoch_{k}.ckpt) and a JSON-lines run log are written under
    out_dir when given. Validation loss is probed at lambda 0.5.
    """
    from pathlib import Path

    rng = np.random.default_rng([config.seed, 0xA11])
    state = AdamState()
    history = []
    max_len = model.config.max_caption_len
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "run_log.jsonl", "w", encoding="utf-8")
    try:
        for epoch in range(config.epochs):
            t0 = time.time()
            batches = make_batches(train_clips, vocab, config.batch_size,
                                   shuffle_seed=[config.seed, 1 + epoch],
                                   max_caption_len=max_len)
            steps = len(batches)
            total_loss, total_tokens = 0.0, 0
            lr = 0.0
            for b_idx, batch in enumerate(batches):
                audio = batch.audio.copy()
                for i in range(len(batch)):
                    t_valid = int(batch.audio_mask[i].sum())
                    _mask_matrix(audio[i, :t_valid], config.spec_mask_t,
                                 config.spec_mask_f, rng)
                batch = type(batch)(batch.clip_ids, audio, batch.audio_mask,
                                    batch.secondary, batch.secondary_mask,
                                    batch.tokens_in, batch.targets)
                mix = sample_lambda(rng, config)
                if batch_hook is not None:
                    batch_hook(epoch, b_idx, mix, batch)
                lr = lr_at(epoch, b_idx, steps, config)
                model.zero_grads()
                with Tape() as tape:
                    loss = batch_loss(model, batch, mix, training=True, rng=rng)
                    backward(loss, tape)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} batch {b_idx} "
                        f"(clips {batch.clip_ids})")
                grads = {k: p.grad for k, p in model.params.items()
                         if p.grad is not None}
                if config.grad_clip is not None:
                    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                    if norm > config.grad_clip:
                        factor = config.grad_clip / norm
                        for g in grads.values():
                            g *= factor
                adam_step(model.params, grads, state, lr)
                n = int((batch.targets != PAD_ID).sum())
                total_loss += value * n
                total_tokens += n
            record = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": total_loss / max(total_tokens, 1),
                "val_loss": evaluate_loss(model, val_clips, vocab, config,
                                          MixingWeight(0.5)) if val_clips else None,
                "wall_time": time.time() - t0,
            }
            history.append(record)
            if out_dir is not None:
                save_checkpoint(out_dir / f"epoch_{epoch}.ckpt", model.state())
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    return history
