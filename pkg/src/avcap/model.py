"""The multi-encoder transformer.

Two single-layer feedforward encoders (one per feature stream) feed a
2-layer pre-layer-norm decoder whose cross-attention blocks are duplicated
per stream; the two cross-attention outputs are linearly interpolated by a
mixing weight before the residual add. Token embeddings can be preloaded
from CBOW training and stay trainable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .textproc import SOS_ID


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


@dataclass
class ModelConfig:
    vocab_size: int
    d_audio_in: int
    d_secondary_in: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 2048
    dropout: float = 0.2
    max_caption_len: int = 20
    encoder_positions: bool = False
    scale_embedding: bool = True
    precision: str = "float64"

    def __post_init__(self):
        for name in ("vocab_size", "d_audio_in", "d_secondary_in", "d_model",
                     "n_heads", "n_layers", "d_ff", "max_caption_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal positions")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def parameter_count(self) -> int:
        d, f, v = self.d_model, self.d_ff, self.vocab_size
        enc = (self.d_audio_in + 1) * d + (self.d_secondary_in + 1) * d
        attn = 4 * d * d + 3 * d  # q/k/v/out weights; biases on q, v, out only
        per_layer = 3 * attn + (d * f + f) + (f * d + d) + 3 * 2 * d
        return enc + v * d + self.n_layers * per_layer + 2 * d + (d * v + v)


@dataclass(frozen=True)
class MixingWeight:
    """Weight of the acoustic stream; the secondary stream gets the rest."""

    lambda_audio: float

    def __post_init__(self):
        if not 0.0 <= self.lambda_audio <= 1.0:
            raise ValueError(f"lambda_audio must lie in [0, 1], got {self.lambda_audio}")

    @property
    def lambda_secondary(self) -> float:
        return 1.0 - self.lambda_audio


def sinusoidal_positions(max_len: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """PE(pos, 2i) = sin(pos / 10000^(2i/d)), PE(pos, 2i+1) = cos(same)."""
    if d_model % 2:
        raise ValueError("d_model must be even for sinusoidal positions")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    denom = np.power(10000.0, np.arange(0, d_model, 2) / d_model)
    pe = np.empty((max_len, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos / denom)
    pe[:, 1::2] = np.cos(pos / denom)
    return pe.astype(dtype)


def _as_batched(x) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params: dict,
                         n_heads: int, mask=None, dropout_rate: float = 0.0,
                         rng=None, training: bool = False) -> Tensor:
    """Scaled dot-product attention with n_heads, masking, and output projection.

    q, k, v are (B, T, d_model) or (T, d_model); mask is boolean, True at
    valid key positions, broadcastable to the score matrix. Fully masked
    rows yield zero outputs.
    """
    q, squeeze = _as_batched(q)
    k, _ = _as_batched(k)
    v, _ = _as_batched(v)
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"attention widths disagree: {q.shape}, {k.shape}, {v.shape}")
    dh = d // n_heads
    qp = T.add(T.matmul(q, params["wq"]), params["bq"])
    # no key bias: softmax is invariant to the constant per-query shift it
    # would add, so the parameter would be inert
    kp = T.matmul(k, params["wk"])
    vp = T.add(T.matmul(v, params["wv"]), params["bv"])

    score_shape = (q.shape[0], q.shape[1], k.shape[1])
    if mask is None:
        mask = np.ones(score_shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, score_shape)
        except ValueError:
            raise ShapeError(f"mask shape {mask.shape} does not broadcast to scores {score_shape}")

    heads = []
    inv = 1.0 / math.sqrt(dh)
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = (T.slice_last(p, lo, hi) for p in (qp, kp, vp))
        scores = T.scale(T.matmul(qh, T.transpose_last2(kh)), inv)
        att = T.masked_softmax(scores, mask)
        if training and dropout_rate > 0.0:
            att = T.dropout(att, dropout_rate, rng)
        heads.append(T.matmul(att, vh))
    out = T.add(T.matmul(T.concat(heads, axis=-1), params["wo"]), params["bo"])
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out


class MultiEncoderTransformer:
    """Dual-stream encoder pair plus a decoder with duplicated cross-attention."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.dtype = config.dtype
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d, f, v = config.d_model, config.d_ff, config.vocab_size

        def affine(name, fan_in, fan_out):
            bound = 1.0 / math.sqrt(fan_in)
            self._add(f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self._add(f"{name}.b", rng.uniform(-bound, bound, size=(fan_out,)))

        def norm(name):
            self._add(f"{name}.g", np.ones(d))
            self._add(f"{name}.b", np.zeros(d))

        affine("enc_audio", config.d_audio_in, d)
        affine("enc_secondary", config.d_secondary_in, d)
        self._add("tok_emb", rng.uniform(-1 / math.sqrt(d), 1 / math.sqrt(d), size=(v, d)))
        for i in range(config.n_layers):
            p = f"layers.{i}"
            norm(f"{p}.norm1")
            for block in ("self_attn", "cross_audio", "cross_secondary"):
                bound = 1.0 / math.sqrt(d)
                for w, b in (("wq", "bq"), ("wk", None), ("wv", "bv"), ("wo", "bo")):
                    self._add(f"{p}.{block}.{w}", rng.uniform(-bound, bound, size=(d, d)))
                    if b is not None:
                        self._add(f"{p}.{block}.{b}", rng.uniform(-bound, bound, size=(d,)))
            norm(f"{p}.norm2")
            norm(f"{p}.norm3")
            affine(f"{p}.ffn.fc1", d, f)
            affine(f"{p}.ffn.fc2", f, d)
        norm("final_norm")
        affine("out_proj", d, v)

        pe_len = config.max_caption_len + 1
        self._pe = Tensor(sinusoidal_positions(pe_len, d, self.dtype))
        self._enc_pe_cache: dict[int, Tensor] = {}

    def _add(self, name, data):
        self.params[name] = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)

    def _block_params(self, prefix):
        return {k: self.params[f"{prefix}.{k}"]
                for k in ("wq", "bq", "wk", "wv", "bv", "wo", "bo")}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def load_token_embeddings(self, matrix: np.ndarray) -> None:
        emb = self.params["tok_emb"]
        matrix = np.asarray(matrix, dtype=self.dtype)
        if matrix.shape != emb.shape:
            raise ShapeError(f"embedding matrix {matrix.shape} does not match {emb.shape}")
        emb.data[...] = matrix

    # ------------------------------------------------------------- encoders

    def encode_stream(self, features, which: str) -> Tensor:
        """Per-timestep affine map plus ReLU into model width."""
        if which not in ("audio", "secondary"):
            raise ValueError(f"unknown stream {which!r}")
        x = features if isinstance(features, Tensor) else Tensor(
            np.asarray(features, dtype=self.dtype))
        want = self.config.d_audio_in if which == "audio" else self.config.d_secondary_in
        if x.shape[-1] != want:
            raise ShapeError(f"{which} features have width {x.shape[-1]}, expected {want}")
        prefix = "enc_audio" if which == "audio" else "enc_secondary"
        h = T.relu(T.add(T.matmul(x, self.params[f"{prefix}.w"]),
                         self.params[f"{prefix}.b"]))
        if self.config.encoder_positions:
            t = h.shape[-2]
            pe = self._enc_pe_cache.get(t)
            if pe is None:
                pe = Tensor(sinusoidal_positions(t, self.config.d_model, self.dtype))
                self._enc_pe_cache[t] = pe
            h = T.add(h, pe)
        return h

    def encode_pair(self, audio, secondary) -> tuple[Tensor, Tensor]:
        return self.encode_stream(audio, "audio"), self.encode_stream(secondary, "secondary")

    # -------------------------------------------------------------- decoder

    def dual_cross_attention(self, x: Tensor, h_audio: Tensor, h_secondary: Tensor,
                             mix: MixingWeight, layer: int, audio_mask=None,
                             secondary_mask=None, training: bool = False,
                             rng=None) -> Tensor:
        """lambda * CrossAttn_audio(x) + (1 - lambda) * CrossAttn_secondary(x)."""
        if not isinstance(mix, MixingWeight):
            mix = MixingWeight(float(mix))
        cfg = self.config
        ca = multi_head_attention(
            x, h_audio, h_audio, self._block_params(f"layers.{layer}.cross_audio"),
            cfg.n_heads, mask=audio_mask, dropout_rate=cfg.dropout, rng=rng,
            training=training)
        cs = multi_head_attention(
            x, h_secondary, h_secondary,
            self._block_params(f"layers.{layer}.cross_secondary"),
            cfg.n_heads, mask=secondary_mask, dropout_rate=cfg.dropout, rng=rng,
            training=training)
        return T.add(T.scale(ca, mix.lambda_audio), T.scale(cs, mix.lambda_secondary))

    def decode(self, tokens, h_audio: Tensor, h_secondary: Tensor, mix: MixingWeight,
               audio_mask=None, secondary_mask=None, training: bool = False,
               rng=None) -> Tensor:
        """Causal decoder over (B, L) token ids; returns (B, L, vocab) logits."""
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ShapeError(f"decode expects (B, L) token ids, got {tokens.shape}")
        b, length = tokens.shape
        if length > cfg.max_caption_len + 1:
            raise ValueError(
                f"token sequence of length {length} exceeds max_caption_len + sos "
                f"({cfg.max_caption_len + 1})")
        if training and cfg.dropout > 0.0 and rng is None:
            raise ValueError("training forward with dropout needs an rng")
        if not isinstance(mix, MixingWeight):
            mix = MixingWeight(float(mix))

        x = T.embedding(self.params["tok_emb"], tokens)
        if cfg.scale_embedding:
            x = T.scale(x, math.sqrt(cfg.d_model))
        x = T.add(x, self._pe_slice(length))
        if training and cfg.dropout > 0.0:
            x = T.dropout(x, cfg.dropout, rng)

        causal = np.tril(np.ones((length, length), dtype=bool))
        if audio_mask is not None:
            audio_mask = np.asarray(audio_mask, dtype=bool)[:, None, :]
        if secondary_mask is not None:
            secondary_mask = np.asarray(secondary_mask, dtype=bool)[:, None, :]

        for i in range(cfg.n_layers):
            p = f"layers.{i}"
            sa = self._self_attention(x, p, causal, training, rng)
            x = T.add(x, self._maybe_dropout(sa, training, rng))
            qn = self._norm(x, f"{p}.norm2")
            mixed = self.dual_cross_attention(
                qn, h_audio, h_secondary, mix, i, audio_mask=audio_mask,
                secondary_mask=secondary_mask, training=training, rng=rng)
            x = T.add(x, self._maybe_dropout(mixed, training, rng))
            ff = self._ffn(self._norm(x, f"{p}.norm3"), p)
            x = T.add(x, self._maybe_dropout(ff, training, rng))

        x = self._norm(x, "final_norm")
        return T.add(T.matmul(x, self.params["out_proj.w"]), self.params["out_proj.b"])

    def decoder_forward(self, tokens, h_audio: Tensor, h_secondary: Tensor,
                        mix: MixingWeight, training: bool = False, rng=None) -> Tensor:
        """Single-sequence decode: (L,) ids against (T, d) encoder outputs."""
        ids = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
        ha, _ = _as_batched(h_audio)
        hs, _ = _as_batched(h_secondary)
        out = self.decode(ids, ha, hs, mix, training=training, rng=rng)
        return T.reshape(out, out.shape[1:])

    def next_logits(self, prefixes, h_audio_data: np.ndarray,
                    h_secondary_data: np.ndarray, mix: MixingWeight) -> np.ndarray:
        """Last-position logits for equal-length id prefixes (evaluation only)."""
        b = len(prefixes)
        tokens = np.array([[SOS_ID] + list(p) for p in prefixes], dtype=np.int64)
        ha = Tensor(np.broadcast_to(h_audio_data, (b,) + h_audio_data.shape).copy())
        hs = Tensor(np.broadcast_to(h_secondary_data, (b,) + h_secondary_data.shape).copy())
        out = self.decode(tokens, ha, hs, mix, training=False)
        return out.data[:, -1, :]

    # -------------------------------------------------------------- helpers

    def _pe_slice(self, length):
        pe = self._pe
        if length == pe.shape[0]:
            return pe
        return Tensor(pe.data[:length])

    def _norm(self, x, name):
        return T.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _maybe_dropout(self, x, training, rng):
        if training and self.config.dropout > 0.0:
            return T.dropout(x, self.config.dropout, rng)
        return x

    def _self_attention(self, x, prefix, causal, training, rng):
        xn = self._norm(x, f"{prefix}.norm1")
        return multi_head_attention(
            xn, xn, xn, self._block_params(f"{prefix}.self_attn"),
            self.config.n_heads, mask=causal, dropout_rate=self.config.dropout,
            rng=rng, training=training)

    def _ffn(self, x, prefix):
        h = T.relu(T.add(T.matmul(x, self.params[f"{prefix}.ffn.fc1.w"]),
                         self.params[f"{prefix}.ffn.fc1.b"]))
        return T.add(T.matmul(h, self.params[f"{prefix}.ffn.fc2.w"]),
                     self.params[f"{prefix}.ffn.fc2.b"])

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise CheckpointError(f"parameter name mismatch: missing={sorted(missing)}, "
                                  f"unexpected={sorted(extra)}")
        for k, v in state.items():
            if tuple(v.shape) != self.params[k].shape:
                raise CheckpointError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data[...] = np.asarray(v, dtype=self.dtype)


# ----------------------------------------------------------------- checkpoints

_CKPT_MAGIC = "AVCKPT1"


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    """Text header of names and shapes, then float32 little-endian payloads."""
    header = [f"{_CKPT_MAGIC} {len(state)}"]
    for name, arr in state.items():
        dims = " ".join(str(d) for d in arr.shape)
        header.append(f"{name} {dims}".rstrip())
    header.append("END")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header")
    first = raw[:nl].decode("ascii", "replace").split()
    if len(first) != 2 or first[0] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {first[:1]}")
    count = int(first[1])
    entries = []
    offset = nl + 1
    for _ in range(count):
        nl = raw.find(b"\n", offset)
        parts = raw[offset:nl].decode("ascii").split()
        entries.append((parts[0], tuple(int(d) for d in parts[1:])))
        offset = nl + 1
    nl = raw.find(b"\n", offset)
    if raw[offset:nl] != b"END":
        raise CheckpointError(f"{path}: header not terminated by END")
    offset = nl + 1
    state = {}
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: payload for {name} truncated at byte {len(raw)}")
        state[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return state
