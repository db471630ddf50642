"""Feature files, manifests, the synthetic audiovisual caption task, and batching.

The synthetic generator stands in for a captioned clip collection plus
pretrained feature extractors. Each clip has 1..max_events latent events
laid out on a timeline; the audio stream encodes event identity in the
active frames, while the secondary stream's content depends on its mode:

  semantic  - a whole-sequence pattern encoding which events occur plus a
              color modifier that appears in the caption but is carried by
              no other stream
  temporal  - only event on/off boundaries, no identity
  noise     - pure Gaussian, independent of the caption

Captions list the events in temporal order; only semantic-mode captions
carry the modifier clause.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .textproc import EOS_ID, PAD_ID, SOS_ID, tokenize

MAGIC = b"FSQ1"
_HEADER = struct.Struct("<4sIIB7s")
_MODALITY_CODE = {"audio": 0, "visual": 1}
_MODALITY_NAME = {0: "audio", 1: "visual"}


class FormatError(ValueError):
    """Malformed feature file."""


class ConfigError(ValueError):
    """Invalid generator configuration."""


@dataclass
class FeatureSequence:
    """One clip's T x D feature matrix plus modality tag."""

    clip_id: str
    modality: str
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.modality not in _MODALITY_CODE:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise ValueError(f"feature matrix must be T x D with T >= 1, got {self.matrix.shape}")


def write_fseq(path, fseq: FeatureSequence) -> None:
    mat = np.ascontiguousarray(fseq.matrix, dtype="<f4")
    if mat.shape[0] < 1:
        raise ValueError("refusing to write a zero-row feature matrix")
    if not np.isfinite(mat).all():
        raise ValueError(f"non-finite features in {fseq.clip_id}")
    t, d = mat.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, t, d, _MODALITY_CODE[fseq.modality], b"\0" * 7))
        fh.write(mat.tobytes())


def read_fseq(path, clip_id: str | None = None) -> FeatureSequence:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header, {len(raw)} bytes < {_HEADER.size}")
    magic, t, d, modality, _ = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0: {magic!r}")
    if modality not in _MODALITY_NAME:
        raise FormatError(f"{path}: unknown modality code {modality} at byte 12")
    expected = _HEADER.size + 4 * t * d
    if len(raw) != expected:
        raise FormatError(f"{path}: payload truncated at byte {len(raw)}, expected {expected}")
    mat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, d)
    return FeatureSequence(clip_id or Path(path).stem, _MODALITY_NAME[modality], mat.copy())


# ------------------------------------------------------------------ manifest


@dataclass
class ManifestRecord:
    clip_id: str
    audio: str
    secondary: str
    captions: list[str]
    split: str


def validate_manifest(records: list[ManifestRecord]) -> None:
    seen = set()
    for r in records:
        if r.clip_id in seen:
            raise ValueError(f"duplicate clip_id {r.clip_id}")
        seen.add(r.clip_id)
        if r.split not in ("train", "val", "eval"):
            raise ValueError(f"{r.clip_id}: unknown split {r.split!r}")
        if r.split == "train" and len(r.captions) < 1:
            raise ValueError(f"{r.clip_id}: train clip needs at least one caption")
        if r.split in ("val", "eval") and len(r.captions) != 5:
            raise ValueError(f"{r.clip_id}: {r.split} clip needs exactly 5 captions")


def save_manifest(records: list[ManifestRecord], path) -> None:
    validate_manifest(records)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(dataclasses.asdict(r), sort_keys=True) + "\n")


def load_manifest(path) -> list[ManifestRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(ManifestRecord(**json.loads(line)))
    validate_manifest(records)
    return records


@dataclass
class LoadedClip:
    """A manifest record with its feature matrices in memory."""

    clip_id: str
    audio: np.ndarray
    secondary: np.ndarray
    captions: list[str]
    split: str


def load_clips(records: list[ManifestRecord], split: str | None = None,
               base_dir=None) -> list[LoadedClip]:
    """Read feature files for the given split; relative paths resolve
    against base_dir."""
    base = Path(base_dir) if base_dir is not None else Path(".")
    out = []
    for r in records:
        if split is not None and r.split != split:
            continue
        clips = []
        for p in (r.audio, r.secondary):
            path = Path(p) if Path(p).is_absolute() else base / p
            if not path.exists():
                raise FileNotFoundError(f"clip {r.clip_id}: missing feature file {path}")
            clips.append(read_fseq(path, r.clip_id).matrix)
        out.append(LoadedClip(r.clip_id, clips[0], clips[1], list(r.captions), r.split))
    return out


# ----------------------------------------------------------- synthetic task


@dataclass
class CaptionGrammar:
    events: list[tuple[str, str]] = field(default_factory=lambda: [
        ("dog", "barks"), ("cat", "meows"), ("bird", "chirps"), ("bell", "rings"),
        ("engine", "hums"), ("door", "slams"), ("baby", "cries"), ("horn", "honks"),
    ])
    modifiers: list[str] = field(default_factory=lambda: ["red", "blue", "green", "amber"])


@dataclass
class SyntheticTaskConfig:
    n_train: int = 500
    n_val: int = 50
    n_eval: int = 100
    T: int = 16
    d_audio: int = 32
    d_secondary: int = 32
    secondary_mode: str = "semantic"
    max_events: int = 3
    noise: float = 0.05
    secondary_event_scale: float = 1.0
    seed: int = 0
    grammar: CaptionGrammar = field(default_factory=CaptionGrammar)

    def __post_init__(self):
        if isinstance(self.grammar, dict):
            g = dict(self.grammar)
            if "events" in g:
                g["events"] = [tuple(e) for e in g["events"]]
            self.grammar = CaptionGrammar(**g)
        if self.secondary_mode not in ("semantic", "temporal", "noise"):
            raise ConfigError(f"unknown secondary_mode {self.secondary_mode!r}")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.max_events < 1 or self.max_events > len(self.grammar.events):
            raise ConfigError(
                f"max_events={self.max_events} needs at least that many grammar events "
                f"(have {len(self.grammar.events)})")
        if self.secondary_mode == "semantic" and not self.grammar.modifiers:
            raise ConfigError("semantic mode needs at least one modifier")
        if self.T < self.max_events:
            raise ConfigError("T must allow one frame per event")


def _unit_rows(rng, n, d):
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def audio_prototypes(cfg: SyntheticTaskConfig) -> np.ndarray:
    return _unit_rows(np.random.default_rng([cfg.seed, 101]),
                      len(cfg.grammar.events), cfg.d_audio)


def event_prototypes(cfg: SyntheticTaskConfig) -> np.ndarray:
    """Secondary-stream patterns for event identity (semantic mode)."""
    return _unit_rows(np.random.default_rng([cfg.seed, 102]),
                      len(cfg.grammar.events), cfg.d_secondary)


def modifier_prototypes(cfg: SyntheticTaskConfig) -> np.ndarray:
    return _unit_rows(np.random.default_rng([cfg.seed, 103]),
                      max(len(cfg.grammar.modifiers), 1), cfg.d_secondary)


def boundary_prototypes(cfg: SyntheticTaskConfig) -> np.ndarray:
    """(onset, offset, steady) patterns for temporal mode."""
    return _unit_rows(np.random.default_rng([cfg.seed, 104]), 3, cfg.d_secondary)


def ordinal_prototypes(cfg: SyntheticTaskConfig) -> np.ndarray:
    """Per-ordinal audio components; they carry the temporal order of events
    the way pretrained audio embeddings carry local temporal context."""
    return _unit_rows(np.random.default_rng([cfg.seed, 105]),
                      cfg.max_events, cfg.d_audio)


_ARTICLES = ["a", "a", "one", "a", "one"]
_JOINERS = ["then", "and then", "then", "before", "and then"]


def realize_caption(kinds: list[int], modifier: int | None,
                    grammar: CaptionGrammar, variant: int = 0) -> str:
    """Template caption listing events in order, optionally with a modifier clause."""
    art = _ARTICLES[variant % len(_ARTICLES)]
    joiner = _JOINERS[variant % len(_JOINERS)]
    phrases = [f"{art} {grammar.events[k][0]} {grammar.events[k][1]}" for k in kinds]
    text = f" {joiner} ".join(phrases)
    if modifier is not None:
        text += f" in a {grammar.modifiers[modifier]} room"
    return text


@dataclass
class SyntheticClip:
    clip_id: str
    split: str
    kinds: list[int]
    segments: list[tuple[int, int]]
    modifier: int | None
    captions: list[str]
    audio: np.ndarray
    secondary: np.ndarray


def _make_clip(cfg: SyntheticTaskConfig, split: str, index: int,
               protos) -> SyntheticClip:
    rng = np.random.default_rng([cfg.seed, {"train": 1, "val": 2, "eval": 3}[split], index])
    a_proto, e_proto, m_proto, b_proto, o_proto = protos
    n_events = int(rng.integers(1, cfg.max_events + 1))
    kinds = list(rng.choice(len(cfg.grammar.events), size=n_events, replace=False))
    kinds = [int(k) for k in kinds]

    cuts = sorted(rng.choice(np.arange(1, cfg.T), size=n_events - 1, replace=False)) if n_events > 1 else []
    bounds = [0] + [int(c) for c in cuts] + [cfg.T]
    segments = [(bounds[i], bounds[i + 1]) for i in range(n_events)]

    audio = rng.normal(scale=cfg.noise, size=(cfg.T, cfg.d_audio))
    for ordinal, ((lo, hi), k) in enumerate(zip(segments, kinds)):
        audio[lo:hi] += a_proto[k] + o_proto[ordinal]

    modifier = None
    if cfg.secondary_mode == "semantic":
        modifier = int(rng.integers(0, len(cfg.grammar.modifiers)))
        base = cfg.secondary_event_scale * e_proto[kinds].mean(axis=0) + m_proto[modifier]
        secondary = base + rng.normal(scale=cfg.noise, size=(cfg.T, cfg.d_secondary))
    elif cfg.secondary_mode == "temporal":
        onset, offset, steady = b_proto
        secondary = np.tile(steady, (cfg.T, 1))
        for lo, hi in segments:
            secondary[lo] = onset
            secondary[hi - 1] = offset
        secondary = secondary + rng.normal(scale=cfg.noise, size=secondary.shape)
    else:
        # clip-constant Gaussian pattern plus jitter: caption-independent by
        # construction, but it does not average away under attention the way
        # frame-iid noise would
        base = rng.normal(size=cfg.d_secondary)
        secondary = base + rng.normal(scale=cfg.noise, size=(cfg.T, cfg.d_secondary))

    n_refs = 1 if split == "train" else 5
    captions = [realize_caption(kinds, modifier, cfg.grammar, variant=v)
                for v in range(n_refs)]
    return SyntheticClip(
        clip_id=f"{split}_{index:04d}", split=split, kinds=kinds,
        segments=segments, modifier=modifier, captions=captions,
        audio=audio.astype(np.float32), secondary=secondary.astype(np.float32))


def generate_clips(cfg: SyntheticTaskConfig) -> list[SyntheticClip]:
    """All clips of the task, in (train, val, eval) order. Deterministic in cfg.seed."""
    protos = (audio_prototypes(cfg), event_prototypes(cfg),
              modifier_prototypes(cfg), boundary_prototypes(cfg),
              ordinal_prototypes(cfg))
    clips = []
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val), ("eval", cfg.n_eval)):
        for i in range(n):
            clips.append(_make_clip(cfg, split, i, protos))
    return clips


def clips_to_loaded(clips: list[SyntheticClip]) -> list[LoadedClip]:
    return [LoadedClip(c.clip_id, c.audio, c.secondary, list(c.captions), c.split)
            for c in clips]


def generate_synthetic_dataset(cfg: SyntheticTaskConfig, out_dir) -> list[ManifestRecord]:
    """Write feature files, manifest.jsonl and task_config.json under out_dir."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    records = []
    for c in generate_clips(cfg):
        a_rel = f"features/{c.clip_id}_audio.fseq"
        s_rel = f"features/{c.clip_id}_sec.fseq"
        write_fseq(out / a_rel, FeatureSequence(c.clip_id, "audio", c.audio))
        write_fseq(out / s_rel, FeatureSequence(c.clip_id, "visual", c.secondary))
        records.append(ManifestRecord(c.clip_id, a_rel, s_rel, c.captions, c.split))
    save_manifest(records, out / "manifest.jsonl")
    cfg_dict = dataclasses.asdict(cfg)
    with open(out / "task_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg_dict, fh, indent=2, sort_keys=True)
    return records


# ------------------------------------------------------------- augmentation


def spec_mask(features: FeatureSequence, max_t: int | None, max_f: int | None,
              rng: np.random.Generator) -> FeatureSequence:
    """One time mask and one feature mask, widths uniform on {0..max}.

    Defaults scale the published widths down to the feature-sequence
    dimensions: max_t = T // 16, max_f = D // 8. Widths larger than the
    corresponding dimension are clamped.
    """
    out = features.matrix.copy()
    masked = FeatureSequence(features.clip_id, features.modality, out)
    _mask_matrix(masked.matrix, max_t, max_f, rng)
    return masked


def _mask_matrix(mat: np.ndarray, max_t: int | None, max_f: int | None,
                 rng: np.random.Generator) -> None:
    t, d = mat.shape
    max_t = t // 16 if max_t is None else min(max_t, t)
    max_f = d // 8 if max_f is None else min(max_f, d)
    tw = int(rng.integers(0, max_t + 1))
    t0 = int(rng.integers(0, t - tw + 1))
    mat[t0:t0 + tw, :] = 0.0
    fw = int(rng.integers(0, max_f + 1))
    f0 = int(rng.integers(0, d - fw + 1))
    mat[:, f0:f0 + fw] = 0.0


# ------------------------------------------------------------------ batches


@dataclass
class Batch:
    clip_ids: list[str]
    audio: np.ndarray          # (B, Ta, Da)
    audio_mask: np.ndarray     # (B, Ta) bool, True = valid frame
    secondary: np.ndarray
    secondary_mask: np.ndarray
    tokens_in: np.ndarray      # (B, L) starting with sos
    targets: np.ndarray        # (B, L) ending with eos, pad elsewhere

    def __len__(self):
        return len(self.clip_ids)


def _pad_features(mats: list[np.ndarray]):
    b = len(mats)
    tmax = max(m.shape[0] for m in mats)
    d = mats[0].shape[1]
    out = np.zeros((b, tmax, d), dtype=np.float64)
    mask = np.zeros((b, tmax), dtype=bool)
    for i, m in enumerate(mats):
        out[i, : m.shape[0]] = m
        mask[i, : m.shape[0]] = True
    return out, mask


def encode_caption(caption: str, vocab, max_len: int) -> list[int]:
    ids = vocab.encode(tokenize(caption))[:max_len]
    return ids


def make_batches(clips: list[LoadedClip], vocab, batch_size: int = 8,
                 shuffle_seed=None, max_caption_len: int = 20) -> list[Batch]:
    """Batch clips with padded features and sos...eos token frames.

    Shuffling is a deterministic permutation of the clip order per seed;
    pass shuffle_seed=None to keep manifest order.
    """
    order = np.arange(len(clips))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(clips))
    batches = []
    for start in range(0, len(clips), batch_size):
        chunk = [clips[i] for i in order[start:start + batch_size]]
        ids = [encode_caption(c.captions[0], vocab, max_caption_len) for c in chunk]
        lmax = max(len(t) for t in ids) + 1
        tokens_in = np.full((len(chunk), lmax), PAD_ID, dtype=np.int64)
        targets = np.full((len(chunk), lmax), PAD_ID, dtype=np.int64)
        for i, t in enumerate(ids):
            tokens_in[i, 0] = SOS_ID
            tokens_in[i, 1:len(t) + 1] = t
            targets[i, :len(t)] = t
            targets[i, len(t)] = EOS_ID
        audio, audio_mask = _pad_features([c.audio for c in chunk])
        sec, sec_mask = _pad_features([c.secondary for c in chunk])
        batches.append(Batch([c.clip_id for c in chunk], audio, audio_mask,
                             sec, sec_mask, tokens_in, targets))
    return batches
