import itertools

import numpy as np
import pytest

from avcap.data import (CaptionGrammar, ConfigError, FeatureSequence, FormatError,
                        SyntheticTaskConfig, generate_clips, generate_synthetic_dataset,
                        load_clips, load_manifest, make_batches, read_fseq, spec_mask,
                        write_fseq, clips_to_loaded, event_prototypes, modifier_prototypes)
from avcap.textproc import EOS_ID, PAD_ID, SOS_ID, build_vocab, tokenize


def test_fseq_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    mat = rng.normal(size=(64, 512)).astype(np.float32)
    p = tmp_path / "x.fseq"
    write_fseq(p, FeatureSequence("x", "audio", mat))
    back = read_fseq(p)
    assert back.modality == "audio"
    assert (back.matrix == mat).all()


def test_fseq_zero_rows_rejected(tmp_path):
    with pytest.raises(ValueError):
        FeatureSequence("x", "audio", np.zeros((0, 4), dtype=np.float32))


def test_fseq_bad_magic(tmp_path):
    p = tmp_path / "bad.fseq"
    p.write_bytes(b"NOPE" + b"\0" * 32)
    with pytest.raises(FormatError, match="magic"):
        read_fseq(p)


def test_fseq_truncation_reports_offset(tmp_path):
    mat = np.ones((4, 4), dtype=np.float32)
    p = tmp_path / "t.fseq"
    write_fseq(p, FeatureSequence("t", "visual", mat))
    data = p.read_bytes()
    p.write_bytes(data[:-7])
    with pytest.raises(FormatError, match=str(len(data) - 7)):
        read_fseq(p)


def test_fseq_corpus_round_trip_small():
    # acceptance runs the 1000-file version; keep a quick smoke here
    rng = np.random.default_rng(1)
    import tempfile, os
    with tempfile.TemporaryDirectory() as td:
        for i in range(25):
            t, d = int(rng.integers(1, 6)), int(rng.integers(1, 9))
            mat = rng.normal(size=(t, d)).astype(np.float32)
            p = os.path.join(td, f"{i}.fseq")
            write_fseq(p, FeatureSequence(str(i), "audio", mat))
            assert (read_fseq(p).matrix == mat).all()


def _tiny_cfg(**kw):
    base = dict(n_train=6, n_val=2, n_eval=2, T=8, d_audio=8, d_secondary=8,
                secondary_mode="semantic", max_events=2, noise=0.02, seed=7)
    base.update(kw)
    return SyntheticTaskConfig(**base)


def test_generator_deterministic_files(tmp_path):
    cfg = _tiny_cfg()
    d1, d2 = tmp_path / "a", tmp_path / "b"
    generate_synthetic_dataset(cfg, d1)
    generate_synthetic_dataset(cfg, d2)
    for rel in sorted(p.relative_to(d1) for p in d1.rglob("*") if p.is_file()):
        assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes(), rel


def test_generator_manifest_contract(tmp_path):
    cfg = _tiny_cfg()
    records = generate_synthetic_dataset(cfg, tmp_path)
    loaded = load_manifest(tmp_path / "manifest.jsonl")
    assert len(loaded) == 10
    for r in loaded:
        if r.split == "train":
            assert len(r.captions) >= 1
        else:
            assert len(r.captions) == 5
    clips = load_clips(loaded, "train", base_dir=tmp_path)
    assert len(clips) == 6
    assert clips[0].audio.shape == (8, 8)


def test_load_clips_missing_file_names_clip(tmp_path):
    records = generate_synthetic_dataset(_tiny_cfg(), tmp_path)
    (tmp_path / records[0].audio).unlink()
    with pytest.raises(FileNotFoundError, match=records[0].clip_id):
        load_clips(records, "train", base_dir=tmp_path)


def test_semantic_modifier_decodable_by_nearest_pattern():
    cfg = _tiny_cfg(n_train=40, n_val=2, n_eval=2)
    clips = generate_clips(cfg)
    eproto = event_prototypes(cfg)
    mproto = modifier_prototypes(cfg)
    k = len(cfg.grammar.events)
    patterns, labels = [], []
    for n in range(1, cfg.max_events + 1):
        for combo in itertools.combinations(range(k), n):
            for m in range(len(cfg.grammar.modifiers)):
                patterns.append(eproto[list(combo)].mean(axis=0) + mproto[m])
                labels.append(m)
    patterns = np.array(patterns)
    for c in clips:
        mean = c.secondary.mean(axis=0)
        nearest = int(np.argmin(((patterns - mean) ** 2).sum(axis=1)))
        assert labels[nearest] == c.modifier
        assert cfg.grammar.modifiers[c.modifier] in tokenize(c.captions[0])


def test_noise_mode_secondary_is_pure_gaussian():
    cfg = _tiny_cfg(secondary_mode="noise", n_train=40)
    clips = generate_clips(cfg)
    for c in clips:
        assert c.modifier is None
        assert all(m not in tokenize(c.captions[0]) for m in cfg.grammar.modifiers)
    stacked = np.concatenate([c.secondary.ravel() for c in clips])
    assert abs(stacked.mean()) < 0.05
    assert abs(stacked.std() - 1.0) < 0.05


def test_temporal_mode_has_no_identity():
    cfg = _tiny_cfg(secondary_mode="temporal", n_train=10)
    clips = generate_clips(cfg)
    # clips with different events but same segment layout get the same
    # secondary pattern up to noise
    by_layout = {}
    for c in clips:
        by_layout.setdefault(tuple(c.segments), []).append(c)
    for group in by_layout.values():
        for a, b in zip(group, group[1:]):
            assert np.abs(a.secondary - b.secondary).max() < 6 * cfg.noise + 1e-6


def test_generator_grammar_too_small():
    with pytest.raises(ConfigError):
        _tiny_cfg(max_events=9)
    with pytest.raises(ConfigError):
        SyntheticTaskConfig(secondary_mode="semantic",
                            grammar=CaptionGrammar(modifiers=[]))


def test_captions_list_events_in_temporal_order():
    cfg = _tiny_cfg(n_train=20)
    for c in generate_clips(cfg):
        toks = tokenize(c.captions[0])
        nouns = [cfg.grammar.events[k][0] for k in c.kinds]
        positions = [toks.index(n) for n in nouns]
        assert positions == sorted(positions)


def test_spec_mask_identity_when_zero_widths():
    f = FeatureSequence("x", "audio", np.random.default_rng(2).normal(size=(16, 8)))
    out = spec_mask(f, 0, 0, np.random.default_rng(3))
    assert (out.matrix == f.matrix).all()


def test_spec_mask_zeroes_exactly_one_band_each():
    rng = np.random.default_rng(4)
    mat = (np.abs(np.random.default_rng(5).normal(size=(16, 8))) + 0.5).astype(np.float32)
    out = spec_mask(FeatureSequence("x", "audio", mat), 4, 2, rng).matrix
    zero_rows = np.nonzero((out == 0).all(axis=1))[0]
    zero_cols = np.nonzero((out == 0).all(axis=0))[0]
    if len(zero_rows):
        assert np.all(np.diff(zero_rows) == 1)
    if len(zero_cols):
        assert np.all(np.diff(zero_cols) == 1)
    untouched = out.copy()
    untouched[zero_rows, :] = mat[zero_rows, :]
    untouched[:, zero_cols] = mat[:, zero_cols]
    assert (untouched == mat).all()


def test_spec_mask_expected_zero_fraction():
    t, max_t = 16, 4
    draws = 10_000
    rng = np.random.default_rng(6)
    mat = np.ones((t, 4), dtype=np.float32)
    frac = np.empty(draws)
    for i in range(draws):
        out = spec_mask(FeatureSequence("x", "audio", mat), max_t, 0, rng).matrix
        frac[i] = (out == 0).all(axis=1).mean()
    expected = (max_t / 2) / t
    stderr = frac.std(ddof=1) / np.sqrt(draws)
    assert abs(frac.mean() - expected) < 3 * stderr


def test_spec_mask_clamps_oversize_widths():
    mat = np.ones((4, 4), dtype=np.float32)
    rng = np.random.default_rng(7)
    out = spec_mask(FeatureSequence("x", "audio", mat), 100, 100, rng)
    assert out.matrix.shape == (4, 4)


def test_batches_partition_and_padding():
    cfg = _tiny_cfg(n_train=7)
    clips = clips_to_loaded([c for c in generate_clips(cfg) if c.split == "train"])
    vocab = build_vocab([tokenize(c.captions[0]) for c in clips])
    batches = make_batches(clips, vocab, batch_size=3, shuffle_seed=11)
    assert sum(len(b) for b in batches) == len(clips)
    ids = sorted(i for b in batches for i in b.clip_ids)
    assert ids == sorted(c.clip_id for c in clips)
    for b in batches:
        assert b.tokens_in[:, 0].tolist() == [SOS_ID] * len(b)
        for i in range(len(b)):
            tgt = b.targets[i]
            n = int((tgt != PAD_ID).sum())
            assert tgt[n - 1] == EOS_ID
            # teacher forcing alignment: input is target shifted right
            assert b.tokens_in[i, 1:n].tolist() == tgt[: n - 1].tolist()
        assert b.audio_mask.any(axis=1).all()


def test_batches_shuffle_permutes_not_multiset():
    cfg = _tiny_cfg(n_train=12)
    clips = clips_to_loaded([c for c in generate_clips(cfg) if c.split == "train"])
    vocab = build_vocab([tokenize(c.captions[0]) for c in clips])
    order1 = [i for b in make_batches(clips, vocab, 4, shuffle_seed=1) for i in b.clip_ids]
    order2 = [i for b in make_batches(clips, vocab, 4, shuffle_seed=2) for i in b.clip_ids]
    assert order1 != order2
    assert sorted(order1) == sorted(order2)
    again = [i for b in make_batches(clips, vocab, 4, shuffle_seed=1) for i in b.clip_ids]
    assert order1 == again
