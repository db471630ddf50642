"""Scratch calibration for the acceptance-7 experiment scale (not shipped)."""

import json
import shutil
import tempfile
import time
from pathlib import Path

import numpy as np

from avcap.data import SyntheticTaskConfig, generate_synthetic_dataset, load_clips, load_manifest
from avcap.harness import ExperimentConfig, cmd_eval, cmd_sweep, train_run, load_run
from avcap.decoding import DecodeConfig

BASE = dict(
    n_train=160, n_val=32, n_eval=56, T=12, d_audio=16, d_secondary=16,
    max_events=3, noise=0.05, secondary_event_scale=0.5, seed=11,
)
MODEL = dict(d_model=32, n_heads=2, n_layers=2, d_ff=64, dropout=0.2,
             max_caption_len=16)
TRAIN = dict(epochs=40, batch_size=8, peak_lr=2e-3, decay_every=12)
DECODE = dict(beam_width=5, max_depth=16)
GRID = tuple(round(0.05 * i, 2) for i in range(21))

root = Path(tempfile.mkdtemp(prefix="avcap_cal_"))
print("workdir", root)

for mode in ("semantic", "noise"):
    t0 = time.time()
    data_dir = root / f"data_{mode}"
    generate_synthetic_dataset(SyntheticTaskConfig(secondary_mode=mode, **BASE), data_dir)
    records = load_manifest(data_dir / "manifest.jsonl")
    val = load_clips(records, "val", base_dir=data_dir)
    ev = load_clips(records, "eval", base_dir=data_dir)
    print(f"[{mode}] data gen {time.time()-t0:.1f}s")

    for seed in (0, 1):
        cfg = ExperimentConfig(data_dir=str(data_dir), out_dir=str(root / f"runs_{mode}"),
                               label=mode, seed=seed, model=MODEL, train=TRAIN,
                               decode=DECODE, cbow=dict(embedding_dim=32, epochs=10))
        t0 = time.time()
        model, vocab, history = train_run(cfg, seed=seed)
        t_train = time.time() - t0
        t0 = time.time()
        sweep = cmd_sweep(model, val, vocab, GRID, "meteor", DecodeConfig(**DECODE))
        t_sweep = time.time() - t0
        t0 = time.time()
        rep_swept, _ = cmd_eval(model, ev, vocab, sweep.chosen_lambda, DecodeConfig(**DECODE))
        rep_l1, _ = cmd_eval(model, ev, vocab, 1.0, DecodeConfig(**DECODE))
        rep_l0, _ = cmd_eval(model, ev, vocab, 0.0, DecodeConfig(**DECODE))
        t_eval = time.time() - t0
        print(f"[{mode} seed {seed}] train {t_train:.1f}s (loss {history[-1]['train_loss']:.3f}) "
              f"sweep {t_sweep:.1f}s eval {t_eval:.1f}s | "
              f"lambda*={sweep.chosen_lambda:.2f} "
              f"cider swept={rep_swept.corpus['cider_d']:.3f} "
              f"l1={rep_l1.corpus['cider_d']:.3f} l0={rep_l0.corpus['cider_d']:.3f} | "
              f"meteor l0={rep_l0.corpus['meteor']:.3f} bleu l0={rep_l0.corpus['bleu4']:.3f} "
              f"rouge l0={rep_l0.corpus['rouge_l']:.3f}")
print("total artifacts at", root)
