"""Experiment orchestration: training runs, the mixing-weight sweep,
evaluation, the vision-only ablation, and multi-run aggregation."""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (SyntheticTaskConfig, generate_synthetic_dataset, load_clips,
                   load_manifest)
from .decoding import DecodeConfig, beam_search
from .metrics import MetricReport, evaluate_corpus, report_csv
from .model import MixingWeight, ModelConfig, MultiEncoderTransformer, load_checkpoint
from .textproc import CbowConfig, build_vocab, tokenize, train_cbow, Vocabulary
from .training import TrainConfig, fit

DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(21))


@dataclass
class ExperimentConfig:
    data_dir: str = "data"
    out_dir: str = "runs"
    label: str = "run"
    seed: int = 0
    n_seeds: int = 5
    grid: tuple = DEFAULT_GRID
    selection_metric: str = "meteor"
    bleu_smoothing: bool = True
    spice_file: str | None = None
    synonym_file: str | None = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    decode: dict = field(default_factory=dict)
    cbow: dict = field(default_factory=dict)
    task: dict = field(default_factory=dict)

    def __post_init__(self):
        grid = [float(g) for g in self.grid]
        if not grid:
            raise ValueError("sweep grid must not be empty")
        if any(not 0.0 <= g <= 1.0 for g in grid):
            raise ValueError("sweep grid values must lie in [0, 1]")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("sweep grid must be strictly increasing")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        self.grid = tuple(grid)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**raw)

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(**self.decode)

    def train_config(self, seed=None) -> TrainConfig:
        kw = dict(self.train)
        kw.setdefault("seed", self.seed if seed is None else seed)
        if seed is not None:
            kw["seed"] = seed
        return TrainConfig(**kw)


# ------------------------------------------------------------- train / load


def cmd_gen_data(cfg: ExperimentConfig, out_dir=None, seed=None):
    task = dict(cfg.task)
    if seed is not None:
        task["seed"] = seed
    records = generate_synthetic_dataset(SyntheticTaskConfig(**task),
                                         out_dir or cfg.data_dir)
    return records


def train_run(cfg: ExperimentConfig, run_dir=None, seed=None, data_dir=None):
    """Train one seed: vocabulary, CBOW init, model fit, artifacts on disk."""
    seed = cfg.seed if seed is None else seed
    data_dir = Path(data_dir or cfg.data_dir)
    run_dir = Path(run_dir) if run_dir else Path(cfg.out_dir) / f"{cfg.label}-seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)

    records = load_manifest(data_dir / "manifest.jsonl")
    train_clips = load_clips(records, "train", base_dir=data_dir)
    val_clips = load_clips(records, "val", base_dir=data_dir)

    corpus = [tokenize(c.captions[0]) for c in train_clips]
    vocab = build_vocab(corpus)
    vocab.save(run_dir / "vocab.txt")

    model_kw = dict(cfg.model)
    model_kw.setdefault("d_audio_in", train_clips[0].audio.shape[1])
    model_kw.setdefault("d_secondary_in", train_clips[0].secondary.shape[1])
    model_cfg = ModelConfig(vocab_size=vocab.size, **model_kw)

    cbow_kw = dict(cfg.cbow)
    cbow_kw.setdefault("embedding_dim", model_cfg.d_model)
    cbow_kw.setdefault("seed", seed)
    if cbow_kw["embedding_dim"] != model_cfg.d_model:
        raise ValueError("cbow embedding_dim must equal the model width")
    embeddings, _ = train_cbow(corpus, vocab, CbowConfig(**cbow_kw))

    model = MultiEncoderTransformer(model_cfg, seed=seed)
    model.load_token_embeddings(embeddings)

    train_cfg = cfg.train_config(seed=seed)
    history = fit(model, train_clips, val_clips, vocab, train_cfg, out_dir=run_dir)

    resolved = {
        "label": cfg.label,
        "seed": seed,
        "data_dir": str(data_dir),
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(train_cfg),
        "decode": dataclasses.asdict(cfg.decode_config()),
    }
    with open(run_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
    return model, vocab, history


def load_run(run_dir):
    """Rebuild the trained model of a run from its final checkpoint."""
    run_dir = Path(run_dir)
    with open(run_dir / "config.json", encoding="utf-8") as fh:
        resolved = json.load(fh)
    vocab = Vocabulary.load(run_dir / "vocab.txt")
    model_cfg = ModelConfig(**resolved["model"])
    model = MultiEncoderTransformer(model_cfg, seed=resolved["seed"])
    last_epoch = resolved["train"]["epochs"] - 1
    model.load_state(load_checkpoint(run_dir / f"epoch_{last_epoch}.ckpt"))
    return model, vocab, resolved


# ------------------------------------------------------------------ decode


def encode_clips(model, clips):
    """Per-clip encoder outputs; they do not depend on the mixing weight."""
    out = {}
    for c in clips:
        ha, hs = model.encode_pair(c.audio, c.secondary)
        out[c.clip_id] = (ha.data, hs.data)
    return out


def decode_encoded(model, encoded, vocab, lam: float, decode_cfg: DecodeConfig):
    mix = MixingWeight(lam)
    captions = {}
    for clip_id in sorted(encoded):
        ha, hs = encoded[clip_id]
        ids = beam_search(model, ha, hs, mix, decode_cfg)
        captions[clip_id] = " ".join(vocab.decode(ids))
    return captions


def decode_clips(model, clips, vocab, lam: float, decode_cfg: DecodeConfig):
    return decode_encoded(model, encode_clips(model, clips), vocab, lam, decode_cfg)


def _references(clips) -> dict[str, list[str]]:
    return {c.clip_id: list(c.captions) for c in clips}


# ---------------------------------------------------------------- commands


@dataclass
class SweepResult:
    chosen_lambda: float
    rows: list[dict]
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"chosen_lambda": self.chosen_lambda, "rows": self.rows,
                           "notes": self.notes}, indent=2, sort_keys=True)


def cmd_sweep(model, val_clips, vocab, grid, selection_metric: str,
              decode_cfg: DecodeConfig, bleu_smoothing: bool = True,
              synonyms=None) -> SweepResult:
    """Decode the validation set at every grid weight and pick the argmax of
    the selection metric; ties go to the larger (more acoustic) weight."""
    if not grid:
        raise ValueError("sweep grid must not be empty")
    encoded = encode_clips(model, val_clips)
    refs = _references(val_clips)
    rows = []
    for lam in grid:
        captions = decode_encoded(model, encoded, vocab, lam, decode_cfg)
        report = evaluate_corpus(captions, refs, bleu_smoothing=bleu_smoothing,
                                 synonyms=synonyms)
        row = {"lambda": float(lam)}
        row.update(report.corpus)
        rows.append(row)
    if selection_metric not in rows[0]:
        raise ValueError(f"unknown selection metric {selection_metric!r}")
    best = max(rows, key=lambda r: (r[selection_metric], r["lambda"]))
    result = SweepResult(best["lambda"], rows)
    for metric in ("bleu4", "meteor", "rouge_l", "cider_d"):
        alt = max(rows, key=lambda r: (r[metric], r["lambda"]))
        if abs(alt["lambda"] - best["lambda"]) > 0.15:
            note = (f"argmax lambda for {metric} ({alt['lambda']:.2f}) is far from "
                    f"the {selection_metric} choice ({best['lambda']:.2f})")
            result.notes.append(note)
            warnings.warn(note)
    return result


def cmd_eval(model, eval_clips, vocab, lam: float, decode_cfg: DecodeConfig,
             bleu_smoothing: bool = True, spice=None, synonyms=None):
    """Beam-decode every clip at a fixed mixing weight and score the corpus."""
    captions = decode_clips(model, eval_clips, vocab, lam, decode_cfg)
    report = evaluate_corpus(captions, _references(eval_clips),
                             bleu_smoothing=bleu_smoothing, spice=spice,
                             synonyms=synonyms)
    return report, captions


def cmd_vision_only(model, eval_clips, vocab, decode_cfg: DecodeConfig,
                    bleu_smoothing: bool = True, spice=None, synonyms=None):
    return cmd_eval(model, eval_clips, vocab, 0.0, decode_cfg,
                    bleu_smoothing=bleu_smoothing, spice=spice, synonyms=synonyms)


def cmd_curve(models, eval_clips, vocab_by_model, grid,
              decode_cfg: DecodeConfig) -> list[dict]:
    """Mean and standard deviation of CIDEr-D per grid weight across seeds."""
    refs = _references(eval_clips)
    encoded = [encode_clips(m, eval_clips) for m in models]
    rows = []
    for lam in grid:
        scores = []
        for m, enc, vocab in zip(models, encoded, vocab_by_model):
            captions = decode_encoded(m, enc, vocab, lam, decode_cfg)
            report = evaluate_corpus(captions, refs, bleu_smoothing=True)
            scores.append(report.corpus["cider_d"])
        rows.append({"lambda": float(lam),
                     "cider_mean": float(np.mean(scores)),
                     "cider_sd": float(np.std(scores, ddof=1)) if len(scores) > 1 else 0.0})
    return rows


def curve_csv(rows) -> str:
    lines = ["lambda,cider_mean,cider_sd"]
    for r in rows:
        lines.append(f"{r['lambda']},{r['cider_mean']:.6f},{r['cider_sd']:.6f}")
    return "\n".join(lines) + "\n"


_TABLE_KEYS = ("bleu4", "meteor", "rouge_l", "cider_d", "spice", "spider")
_TABLE_HEADS = ("BLEU-4", "METEOR", "ROUGE-L", "CIDEr", "SPICE", "SPIDEr")


def cmd_table(run_dirs) -> dict:
    """Aggregate eval reports by run label into mean +- sd rows, percent units."""
    groups: dict[str, list[dict]] = {}
    metric_sets = set()
    for rd in run_dirs:
        rd = Path(rd)
        with open(rd / "config.json", encoding="utf-8") as fh:
            label = json.load(fh)["label"]
        report = MetricReport.from_json((rd / "report.json").read_text())
        groups.setdefault(label, []).append(report.corpus)
        metric_sets.add(frozenset(k for k in _TABLE_KEYS if k in report.corpus))
    if len(metric_sets) > 1:
        raise ValueError("runs report inconsistent metric sets")
    present = [k for k in _TABLE_KEYS if k in next(iter(metric_sets))]
    table = {}
    for label, rows in groups.items():
        table[label] = {}
        for key in present:
            vals = np.array([r[key] for r in rows]) * 100.0
            sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            table[label][key] = (float(vals.mean()), sd)
    return table


def table_markdown(table: dict) -> str:
    heads = [h for h, k in zip(_TABLE_HEADS, _TABLE_KEYS)
             if any(k in row for row in table.values())]
    keys = [k for k in _TABLE_KEYS if any(k in row for row in table.values())]
    lines = ["| Configuration | " + " | ".join(f"{h} (%)" for h in heads) + " |",
             "|" + "---|" * (len(heads) + 1)]
    for label in sorted(table):
        cells = [f"{table[label][k][0]:.2f} ±{table[label][k][1]:.2f}" for k in keys]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def table_csv(table: dict) -> str:
    keys = [k for k in _TABLE_KEYS if any(k in row for row in table.values())]
    heads = [h for h, k in zip(_TABLE_HEADS, _TABLE_KEYS) if k in keys]
    header = ["configuration"]
    for h in heads:
        header += [h, f"{h}_sd"]
    lines = [",".join(header)]
    for label in sorted(table):
        cells = [label]
        for k in keys:
            mean, sd = table[label][k]
            cells += [f"{mean:.2f}", f"{sd:.2f}"]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------- file output


def save_candidates(captions: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for clip_id in sorted(captions):
            fh.write(json.dumps({"clip_id": clip_id, "caption": captions[clip_id]},
                                sort_keys=True) + "\n")


def load_candidates(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["clip_id"]] = rec["caption"]
    return out


def write_eval_artifacts(run_dir, report: MetricReport, captions, prefix="") -> None:
    run_dir = Path(run_dir)
    (run_dir / f"{prefix}report.json").write_text(report.to_json())
    (run_dir / f"{prefix}report.csv").write_text(report_csv(report))
    save_candidates(captions, run_dir / f"{prefix}candidates.jsonl")
