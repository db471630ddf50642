"""Command-line interface.

    avcap gen-data    --config cfg.json [--out DIR] [--seed N]
    avcap train       --config cfg.json [--out RUN_DIR] [--seed N]
    avcap sweep       --config cfg.json --run RUN_DIR [--out FILE]
    avcap eval        --config cfg.json --run RUN_DIR [--lambda X] [--out FILE]
    avcap vision-only --config cfg.json --run RUN_DIR [--out FILE]
    avcap curve       --config cfg.json --runs DIR [DIR ...] [--out FILE]
    avcap table       --runs DIR [DIR ...] [--out FILE]

Exit status 0 on success; any failure prints one `error: ...` line on
stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .data import load_clips, load_manifest
from .harness import ExperimentConfig
from .metrics import load_spice, load_synonyms


def _load_cfg(args, **overrides) -> ExperimentConfig:
    if args.config is None:
        return ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.load(args.config, **overrides)


def _eval_inputs(cfg: ExperimentConfig, run_dir):
    model, vocab, resolved = harness.load_run(run_dir)
    data_dir = Path(resolved["data_dir"])
    records = load_manifest(data_dir / "manifest.jsonl")
    spice = load_spice(cfg.spice_file) if cfg.spice_file else None
    synonyms = load_synonyms(cfg.synonym_file) if cfg.synonym_file else None
    return model, vocab, records, data_dir, spice, synonyms


def _cmd_gen_data(args):
    cfg = _load_cfg(args, seed=args.seed)
    records = harness.cmd_gen_data(cfg, out_dir=args.out, seed=args.seed)
    print(f"wrote {len(records)} clips to {args.out or cfg.data_dir}")


def _cmd_train(args):
    cfg = _load_cfg(args, seed=args.seed)
    run_dir = args.out or Path(cfg.out_dir) / f"{cfg.label}-seed{cfg.seed}"
    _, _, history = harness.train_run(cfg, run_dir=run_dir, seed=cfg.seed)
    print(f"trained {cfg.train_config(cfg.seed).epochs} epochs, "
          f"final train loss {history[-1]['train_loss']:.4f}, run dir {run_dir}")


def _cmd_sweep(args):
    cfg = _load_cfg(args)
    model, vocab, records, data_dir, _, synonyms = _eval_inputs(cfg, args.run)
    val = load_clips(records, "val", base_dir=data_dir)
    result = harness.cmd_sweep(model, val, vocab, cfg.grid, cfg.selection_metric,
                               cfg.decode_config(), cfg.bleu_smoothing, synonyms)
    out = Path(args.out) if args.out else Path(args.run) / "sweep.json"
    out.write_text(result.to_json())
    print(f"chosen lambda {result.chosen_lambda} -> {out}")


def _cmd_eval(args, lam=None, prefix=""):
    cfg = _load_cfg(args)
    model, vocab, records, data_dir, spice, synonyms = _eval_inputs(cfg, args.run)
    eval_clips = load_clips(records, "eval", base_dir=data_dir)
    if lam is None:
        lam = args.lam
    if lam is None:
        sweep_file = Path(args.run) / "sweep.json"
        if not sweep_file.exists():
            raise ValueError("no --lambda given and no sweep.json in the run dir")
        import json
        lam = json.loads(sweep_file.read_text())["chosen_lambda"]
    report, captions = harness.cmd_eval(model, eval_clips, vocab, float(lam),
                                        cfg.decode_config(), cfg.bleu_smoothing,
                                        spice, synonyms)
    out_dir = Path(args.out) if args.out else Path(args.run)
    harness.write_eval_artifacts(out_dir, report, captions, prefix=prefix)
    shown = {k: round(v, 4) for k, v in report.corpus.items()}
    print(f"lambda {float(lam)}: {shown} -> {out_dir}")


def _cmd_vision_only(args):
    _cmd_eval(args, lam=0.0, prefix="vision_")


def _cmd_curve(args):
    cfg = _load_cfg(args)
    models, vocabs = [], []
    data_dir = None
    for rd in args.runs:
        model, vocab, resolved = harness.load_run(rd)
        models.append(model)
        vocabs.append(vocab)
        data_dir = Path(resolved["data_dir"])
    records = load_manifest(data_dir / "manifest.jsonl")
    eval_clips = load_clips(records, "eval", base_dir=data_dir)
    rows = harness.cmd_curve(models, eval_clips, vocabs, cfg.grid, cfg.decode_config())
    out = Path(args.out) if args.out else Path("curve.csv")
    out.write_text(harness.curve_csv(rows))
    print(f"wrote {len(rows)} grid points -> {out}")


def _cmd_table(args):
    table = harness.cmd_table(args.runs)
    out = Path(args.out) if args.out else Path("table.md")
    out.write_text(harness.table_markdown(table))
    csv_out = out.with_suffix(".csv")
    csv_out.write_text(harness.table_csv(table))
    print(f"wrote {len(table)} configurations -> {out}, {csv_out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avcap",
                                     description="audiovisual captioning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, run=False, runs=False, lam=False, seed=False):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="experiment config JSON")
        p.add_argument("--out", default=None)
        if seed:
            p.add_argument("--seed", type=int, default=None)
        if run:
            p.add_argument("--run", required=True, help="run directory")
        if runs:
            p.add_argument("--runs", nargs="+", required=True, help="run directories")
        if lam:
            p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.set_defaults(fn=fn)
        return p

    add("gen-data", _cmd_gen_data, seed=True)
    add("train", _cmd_train, seed=True)
    add("sweep", _cmd_sweep, run=True)
    add("eval", _cmd_eval, run=True, lam=True)
    add("vision-only", _cmd_vision_only, run=True)
    add("curve", _cmd_curve, runs=True)
    add("table", _cmd_table, runs=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except BrokenPipeError:
        raise
    except Exception as exc:  # single-line, machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
