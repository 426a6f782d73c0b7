"""``mint`` command line: data, both training stages, ablations, evaluation and answering."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .data import (CAPTIONING, SYNTH_TEMPLATES, generate_synthetic_corpus, make_record, register_templates,
                   render_clip, write_manifest, write_wav)

log = logging.getLogger("mint")


def _load_config(path: str | None, out_dir: str | None) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig()
    if out_dir:
        cfg = cfg.replace(out_dir=out_dir)
    cfg.validate()
    return cfg


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_make_data(args) -> int:
    templates = register_templates()
    ids = args.templates.split(",") if args.templates else [t.template_id for t in SYNTH_TEMPLATES]
    for tid in ids:
        if tid not in templates:
            raise ValueError(f"unknown template: {tid}")
    out = Path(args.out)
    specs = generate_synthetic_corpus(args.n + args.eval_n, args.seed)
    records = []
    for i, spec in enumerate(specs):
        split = "train" if i < args.n else "eval"
        rel = Path("clips") / f"{split}_{i:04d}.wav"
        write_wav(out / rel, render_clip(spec, args.sample_rate), args.sample_rate)
        for tid in ids:
            t = templates[tid]
            records.append(make_record(str(rel), t, spec.caption if t.task_kind == CAPTIONING else spec.label, split))
    manifest = write_manifest(records, out / "manifest.jsonl")
    print(f"wrote {len(specs)} clips and {len(records)} records to {manifest}")
    return 0


def cmd_train_stage1(args) -> int:
    from .pipeline import train_stage1
    cfg = _load_config(args.config, args.out_dir)
    ckpt = train_stage1(cfg, resume=args.resume, stop_after=args.stop_after, out=args.out)
    print(ckpt)
    return 0


def cmd_train_stage2(args) -> int:
    from .pipeline import train_stage2
    cfg = _load_config(args.config, args.out_dir)
    ckpt = train_stage2(cfg, args.init, out=args.out, shuffle_labels=args.shuffle_labels)
    print(ckpt)
    return 0


def cmd_ablate(args) -> int:
    from .pipeline import markdown_table, run_ablation
    cfg = _load_config(args.config, args.out_dir)
    rows = run_ablation(cfg, args.grid, with_stage2=not args.stage1_only, split=args.split)
    print(markdown_table(rows), end="")
    return 0


def cmd_evaluate(args) -> int:
    from .pipeline import evaluate
    report = evaluate(args.ckpt, args.suite, args.data, out_dir=args.out, split=args.split)
    _print_json(report)
    return 0


def cmd_compare_stages(args) -> int:
    from .pipeline import compare_stages, markdown_table
    res = compare_stages(args.stage1, args.stage2, args.data, split=args.split, out_dir=args.out)
    print(markdown_table(res["rows"]), end="")
    return 0


def cmd_answer(args) -> int:
    from .data import read_wav
    from .generative import answer
    from .pipeline import load_checkpoint
    ck = load_checkpoint(args.ckpt)
    if ck.model is None:
        raise ValueError("answer needs a stage-2 checkpoint")
    samples, sr = read_wav(args.audio)
    feats = ck.encoder.encode(samples, sr, clip_id=str(args.audio))
    print(answer(ck.model, ck.vocab, feats, args.instruction, args.max_new, ck.config.data.max_text_len))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mint", description="Audio-language bridge training and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", help="render a synthetic corpus to WAV files plus a manifest")
    s.add_argument("--n", type=int, default=64, help="training clips")
    s.add_argument("--eval-n", type=int, default=16, help="held-out clips")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sample-rate", type=int, default=16000)
    s.add_argument("--templates", default=None, help="comma-separated template ids")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_make_data)

    for name, fn, helptext in (("train-stage1", cmd_train_stage1, "representation learning (ALC/ALM/ATG)"),
                               ("train-stage2", cmd_train_stage2, "instruction tuning against the frozen LM")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", default=None, help="JSON run config (desk defaults if omitted)")
        s.add_argument("--out-dir", default=None, help="override the config's out_dir")
        s.add_argument("--out", default=None, help="checkpoint directory")
        if name == "train-stage1":
            s.add_argument("--resume", action="store_true")
            s.add_argument("--stop-after", type=int, default=None, help="stop after this many steps")
        else:
            s.add_argument("--init", required=True, help="stage-1 checkpoint directory")
            s.add_argument("--shuffle-labels", action="store_true", help="label-shuffled control run")
        s.set_defaults(fn=fn)

    s = sub.add_parser("ablate", help="one model per loss-flag set")
    s.add_argument("--config", default=None)
    s.add_argument("--out-dir", default=None)
    s.add_argument("--grid", default="paper", help='"paper" or e.g. "alc;alc+atg"')
    s.add_argument("--stage1-only", action="store_true", help="skip stage 2 (embedding-similarity accuracy)")
    s.add_argument("--split", default="eval")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("evaluate", help="run an evaluation suite on a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--suite", required=True, help="classify, retrieve, caption or match")
    s.add_argument("--data", default=None, help="manifest (defaults to the run's records)")
    s.add_argument("--split", default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("compare-stages", help="stage-1 embedding vs stage-1+2 vocabulary-ranking accuracy")
    s.add_argument("--stage1", required=True)
    s.add_argument("--stage2", required=True)
    s.add_argument("--data", default=None)
    s.add_argument("--split", default="eval")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_compare_stages)

    s = sub.add_parser("answer", help="greedy response for one clip and instruction")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--audio", required=True, help="mono PCM WAV file")
    s.add_argument("--instruction", required=True)
    s.add_argument("--max-new", type=int, default=24)
    s.set_defaults(fn=cmd_answer)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"mint: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
