"""Two-stage training, ablations and evaluation reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import plotting
from .backbones import FrozenAudioEncoder, FrozenLM, FrozenLMConfig, pretrain_lm
from .bridge_net import BridgeNet, BridgeNetConfig
from .checkpoint import file_hash, load_archive, save_archive
from .config import RunConfig
from .data import (CAPTIONING, CLASSIFICATION, FeatureStore, TemplateRecord, Template, check_split_hygiene,
                   load_manifest, make_batches, register_templates, synthetic_records, write_manifest)
from .evaluation import (EmbeddingScorer, GenerativeScorer, classify_suite, retrieval_eval, rouge_l)
from .generative import InstructionTunedModel, generate_tokens, stage2_loss
from .objectives import LOSS_NAMES, normalize_enabled, stage1_step
from .tokenizer import DEC, Vocabulary, build_vocabulary, decode, encode

log = logging.getLogger(__name__)

SUITES = ("classify", "retrieve", "caption", "match")
PAPER_GRID = (("alc",), ("alc", "atg"), ("alc", "alm"), ("alc", "alm", "atg"))
STAGE1_METRICS = ("step", "epoch", "alc", "alm", "atg", "total", "lr", "temperature")
STAGE2_METRICS = ("step", "epoch", "loss", "lr")


def _setup_torch(config: RunConfig) -> None:
    if config.single_threaded:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


# --------------------------------------------------------------------------- workspace


@dataclass
class Workspace:
    root: Path
    vocab: Vocabulary
    records: list[TemplateRecord]
    templates: dict[str, Template]
    encoder: FrozenAudioEncoder
    lm: FrozenLM
    features: FeatureStore

    def split(self, name: str) -> list[TemplateRecord]:
        return [r for r in self.records if r.split == name]


def _lm_sequences(vocab: Vocabulary, records: Sequence[TemplateRecord], max_len: int) -> list[list[int]]:
    seqs = []
    for r in records:
        prompt = encode(vocab, r.input_prompt, DEC, False, max_len).tokens
        resp = encode(vocab, r.output_text, None, True, max_len).tokens
        seqs.append(list(prompt) + list(resp))
    return seqs


def _lm_contexts(vocab: Vocabulary, records: Sequence[TemplateRecord], max_len: int) -> list[list[int]]:
    return [list(encode(vocab, r.output_text, None, False, max_len).tokens) for r in records]


def _workspace_fingerprint(config: RunConfig) -> dict:
    d = config.to_dict()
    return {"seed": config.seed, **{k: d[k] for k in ("data", "audio", "lm", "lm_pretrain")}}


def prepare_workspace(config: RunConfig) -> Workspace:
    """Records, vocabulary and frozen backbones for a run; built once, then reused from disk."""
    root = Path(config.out_dir) / "workspace"
    templates = register_templates()
    d = config.data
    fingerprint = _workspace_fingerprint(config)
    fp_path = root / "workspace.json"
    if fp_path.exists():
        if json.loads(fp_path.read_text()) != fingerprint:
            raise ValueError(f"workspace {root} was built with different data/backbone settings")
    else:
        root.mkdir(parents=True, exist_ok=True)
        fp_path.write_text(json.dumps(fingerprint, indent=2, sort_keys=True) + "\n")
    manifest = root / "records.jsonl"
    if manifest.exists():
        records = load_manifest(manifest, templates)
    else:
        if d.manifest is not None:
            records = load_manifest(d.manifest, templates)
        else:
            records = synthetic_records(d.synthetic_n, d.synthetic_eval_n, config.seed, d.templates, templates)
        write_manifest(records, manifest)
    check_split_hygiene(records)

    vocab_path = root / "vocab.txt"
    if vocab_path.exists():
        vocab = Vocabulary.load(vocab_path)
    else:
        corpus = [r.output_text for r in records] + [t.prompt for t in templates.values()]
        vocab = build_vocabulary(corpus, d.vocab_max_size)
        vocab.save(vocab_path)

    enc_path = root / "audio_encoder.zip"
    if enc_path.exists():
        encoder = FrozenAudioEncoder.load(enc_path)
    else:
        encoder = FrozenAudioEncoder(config.audio)
        encoder.save(enc_path)

    lm_path = root / "lm.zip"
    if lm_path.exists():
        lm = FrozenLM.load(lm_path)
    else:
        lm_cfg = FrozenLMConfig(**{**asdict(config.lm), "vocab_size": len(vocab)})
        torch.manual_seed(config.seed + 1)
        lm = FrozenLM(lm_cfg)
        train = [r for r in records if r.split == "train"]
        lp = config.lm_pretrain
        losses = pretrain_lm(lm, _lm_sequences(vocab, train, d.max_text_len), lp.steps, lp.lr, lp.batch_size,
                             config.seed + 2, _lm_contexts(vocab, train, d.max_text_len), lp.prefix_len,
                             lp.context_rate, lp.prefix_noise)
        lm.freeze()
        lm.save(lm_path, {"pretrain_final_loss": losses[-1] if losses else None})
        _write_csv(root / "lm_pretrain.csv", ("step", "loss"), [{"step": i + 1, "loss": l} for i, l in enumerate(losses)])
    if lm.cfg.vocab_size != len(vocab):
        raise ValueError("frozen LM vocabulary does not match workspace vocabulary")
    return Workspace(root, vocab, records, templates, encoder, lm,
                     FeatureStore(encoder, d.sample_rate, d.cache_dir))


def _model_config(config: RunConfig, ws: Workspace) -> BridgeNetConfig:
    cfg = BridgeNetConfig.from_dict(config.model.to_dict())
    cfg.vocab_size = len(ws.vocab)
    cfg.audio_dim = ws.encoder.feat_dim
    return cfg


# --------------------------------------------------------------------------- helpers


def _write_csv(path: Path, fields, rows, append: bool = False) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not (append and path.exists())
    with path.open("w" if new else "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        if new:
            w.writeheader()
        for row in rows:
            w.writerow(row)


def _read_csv(path: Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def lr_lambda(warmup: int, total: int, schedule: str = "linear"):
    """Linear warmup to the base rate, then linear decay to zero at ``total`` steps."""
    def fn(step: int) -> float:
        if warmup > 0 and step < warmup:
            return (step + 1) / warmup
        if schedule == "constant":
            return 1.0
        return max(0.0, (total - step) / max(1, total - warmup))
    return fn


def _optimizer(params, config: RunConfig, lr: float, total: int):
    o = config.optim
    params = list(params)
    if params and isinstance(params[0], dict):
        params = [{"params": g["params"], "lr": lr * g.get("lr_scale", 1.0)} for g in params]
    opt = torch.optim.Adam(params, lr=lr, betas=(o.beta1, o.beta2), eps=o.eps, weight_decay=o.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda(o.warmup_steps, total, o.schedule))
    return opt, sched


def _copy_backbones(ws: Workspace, out: Path) -> None:
    for name in ("vocab.txt", "audio_encoder.zip", "lm.zip", "records.jsonl"):
        shutil.copyfile(ws.root / name, out / name)


def _frozen_hashes(ws: Workspace) -> dict[str, str]:
    return {"audio_encoder_hash": ws.encoder.param_hash(), "lm_hash": ws.lm.param_hash()}


def _check_frozen(ws: Workspace, before: dict[str, str]) -> None:
    after = _frozen_hashes(ws)
    for k, v in before.items():
        if after[k] != v:
            raise RuntimeError(f"frozen backbone changed during training: {k}")


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


# --------------------------------------------------------------------------- stage 1


def train_stage1(config: RunConfig, resume: bool = False, stop_after: int | None = None,
                 out: str | Path | None = None) -> Path:
    """Train Bridge-Net with the enabled stage-1 losses. Returns the checkpoint directory."""
    config.validate()
    _setup_torch(config)
    ws = prepare_workspace(config)
    out = Path(out or Path(config.out_dir) / "stage1")
    out.mkdir(parents=True, exist_ok=True)
    frozen = _frozen_hashes(ws)
    enabled = normalize_enabled(config.enabled_losses)
    if not enabled["alc"]:
        warnings.warn("stage-1 run without the contrastive loss")

    train = ws.split("train")
    n_caps = sum(r.task_kind == CAPTIONING for r in train)
    if n_caps == 0:
        raise ValueError("stage 1 needs captioning records")
    o = config.optim
    per_epoch = _steps_per_epoch(n_caps, o.batch_size)
    total = per_epoch * o.epochs_stage1

    torch.manual_seed(config.seed)
    model = BridgeNet(_model_config(config, ws))
    opt, sched = _optimizer(model.parameters(), config, o.base_lr, total)
    step = 0
    state_path = out / "trainer.pt"
    if resume and state_path.exists():
        state = torch.load(state_path, weights_only=False)
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        sched.load_state_dict(state["scheduler"])
        step = state["step"]
    else:
        _write_csv(out / "metrics.csv", STAGE1_METRICS, [])

    model.train()
    for epoch in range(o.epochs_stage1):
        batches = make_batches(train, o.batch_size, 1, config.seed, epoch, ws.features, ws.vocab,
                               config.data.max_text_len)
        for i, batch in enumerate(batches):
            if epoch * per_epoch + i < step:
                continue
            if stop_after is not None and step >= stop_after:
                break
            report = stage1_step(model, batch, enabled, config.symmetric_contrastive, config.alm_both_sides)
            opt.zero_grad()
            report.total.backward()
            opt.step()
            lr = sched.get_last_lr()[0]
            sched.step()
            step += 1
            row = {"step": step, "epoch": epoch + 1, **report.as_row(), "lr": lr,
                   "temperature": model.temperature().item()}
            _write_csv(out / "metrics.csv", STAGE1_METRICS, [row], append=True)
        if stop_after is not None and step >= stop_after:
            break

    _check_frozen(ws, frozen)
    torch.save({"model": model.state_dict(), "optimizer": opt.state_dict(),
                "scheduler": sched.state_dict(), "step": step}, state_path)
    meta = {"stage": 1, "step": step, "total_steps": total, "enabled_losses": [k for k in LOSS_NAMES if enabled[k]],
            **frozen}
    save_archive(out / "model.zip", config.to_dict(), model.state_dict(), meta)
    _copy_backbones(ws, out)
    log.info("stage 1 finished at step %d -> %s", step, out)
    return out


# --------------------------------------------------------------------------- stage 2


def _load_bridge_tensors(bridge: BridgeNet, tensors: dict[str, torch.Tensor]) -> None:
    own = bridge.state_dict()
    for name, t in own.items():
        if name not in tensors:
            raise ValueError(f"incompatible checkpoint: missing tensor {name}")
        if tuple(tensors[name].shape) != tuple(t.shape):
            raise ValueError(f"incompatible checkpoint: tensor {name} has shape "
                             f"{tuple(tensors[name].shape)}, expected {tuple(t.shape)}")
    bridge.load_state_dict({k: tensors[k] for k in own})


def train_stage2(config: RunConfig, stage1_ckpt, out: str | Path | None = None,
                 shuffle_labels: bool = False) -> Path:
    """Instruction tuning of Bridge-Net + FC projection against the frozen LM.

    ``shuffle_labels`` permutes responses among train records of the same template; it is the
    control run for checking that metrics track audio grounding.
    """
    config.validate()
    _setup_torch(config)
    if stage1_ckpt is None or not (Path(stage1_ckpt) / "model.zip").exists():
        raise FileNotFoundError(f"stage-1 checkpoint not found: {stage1_ckpt}")
    ws = prepare_workspace(config)
    out = Path(out or Path(config.out_dir) / "stage2")
    out.mkdir(parents=True, exist_ok=True)
    frozen = _frozen_hashes(ws)

    _, tensors, meta1 = load_archive(Path(stage1_ckpt) / "model.zip")
    if meta1.get("lm_hash") not in (None, frozen["lm_hash"]):
        raise ValueError("stage-1 checkpoint was trained against a different frozen LM")
    torch.manual_seed(config.seed + 10)
    bridge = BridgeNet(_model_config(config, ws))
    _load_bridge_tensors(bridge, tensors)
    model = InstructionTunedModel(bridge, ws.lm, config.prompt_gain)

    train = ws.split("train")
    if shuffle_labels:
        train = _shuffle_responses(train, config.seed)
    o = config.optim
    bs = o.batch_size_stage2 or o.batch_size
    per_epoch = _steps_per_epoch(len(train), bs)
    total = per_epoch * o.epochs_stage2
    groups = [{"params": list(model.fc_proj.parameters())},
              {"params": list(model.bridge.parameters()), "lr_scale": o.stage2_bridge_lr_scale}]
    opt, sched = _optimizer(groups, config, o.base_lr_stage2 or o.base_lr, total)
    _write_csv(out / "metrics.csv", STAGE2_METRICS, [])
    step = 0
    model.train()
    ws.lm.eval()
    for epoch in range(o.epochs_stage2):
        for batch in make_batches(train, bs, 2, config.seed, epoch, ws.features, ws.vocab,
                                  config.data.max_text_len):
            loss = stage2_loss(model, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            lr = sched.get_last_lr()[0]
            sched.step()
            step += 1
            _write_csv(out / "metrics.csv", STAGE2_METRICS,
                       [{"step": step, "epoch": epoch + 1, "loss": loss.item(), "lr": lr}], append=True)

    _check_frozen(ws, frozen)
    meta = {"stage": 2, "step": step, "total_steps": total, "init_sha256": file_hash(Path(stage1_ckpt) / "model.zip"),
            "shuffle_labels": shuffle_labels, "enabled_losses": meta1.get("enabled_losses"), **frozen}
    save_archive(out / "model.zip", config.to_dict(), model.trainable_state(), meta)
    _copy_backbones(ws, out)
    if shuffle_labels:
        write_manifest(train, out / "shuffled_train.jsonl")
    log.info("stage 2 finished at step %d -> %s", step, out)
    return out


def _shuffle_responses(records: Sequence[TemplateRecord], seed: int) -> list[TemplateRecord]:
    rng = np.random.default_rng([seed, 99])
    out = list(records)
    by_template: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        by_template.setdefault(r.template_id, []).append(i)
    for idx in by_template.values():
        perm = rng.permutation(len(idx))
        for dst, src in zip(idx, perm):
            r = records[idx[src]]
            out[dst] = TemplateRecord(records[dst].clip_ref, r.template_id, r.input_prompt, r.output_text,
                                      r.split, r.task_kind)
    return out


# --------------------------------------------------------------------------- loading


@dataclass
class LoadedCheckpoint:
    path: Path
    config: RunConfig
    meta: dict
    vocab: Vocabulary
    encoder: FrozenAudioEncoder
    lm: FrozenLM
    bridge: BridgeNet
    model: InstructionTunedModel | None
    features: FeatureStore
    templates: dict[str, Template]

    @property
    def stage(self) -> int:
        return int(self.meta.get("stage", 1))

    def scorer(self):
        if self.model is not None:
            return GenerativeScorer(self.model, self.vocab, self.config.data.max_text_len)
        return EmbeddingScorer(self.bridge, self.vocab, self.config.data.max_text_len)


def load_checkpoint(ckpt) -> LoadedCheckpoint:
    path = Path(ckpt)
    if not (path / "model.zip").exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    cfg_dict, tensors, meta = load_archive(path / "model.zip")
    config = RunConfig.from_dict(cfg_dict)
    vocab = Vocabulary.load(path / "vocab.txt")
    encoder = FrozenAudioEncoder.load(path / "audio_encoder.zip")
    lm = FrozenLM.load(path / "lm.zip")
    if meta.get("lm_hash") not in (None, lm.param_hash()):
        raise ValueError("frozen LM does not match the hash recorded in the checkpoint")
    mcfg = BridgeNetConfig.from_dict(config.model.to_dict())
    mcfg.vocab_size = len(vocab)
    mcfg.audio_dim = encoder.feat_dim
    bridge = BridgeNet(mcfg)
    _load_bridge_tensors(bridge, tensors)
    model = None
    if "fc_proj.weight" in tensors:
        model = InstructionTunedModel(bridge, lm)
        model.fc_proj.load_state_dict({"weight": tensors["fc_proj.weight"], "bias": tensors["fc_proj.bias"]})
        model.eval()
    bridge.eval()
    return LoadedCheckpoint(path, config, meta, vocab, encoder, lm, bridge, model,
                            FeatureStore(encoder, config.data.sample_rate, config.data.cache_dir),
                            register_templates())


# --------------------------------------------------------------------------- evaluation


def _captioning(records):
    return [r for r in records if r.task_kind == CAPTIONING]


def eval_classify(ck: LoadedCheckpoint, records: Sequence[TemplateRecord], scorer=None):
    recs = [r for r in records if r.task_kind == CLASSIFICATION]
    if not recs:
        raise ValueError("classify suite needs classification records in the data")
    scorer = scorer or ck.scorer()
    results = {}
    for tid in sorted({r.template_id for r in recs}):
        group = [r for r in recs if r.template_id == tid]
        results[tid] = classify_suite(group, scorer, ck.templates, ck.features)
    metrics = {f"accuracy/{tid}": res.accuracy for tid, res in results.items()}
    rows = []
    for tid, res in results.items():
        group = [r for r in recs if r.template_id == tid]
        rows += [{"template_id": tid, "clip": r.clip_ref, "target": r.output_text, "prediction": p,
                  "correct": int(p == r.output_text)} for r, p in zip(group, res.predictions)]
    return metrics, rows, results


def eval_retrieve(ck: LoadedCheckpoint, records: Sequence[TemplateRecord], rerank_top: int | None = None):
    recs = _captioning(records)
    if not recs:
        raise ValueError("retrieve suite needs captioning records in the data")
    clips = list(dict.fromkeys(r.clip_ref for r in recs))
    index = {c: i for i, c in enumerate(clips)}
    scorer = EmbeddingScorer(ck.bridge, ck.vocab, ck.config.data.max_text_len)
    res = retrieval_eval(scorer, [ck.features(c) for c in clips], [r.output_text for r in recs],
                         [index[r.clip_ref] for r in recs], rerank_top)
    metrics = {f"R@{k}": v for k, v in res.r_at.items()}
    rows = [{"query": r.output_text, "clip": r.clip_ref, "rank": rank} for r, rank in zip(recs, res.ranks)]
    return metrics, rows, res


def eval_caption(ck: LoadedCheckpoint, records: Sequence[TemplateRecord], max_new: int = 24):
    if ck.model is None:
        raise ValueError("caption suite requires a stage-2 checkpoint")
    recs = _captioning(records)
    if not recs:
        raise ValueError("caption suite needs captioning records in the data")
    max_len = ck.config.data.max_text_len
    rows = []
    for r in recs:
        instr = encode(ck.vocab, r.input_prompt, None, False, max_len)
        prompt = encode(ck.vocab, r.input_prompt, DEC, False, max_len)
        hyp = decode(ck.vocab, generate_tokens(ck.model, ck.features(r.clip_ref), instr, prompt, max_new))
        p, rec, f1 = rouge_l(hyp, r.output_text)
        rows.append({"clip": r.clip_ref, "reference": r.output_text, "hypothesis": hyp,
                     "rouge_l_p": p, "rouge_l_r": rec, "rouge_l_f1": f1})
    metrics = {k: float(np.mean([row[f"rouge_l_{s}"] for row in rows]))
               for k, s in (("rouge_l_precision", "p"), ("rouge_l_recall", "r"), ("rouge_l_f1", "f1"))}
    metrics["exact_match"] = 100.0 * float(np.mean([row["hypothesis"] == row["reference"] for row in rows]))
    return metrics, rows, None


def eval_match(ck: LoadedCheckpoint, records: Sequence[TemplateRecord], seed: int = 0):
    """Matched vs mismatched pair classification with the matching head (positive score = matched)."""
    recs = _captioning(records)
    if len(recs) < 2:
        raise ValueError("match suite needs at least two captioning records")
    rng = np.random.default_rng(seed)
    pairs, labels = [], []
    for i, r in enumerate(recs):
        others = [j for j, o in enumerate(recs) if o.output_text != r.output_text]
        if not others:
            continue
        j = others[int(rng.integers(len(others)))]
        a = ck.features(r.clip_ref)
        pairs += [(a, r.output_text), (a, recs[j].output_text)]
        labels += [1, 0]
    scorer = EmbeddingScorer(ck.bridge, ck.vocab, ck.config.data.max_text_len)
    scores = np.asarray(scorer.match_scores(pairs))
    preds = (scores > 0).astype(int)
    acc = 100.0 * float(np.mean(preds == np.asarray(labels)))
    rows = [{"clip": a.clip_id, "text": t, "label": l, "score": float(s), "prediction": int(p)}
            for (a, t), l, s, p in zip(pairs, labels, scores, preds)]
    return {"match_accuracy": acc}, rows, None


_SUITE_FNS = {"classify": eval_classify, "retrieve": eval_retrieve, "caption": eval_caption, "match": eval_match}


def evaluate(ckpt, suite: str, data=None, out_dir=None, split: str | None = None) -> dict:
    """Run one evaluation suite; writes ``report.json``, ``examples.csv`` and figures.

    ``data`` is a manifest path or a list of records; by default the checkpoint's workspace
    records are used. ``split`` filters records by split.
    """
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; valid suites: {', '.join(SUITES)}")
    ck = load_checkpoint(ckpt)
    if data is None:
        records = load_manifest(ck.path / "records.jsonl", ck.templates)
    elif isinstance(data, (str, Path)):
        records = load_manifest(data, ck.templates)
    else:
        records = list(data)
    if split is not None:
        records = [r for r in records if r.split == split]
    _setup_torch(ck.config)
    metrics, rows, result = _SUITE_FNS[suite](ck, records)
    report = {"suite": suite, "checkpoint": str(ck.path), "stage": ck.stage, "n_records": len(records),
              "metrics": metrics}
    out = Path(out_dir or ck.path / "reports" / suite)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if rows:
        _write_csv(out / "examples.csv", list(rows[0]), rows)
    figures = _suite_figures(ck, suite, result, metrics, out)
    report["figures"] = [str(f) for f in figures]
    return report


def _suite_figures(ck: LoadedCheckpoint, suite: str, result, metrics: dict, out: Path) -> list[Path]:
    figs = []
    metrics_csv = ck.path / "metrics.csv"
    if metrics_csv.exists():
        figs.append(plotting.plot_loss_curves(_read_csv(metrics_csv), out / "loss_curves.png"))
    if suite == "retrieve" and result is not None:
        figs.append(plotting.plot_recall_bars(result.r_at, out / "recall_at_k.png"))
    if suite == "classify" and result:
        for tid, res in result.items():
            figs.append(plotting.plot_class_accuracy(res.per_class, out / f"per_class_{tid}.png", title=tid))
    if suite == "caption":
        figs.append(plotting.plot_metric_bars(metrics, out / "caption_metrics.png", title="ROUGE-L"))
    return figs


def compare_stages(stage1_ckpt, stage2_ckpt, data=None, split: str | None = "eval", out_dir=None) -> dict:
    """Classification with the stage-1 model (embedding similarity) vs stage 1+2 (vocabulary ranking)."""
    rows = []
    for name, ckpt in (("Stage1", stage1_ckpt), ("Stage1+2", stage2_ckpt)):
        rep = evaluate(ckpt, "classify", data, split=split,
                       out_dir=None if out_dir is None else Path(out_dir) / name.replace("+", "_"))
        rows.append({"method": name, **rep["metrics"]})
    if out_dir is not None:
        out = Path(out_dir)
        _write_csv(out / "stages.csv", list(rows[0]), rows)
        (out / "stages.md").write_text(markdown_table(rows))
    return {"rows": rows}


# --------------------------------------------------------------------------- ablation


def parse_grid(grid) -> list[tuple[str, ...]]:
    if grid == "paper":
        return [tuple(g) for g in PAPER_GRID]
    if isinstance(grid, str):
        # "alc;alc+atg" style
        grid = [part.split("+") for part in grid.split(";") if part.strip()]
    rows = []
    for flags in grid:
        flags = tuple(f.strip().lower() for f in flags)
        normalize_enabled(flags)
        rows.append(flags)
    if not rows:
        raise ValueError("empty ablation grid")
    return rows


def row_label(flags: Sequence[str]) -> str:
    return "+".join(f.upper() for f in flags)


def markdown_table(rows: Sequence[dict]) -> str:
    cols = list(rows[0])
    fmt = lambda v: f"{v:.2f}" if isinstance(v, float) else str(v)
    lines = ["| " + " | ".join(cols) + " |", "|" + "|".join("---" for _ in cols) + "|"]
    lines += ["| " + " | ".join(fmt(r[c]) for c in cols) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def run_ablation(config: RunConfig, grid="paper", with_stage2: bool = True, split: str = "eval") -> list[dict]:
    """One stage-1 (+ stage-2) model per loss-flag set, identical seed and data order.

    Writes ``ablation.csv``, ``ablation.md`` and a bar chart under ``<out_dir>/ablation``.
    """
    rows_flags = parse_grid(grid)
    root = Path(config.out_dir)
    out = root / "ablation"
    rows = []
    for flags in rows_flags:
        if "alc" not in flags:
            warnings.warn(f"ablation row {row_label(flags)} has no contrastive loss")
        cfg = config.replace(enabled_losses=list(flags))
        tag = "_".join(flags)
        ck1 = train_stage1(cfg, out=out / tag / "stage1")
        row = {"method": row_label(flags)}
        rep1 = evaluate(ck1, "classify", split=split, out_dir=out / tag / "eval_stage1")
        row["stage1_accuracy"] = float(np.mean(list(rep1["metrics"].values())))
        if with_stage2:
            ck2 = train_stage2(cfg, ck1, out=out / tag / "stage2")
            rep2 = evaluate(ck2, "classify", split=split, out_dir=out / tag / "eval_stage2")
            row["accuracy"] = float(np.mean(list(rep2["metrics"].values())))
        else:
            row["accuracy"] = row["stage1_accuracy"]
        rows.append(row)
    _write_csv(out / "ablation.csv", list(rows[0]), rows)
    (out / "ablation.md").write_text(markdown_table(rows))
    plotting.plot_ablation(rows, out / "ablation.png")
    return rows
