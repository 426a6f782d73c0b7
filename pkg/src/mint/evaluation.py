"""Vocabulary-ranking classification, text-to-audio retrieval (R@k) and ROUGE-L."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .backbones import AudioFeatureMap, lm_score, stack_audio
from .bridge_net import BridgeNet
from .data import CLASSIFICATION, Template, TemplateRecord
from .generative import InstructionTunedModel
from .objectives import similarity_matrix
from .tokenizer import CLS, DEC, Vocabulary, collate, encode, split_words


def _pick_label(candidates: Sequence[str], scores: Sequence[float]) -> str:
    """Highest score; ties resolved to the lexicographically smallest label."""
    best = None
    for label, score in sorted(zip(candidates, scores), key=lambda kv: kv[0]):
        if best is None or score > best[1]:
            best = (label, score)
    return best[0]


class GenerativeScorer:
    """Scores candidate labels by their log-likelihood under the frozen LM."""

    def __init__(self, model: InstructionTunedModel, vocab: Vocabulary, max_len: int = 30):
        self.model, self.vocab, self.max_len = model, vocab, max_len

    @torch.no_grad()
    def score_candidates(self, audio: AudioFeatureMap, instruction: str, candidates: Sequence[str]) -> list[float]:
        instr = encode(self.vocab, instruction, None, False, self.max_len)
        prompt = encode(self.vocab, instruction, DEC, False, self.max_len)
        soft = self.model.soft_prompts([audio], [instr])
        n = len(candidates)
        cands = [encode(self.vocab, c, None, True, self.max_len) for c in candidates]
        scores = lm_score(self.model.lm, soft.expand(n, -1, -1), [prompt] * n, cands)
        return [float(s) for s in scores]


class EmbeddingScorer:
    """Stage-1-only scoring: contrastive similarity between audio queries and "{prompt} {label}"."""

    def __init__(self, bridge: BridgeNet, vocab: Vocabulary, max_len: int = 30):
        self.bridge, self.vocab, self.max_len = bridge, vocab, max_len

    @torch.no_grad()
    def score_candidates(self, audio: AudioFeatureMap, instruction: str, candidates: Sequence[str]) -> list[float]:
        texts = [f"{instruction} {c}".strip() for c in candidates]
        return [float(s) for s in self.similarity([audio], texts)[:, 0]]

    @torch.no_grad()
    def similarity(self, audio: Sequence[AudioFeatureMap], texts: Sequence[str]) -> np.ndarray:
        """(n_texts, n_audio) contrastive similarities."""
        q = self.encode_audio(audio)
        t = self.encode_texts(texts)
        return similarity_matrix(q, t).T.numpy()

    @torch.no_grad()
    def encode_audio(self, audio: Sequence[AudioFeatureMap], chunk: int = 64) -> torch.Tensor:
        outs = []
        for i in range(0, len(audio), chunk):
            a, av = stack_audio(audio[i: i + chunk])
            outs.append(self.bridge.project_for_contrast(self.bridge.encode_queries(a, av)))
        return torch.cat(outs)

    @torch.no_grad()
    def encode_texts(self, texts: Sequence[str]) -> torch.Tensor:
        ids, valid = collate([encode(self.vocab, t, CLS, False, self.max_len) for t in texts])
        return self.bridge.project_for_contrast(self.bridge.encode_text_cls(ids, valid))

    @torch.no_grad()
    def match_scores(self, pairs: Sequence[tuple[AudioFeatureMap, str]]) -> np.ndarray:
        """Matched-minus-mismatched logit of the averaged matching head, per pair."""
        a, av = stack_audio([p[0] for p in pairs])
        ids, valid = collate([encode(self.vocab, p[1], CLS, False, self.max_len) for p in pairs])
        logits = self.bridge.match_logits(a, av, ids, valid)
        return (logits[:, 1] - logits[:, 0]).numpy()


def vocab_rank_classify(scorer, audio: AudioFeatureMap, instruction: str, candidates: Sequence[str]) -> str:
    if not candidates:
        raise ValueError("empty candidate list")
    if len(set(candidates)) != len(candidates):
        raise ValueError("candidates must be distinct")
    return _pick_label(candidates, scorer.score_candidates(audio, instruction, candidates))


# --------------------------------------------------------------------------- retrieval


@dataclass
class RetrievalResult:
    r_at: dict[int, float]
    ranks: list[int]

    def to_dict(self) -> dict:
        return {"r_at": {str(k): v for k, v in self.r_at.items()}, "ranks": self.ranks}


def recall_at_k(ranks: Sequence[int], ks: Sequence[int] = (1, 5, 10)) -> dict[int, float]:
    """Percentage of queries whose target sits at rank <= k (ranks are 1-based)."""
    ranks = np.asarray(ranks)
    return {k: float(100.0 * np.mean(ranks <= k)) for k in ks}


def rank_targets(scores: np.ndarray, targets: Sequence[int]) -> list[int]:
    """1-based rank of each row's target under a stable descending sort."""
    ranks = []
    for row, tgt in zip(np.asarray(scores), targets):
        order = np.argsort(-row, kind="stable")
        ranks.append(int(np.nonzero(order == tgt)[0][0]) + 1)
    return ranks


def retrieval_eval(
    scorer,
    audio_corpus: Sequence[AudioFeatureMap],
    text_queries: Sequence[str],
    relevance: Sequence[int],
    rerank_top: int | None = None,
    ks: Sequence[int] = (1, 5, 10),
) -> RetrievalResult:
    """Text-to-audio retrieval. ``relevance[i]`` is the corpus index relevant to query i.

    Clips are ranked by contrastive similarity; ``rerank_top`` re-orders that many leading
    clips by matching score.
    """
    n = len(audio_corpus)
    for r in relevance:
        if not 0 <= r < n:
            raise ValueError(f"relevant clip {r} missing from corpus")
    sim = np.asarray(scorer.similarity(audio_corpus, text_queries))
    ranks = []
    for qi, row in enumerate(sim):
        order = list(np.argsort(-row, kind="stable"))
        if rerank_top:
            head = order[:rerank_top]
            match = np.asarray(scorer.match_scores([(audio_corpus[j], text_queries[qi]) for j in head]))
            head = [head[j] for j in np.argsort(-match, kind="stable")]
            order = head + order[rerank_top:]
        ranks.append(order.index(relevance[qi]) + 1)
    return RetrievalResult(recall_at_k(ranks, ks), ranks)


# --------------------------------------------------------------------------- ROUGE-L


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> tuple[float, float, float]:
    """Token-level ROUGE-L ``(precision, recall, f1)``; an empty side scores all zeros."""
    c, r = split_words(candidate), split_words(reference)
    if not c or not r:
        return 0.0, 0.0, 0.0
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0, 0.0, 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return p, rec, 2 * p * rec / (p + rec)


# --------------------------------------------------------------------------- classification suite


@dataclass
class ClassificationResult:
    accuracy: float
    per_class: dict[str, tuple[int, int]]
    predictions: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy,
                "per_class": {k: list(v) for k, v in self.per_class.items()},
                "predictions": self.predictions}


def classify_suite(records: Sequence[TemplateRecord], scorer, templates: dict[str, Template],
                   features, labels: Sequence[str] | None = None) -> ClassificationResult:
    """Vocabulary-ranking accuracy over classification records sharing one template."""
    if not records:
        raise ValueError("no records to classify")
    if any(r.task_kind != CLASSIFICATION for r in records):
        raise ValueError("classify suite needs classification records")
    tids = {r.template_id for r in records}
    if len(tids) != 1:
        raise ValueError(f"mixed templates: {sorted(tids)}")
    template = templates[tids.pop()]
    candidates = list(labels or template.label_set or sorted({r.output_text for r in records}))
    per_class: dict[str, list[int]] = {}
    preds = []
    for r in records:
        pred = vocab_rank_classify(scorer, features(r.clip_ref), r.input_prompt, candidates)
        preds.append(pred)
        tally = per_class.setdefault(r.output_text, [0, 0])
        tally[0] += int(pred == r.output_text)
        tally[1] += 1
    correct = sum(v[0] for v in per_class.values())
    total = sum(v[1] for v in per_class.values())
    return ClassificationResult(100.0 * correct / total, {k: tuple(v) for k, v in sorted(per_class.items())}, preds)
