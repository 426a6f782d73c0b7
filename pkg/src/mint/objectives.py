"""Stage-1 objectives: contrastive (ALC), matching (ALM) and audio-grounded generation (ATG)."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .backbones import stack_audio
from .bridge_net import BridgeNet
from .data import Stage1Batch
from .masking import CAUSAL_MULTIMODAL, UNIMODAL, batch_masks
from .tokenizer import collate

LOSS_NAMES = ("alc", "alm", "atg")


def alc_similarity(query_proj: torch.Tensor, text_proj: torch.Tensor) -> torch.Tensor:
    """Highest dot product between any query output and the text vector.

    ``query_proj`` is (..., Q, d), ``text_proj`` is (..., d); both rows L2-normalised.
    """
    return (query_proj @ text_proj.unsqueeze(-1)).squeeze(-1).max(dim=-1).values


def similarity_matrix(query_proj: torch.Tensor, text_proj: torch.Tensor) -> torch.Tensor:
    """S[i, j] = similarity of audio i (B, Q, d) with text j (B', d)."""
    return torch.einsum("iqd,jd->ijq", query_proj, text_proj).max(dim=-1).values


def contrastive_loss(sim: torch.Tensor, temperature, symmetric: bool = True) -> torch.Tensor:
    if sim.shape[0] == 0:
        raise ValueError("empty batch")
    logits = sim / temperature
    target = torch.arange(sim.shape[0])
    a2t = F.cross_entropy(logits, target)
    if not symmetric:
        return a2t
    return 0.5 * (a2t + F.cross_entropy(logits.T, target))


def _stage1_tensors(batch: Stage1Batch):
    audio, audio_valid = stack_audio(batch.audio)
    return audio, audio_valid


def alc_forward(model: BridgeNet, batch: Stage1Batch) -> torch.Tensor:
    """Joint forward under the unimodal mask; returns the B x B similarity matrix."""
    audio, audio_valid = _stage1_tensors(batch)
    ids, valid = collate(batch.captions_cls)
    mask = batch_masks(UNIMODAL, model.num_queries, valid)
    out = model(audio, audio_valid, ids, mask)
    q = model.project_for_contrast(out.query_out)
    t = model.project_for_contrast(out.text_out[:, 0])
    return similarity_matrix(q, t)


def alc_loss(model: BridgeNet, batch: Stage1Batch, symmetric: bool = True):
    """Returns ``(loss, similarity_matrix)``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    sim = alc_forward(model, batch)
    return contrastive_loss(sim, model.temperature(), symmetric), sim


@dataclass(frozen=True)
class Pairing:
    text_for_audio: tuple[int, ...]  # hardest negative caption for each audio
    audio_for_text: tuple[int, ...]  # hardest negative audio for each caption


def select_hard_negatives(sim) -> Pairing:
    """Per row and per column, the highest off-diagonal entry; ties go to the lowest index."""
    s = torch.as_tensor(sim).detach().clone().double()
    b = s.shape[0]
    if b < 2:
        raise ValueError("hard negatives require at least 2 pairs")
    s.fill_diagonal_(float("-inf"))
    # argmax returns the first maximal index
    return Pairing(tuple(int(i) for i in s.argmax(dim=1)), tuple(int(i) for i in s.argmax(dim=0)))


def matching_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Two-class cross-entropy; label 1 = matched, 0 = mismatched."""
    return F.cross_entropy(logits, labels)


def alm_loss(model: BridgeNet, batch: Stage1Batch, negatives: Pairing, both_sides: bool = False) -> torch.Tensor:
    """Positives plus one mined negative per positive (audio i, caption text_for_audio[i]).

    With ``both_sides`` the caption-anchored negatives are added as well (3B examples).
    """
    b = len(batch)
    if b < 2:
        raise ValueError("ALM requires negatives")
    audio_idx = list(range(b)) + list(range(b))
    text_idx = list(range(b)) + list(negatives.text_for_audio)
    labels = [1] * b + [0] * b
    if both_sides:
        audio_idx += list(negatives.audio_for_text)
        text_idx += list(range(b))
        labels += [0] * b
    audio, audio_valid = stack_audio([batch.audio[i] for i in audio_idx])
    ids, valid = collate([batch.captions_cls[i] for i in text_idx])
    logits = model.match_logits(audio, audio_valid, ids, valid)
    return matching_loss(logits, torch.tensor(labels))


def atg_logits(model: BridgeNet, batch: Stage1Batch):
    audio, audio_valid = _stage1_tensors(batch)
    ids, valid = collate(batch.captions_dec)
    mask = batch_masks(CAUSAL_MULTIMODAL, model.num_queries, valid)
    out = model(audio, audio_valid, ids, mask, mode="generate")
    return out.text_logits, ids, valid


def next_token_loss(logits: torch.Tensor, ids: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of predicting token t+1 from position t, over valid targets."""
    tgt_valid = valid[:, 1:]
    if not bool(tgt_valid.any()):
        raise ValueError("caption has no tokens to predict")
    tgt = ids[:, 1:].masked_fill(~tgt_valid, -100)
    return F.cross_entropy(logits[:, :-1].reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=-100)


def atg_loss(model: BridgeNet, batch: Stage1Batch) -> torch.Tensor:
    logits, ids, valid = atg_logits(model, batch)
    return next_token_loss(logits, ids, valid)


@dataclass
class Stage1LossReport:
    alc: float
    alm: float
    atg: float
    total: torch.Tensor
    enabled: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {"alc": self.alc, "alm": self.alm, "atg": self.atg, "total": self.total.item()}


def normalize_enabled(enabled) -> dict[str, bool]:
    if isinstance(enabled, dict):
        flags = {k: bool(enabled.get(k, False)) for k in LOSS_NAMES}
        unknown = set(enabled) - set(LOSS_NAMES)
    else:
        names = [e.lower() for e in enabled]
        flags = {k: k in names for k in LOSS_NAMES}
        unknown = set(names) - set(LOSS_NAMES)
    if unknown:
        raise ValueError(f"unknown loss component(s): {sorted(unknown)}")
    return flags


def stage1_step(model: BridgeNet, batch: Stage1Batch, enabled=LOSS_NAMES, symmetric: bool = True,
                both_sides: bool = False) -> Stage1LossReport:
    """One forward per enabled objective; disabled ones report 0 and add nothing."""
    flags = normalize_enabled(enabled)
    if not any(flags.values()):
        raise ValueError("at least one loss component must be enabled")
    parts = {}
    sim = None
    if flags["alc"]:
        parts["alc"], sim = alc_loss(model, batch, symmetric)
    if flags["alm"]:
        if sim is None:
            with torch.no_grad():
                sim = alc_forward(model, batch)
        parts["alm"] = alm_loss(model, batch, select_hard_negatives(sim), both_sides)
    if flags["atg"]:
        parts["atg"] = atg_loss(model, batch)
    total = sum(parts.values())
    return Stage1LossReport(*(parts[k].item() if k in parts else 0.0 for k in LOSS_NAMES), total, flags)
