"""Bridge-Net: learnable queries plus a dual transformer whose self-attention is shared
between the query (audio) stream and the text stream.

Queries cross-attend frozen audio features on every ``cross_attention_period``-th block;
text never touches audio directly. Each block has separate feed-forward layers for the
query and text streams, so self-attention is the only shared component.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import FeedForward, MultiHeadAttention, init_weights
from .masking import batch_text_only_masks, batch_masks, UNIMODAL, BIDIRECTIONAL
from .tokenizer import CLS


@dataclass
class BridgeNetConfig:
    num_queries: int = 32
    hidden_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    cross_attention_period: int = 2
    ffn_dim: int = 128
    contrastive_proj_dim: int = 32
    vocab_size: int = 0
    max_text_len: int = 30
    audio_dim: int = 32
    init_temperature: float = 0.07

    def validate(self) -> None:
        for name in ("num_queries", "hidden_dim", "num_blocks", "num_heads", "ffn_dim",
                     "contrastive_proj_dim", "vocab_size", "max_text_len", "audio_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if not 1 <= self.cross_attention_period <= self.num_blocks:
            raise ValueError("cross_attention_period must lie in [1, num_blocks]")
        if self.init_temperature <= 0:
            raise ValueError("init_temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BridgeNetConfig":
        return cls(**d)


@dataclass
class BridgeOutputs:
    query_out: torch.Tensor  # (B, Q, H); Q == 0 for text-only streams
    text_out: torch.Tensor  # (B, T, H)
    text_logits: torch.Tensor | None = None  # (B, T, V), generate mode only
    attn_records: list = field(default_factory=list)


class BridgeBlock(nn.Module):
    def __init__(self, cfg: BridgeNetConfig, has_cross: bool):
        super().__init__()
        h = cfg.hidden_dim
        self.ln_self = nn.LayerNorm(h)
        self.selfattn = MultiHeadAttention(h, cfg.num_heads)
        if has_cross:
            self.ln_cross = nn.LayerNorm(h)
            self.crossattn = MultiHeadAttention(h, cfg.num_heads, kv_dim=cfg.audio_dim)
        else:
            self.ln_cross = None
            self.crossattn = None
        self.ln_ffn_query = nn.LayerNorm(h)
        self.ffn_query = FeedForward(h, cfg.ffn_dim)
        self.ln_ffn_text = nn.LayerNorm(h)
        self.ffn_text = FeedForward(h, cfg.ffn_dim)

    def forward(self, x, q_len, allow, audio, audio_allow, probe=False):
        normed = self.ln_self(x)
        h, probs = self.selfattn(normed, normed, allow, return_probs=probe)
        x = x + h
        record = {"self": probs}
        q, t = x[:, :q_len], x[:, q_len:]
        if self.crossattn is not None and audio is not None and q_len > 0:
            c, cprobs = self.crossattn(self.ln_cross(q), audio, audio_allow, return_probs=probe)
            q = q + c
            record["cross"] = cprobs
        if q_len > 0:
            q = q + self.ffn_query(self.ln_ffn_query(q))
        if t.shape[1] > 0:
            t = t + self.ffn_text(self.ln_ffn_text(t))
        return torch.cat([q, t], dim=1), record


class BridgeNet(nn.Module):
    def __init__(self, cfg: BridgeNetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        h = cfg.hidden_dim
        self.queries = nn.Parameter(torch.empty(cfg.num_queries, h))
        self.token_emb = nn.Embedding(cfg.vocab_size, h)
        self.pos_emb = nn.Embedding(cfg.max_text_len, h)
        self.embed_ln = nn.LayerNorm(h)
        self.audio_ln = nn.LayerNorm(cfg.audio_dim)
        self.block = nn.ModuleList(
            BridgeBlock(cfg, has_cross=(i % cfg.cross_attention_period == 0))
            for i in range(cfg.num_blocks)
        )
        self.ln_final = nn.LayerNorm(h)
        # generation head; output weights tied to token_emb
        self.lm_transform = nn.Linear(h, h)
        self.lm_ln = nn.LayerNorm(h)
        self.lm_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        self.proj_contrast = nn.Linear(h, cfg.contrastive_proj_dim, bias=False)
        self.itm_head = nn.Linear(h, 2)
        self.temp = nn.Parameter(torch.tensor(cfg.init_temperature))
        init_weights(self)
        nn.init.normal_(self.queries, std=1.0)

    @property
    def num_queries(self) -> int:
        return self.cfg.num_queries

    def embed_text(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.shape[1] > self.cfg.max_text_len:
            raise ValueError(f"text longer than max_text_len={self.cfg.max_text_len}")
        pos = torch.arange(ids.shape[1], device=ids.device)
        return self.embed_ln(self.token_emb(ids) + self.pos_emb(pos)[None])

    def forward(
        self,
        audio: torch.Tensor | None = None,
        audio_valid: torch.Tensor | None = None,
        text_ids: torch.Tensor | None = None,
        mask: torch.Tensor | None = None,
        mode: str = "encode",
        queries: torch.Tensor | None = None,
        with_queries: bool = True,
        probe: bool = False,
    ) -> BridgeOutputs:
        if mode not in ("encode", "generate"):
            raise ValueError(f"unknown mode {mode!r}")
        if text_ids is not None and text_ids.shape[1] == 0:
            text_ids = None
        if audio is not None:
            batch = audio.shape[0]
        elif text_ids is not None:
            batch = text_ids.shape[0]
        else:
            batch = 1
        parts = []
        q_len = 0
        if with_queries:
            qe = self.queries if queries is None else queries
            q_len = qe.shape[0]
            parts.append(qe.unsqueeze(0).expand(batch, -1, -1))
        if text_ids is not None:
            parts.append(self.embed_text(text_ids))
        if not parts:
            raise ValueError("empty stream: no queries and no text")
        x = torch.cat(parts, dim=1)
        n = x.shape[1]
        if mask is None or tuple(mask.shape[-2:]) != (n, n):
            raise ValueError("mask/stream mismatch")

        audio_allow = None
        if audio is not None:
            audio = self.audio_ln(audio.to(self.queries.dtype))
            if audio_valid is not None:
                audio_allow = audio_valid[:, None, :].expand(-1, q_len, -1)
        records = []
        for blk in self.block:
            x, rec = blk(x, q_len, mask, audio, audio_allow, probe=probe)
            if probe:
                records.append(rec)
        x = self.ln_final(x)
        query_out, text_out = x[:, :q_len], x[:, q_len:]
        logits = None
        if mode == "generate" and text_out.shape[1] > 0:
            hid = self.lm_ln(F.gelu(self.lm_transform(text_out)))
            logits = hid @ self.token_emb.weight.T + self.lm_bias
        return BridgeOutputs(query_out, text_out, logits, records)

    # convenience entry points -------------------------------------------------

    def encode_queries(self, audio, audio_valid=None) -> torch.Tensor:
        """Query outputs for audio alone (no text in the stream)."""
        mask = batch_masks(UNIMODAL, self.num_queries, None)
        return self.forward(audio, audio_valid, None, mask).query_out

    def encode_text_cls(self, text_ids: torch.Tensor, text_valid: torch.Tensor) -> torch.Tensor:
        """[CLS] output of the text transformer run without queries or audio."""
        if text_ids.shape[1] == 0 or not bool((text_ids[:, 0] == CLS).all()):
            raise ValueError("CLS required")
        mask = batch_text_only_masks(text_valid)
        out = self.forward(None, None, text_ids, mask, with_queries=False)
        return out.text_out[:, 0]

    def project_for_contrast(self, x: torch.Tensor, return_degenerate: bool = False):
        """Bias-free projection followed by L2 normalisation; zero rows stay zero."""
        if x.shape[-1] != self.cfg.hidden_dim:
            raise ValueError("last dimension must equal hidden_dim")
        y = self.proj_contrast(x)
        norm = y.norm(dim=-1, keepdim=True)
        degenerate = norm.squeeze(-1) == 0
        out = y / norm.clamp_min(1e-12)
        return (out, degenerate) if return_degenerate else out

    def match_logits(self, audio, audio_valid, text_ids, text_valid) -> torch.Tensor:
        """Two-class matching logits averaged over query outputs (bidirectional mask)."""
        mask = batch_masks(BIDIRECTIONAL, self.num_queries, text_valid)
        out = self.forward(audio, audio_valid, text_ids, mask)
        return self.itm_head(out.query_out).mean(dim=1)

    def temperature(self) -> torch.Tensor:
        return self.temp.clamp(0.001, 0.5)
