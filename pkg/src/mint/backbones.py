"""Frozen backbones: a seeded filterbank audio encoder and a small decoder-only LM.

Neither model is ever updated by the bridging stages. The LM is pretrained once on
the text side of the corpus and then frozen.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_archive, save_archive, tensor_hash
from .layers import FeedForward, MultiHeadAttention, init_weights
from .tokenizer import EOS, PAD, TokenSequence

TARGET_SR = 16000


@dataclass(frozen=True)
class AudioFeatureMap:
    frames: np.ndarray  # (n_frames, feat_dim) float32
    clip_id: str
    duration_s: float

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("feature map needs at least one frame")
        if not np.isfinite(self.frames).all():
            raise ValueError("non-finite features")


@dataclass
class AudioEncoderConfig:
    feat_dim: int = 32
    n_bands: int = 40
    frame_len: int = 1024
    hop: int = 512
    min_hz: float = 60.0
    max_hz: float = 7600.0
    seed: int = 1234
    min_duration_s: float = 0.1
    max_duration_s: float = 30.0


def resample_linear(wave: np.ndarray, sr: int, target: int = TARGET_SR) -> np.ndarray:
    if sr == target:
        return wave
    n_out = max(1, int(round(len(wave) * target / sr)))
    t_out = np.arange(n_out) * (sr / target)
    return np.interp(t_out, np.arange(len(wave)), wave)


def _band_matrix(cfg: AudioEncoderConfig) -> np.ndarray:
    """Triangular bands with log-spaced centres, shape (n_fft_bins, n_bands)."""
    n_bins = cfg.frame_len // 2 + 1
    freqs = np.linspace(0, TARGET_SR / 2, n_bins)
    edges = np.geomspace(cfg.min_hz, cfg.max_hz, cfg.n_bands + 2)
    fb = np.zeros((n_bins, cfg.n_bands))
    for b in range(cfg.n_bands):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[:, b] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


class FrozenAudioEncoder:
    """Log band energies per frame followed by a fixed random linear map."""

    def __init__(self, cfg: AudioEncoderConfig | None = None):
        self.cfg = cfg or AudioEncoderConfig()
        rng = np.random.default_rng(self.cfg.seed)
        self.filterbank = _band_matrix(self.cfg)
        self.projection = rng.standard_normal((self.cfg.n_bands, self.cfg.feat_dim)) / np.sqrt(self.cfg.n_bands)
        self.window = np.hanning(self.cfg.frame_len)

    @property
    def feat_dim(self) -> int:
        return self.cfg.feat_dim

    def state(self) -> dict[str, np.ndarray]:
        return {"filterbank": self.filterbank, "projection": self.projection, "window": self.window}

    def param_hash(self) -> str:
        return tensor_hash(self.state())

    def save(self, path):
        return save_archive(path, asdict(self.cfg), self.state(), {"kind": "audio_encoder"})

    @classmethod
    def load(cls, path) -> "FrozenAudioEncoder":
        config, tensors, _ = load_archive(path)
        enc = cls(AudioEncoderConfig(**config))
        enc.filterbank = tensors["filterbank"].numpy()
        enc.projection = tensors["projection"].numpy()
        enc.window = tensors["window"].numpy()
        return enc

    def encode(self, waveform, sample_rate: int, clip_id: str = "") -> AudioFeatureMap:
        wave = np.asarray(waveform, dtype=np.float64).reshape(-1)
        if wave.size == 0:
            raise ValueError("empty audio")
        if not np.isfinite(wave).all():
            raise ValueError("invalid samples")
        duration = wave.size / sample_rate
        if not self.cfg.min_duration_s <= duration <= self.cfg.max_duration_s:
            raise ValueError(f"audio duration {duration:.3f}s outside "
                             f"[{self.cfg.min_duration_s}, {self.cfg.max_duration_s}]")
        wave = resample_linear(wave, sample_rate)
        n, hop = self.cfg.frame_len, self.cfg.hop
        n_frames = 1 + max(0, int(np.ceil((wave.size - n) / hop)))
        padded = np.zeros((n_frames - 1) * hop + n)
        padded[: wave.size] = wave
        idx = np.arange(n)[None, :] + hop * np.arange(n_frames)[:, None]
        spec = np.abs(np.fft.rfft(padded[idx] * self.window, axis=1)) ** 2
        log_bands = np.log(spec @ self.filterbank + 1e-6)
        feats = ((log_bands + 4.0) / 4.0) @ self.projection
        return AudioFeatureMap(feats.astype(np.float32), clip_id, float(duration))


def stack_audio(maps: Sequence[AudioFeatureMap]) -> tuple[torch.Tensor, torch.Tensor | None]:
    """(B, F, D) features and a (B, F) validity mask (None when all clips have equal length)."""
    lengths = [m.frames.shape[0] for m in maps]
    width = max(lengths)
    out = np.zeros((len(maps), width, maps[0].frames.shape[1]), dtype=np.float32)
    for i, m in enumerate(maps):
        out[i, : lengths[i]] = m.frames
    if len(set(lengths)) == 1:
        return torch.from_numpy(out), None
    valid = torch.arange(width)[None, :] < torch.tensor(lengths)[:, None]
    return torch.from_numpy(out), valid


# --------------------------------------------------------------------------- LM


@dataclass
class FrozenLMConfig:
    vocab_size: int = 0
    lm_dim: int = 64
    lm_blocks: int = 2
    lm_heads: int = 4
    ffn_dim: int = 256
    max_len: int = 64

    def validate(self) -> None:
        if min(self.vocab_size, self.lm_dim, self.lm_blocks, self.lm_heads, self.ffn_dim, self.max_len) < 1:
            raise ValueError("LM config values must be positive")
        if self.lm_dim % self.lm_heads:
            raise ValueError("lm_dim must be divisible by lm_heads")


class _LMBlock(nn.Module):
    def __init__(self, cfg: FrozenLMConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.lm_dim)
        self.attn = MultiHeadAttention(cfg.lm_dim, cfg.lm_heads)
        self.ln2 = nn.LayerNorm(cfg.lm_dim)
        self.ffn = FeedForward(cfg.lm_dim, cfg.ffn_dim)

    def forward(self, x, allow):
        h = self.ln1(x)
        x = x + self.attn(h, h, allow)[0]
        return x + self.ffn(self.ln2(x))


class FrozenLM(nn.Module):
    """Decoder-only LM. Soft prompts are prepended without positions; text positions start at 0."""

    def __init__(self, cfg: FrozenLMConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.lm_dim)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.lm_dim)
        self.blocks = nn.ModuleList(_LMBlock(cfg) for _ in range(cfg.lm_blocks))
        self.ln_f = nn.LayerNorm(cfg.lm_dim)
        init_weights(self)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.shape[1] > self.cfg.max_len:
            raise ValueError(f"sequence longer than LM max_len={self.cfg.max_len}")
        pos = torch.arange(ids.shape[1], device=ids.device)
        return self.tok_emb(ids) + self.pos_emb(pos)[None]

    def forward(self, prefix_embeds: torch.Tensor | None, ids: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """Logits (B, T, V) at text positions, causal over [prefix | text]."""
        b, t = ids.shape
        if prefix_embeds is None:
            prefix_embeds = self.tok_emb.weight.new_zeros((b, 0, self.cfg.lm_dim))
        if prefix_embeds.dim() == 2:
            prefix_embeds = prefix_embeds.unsqueeze(0).expand(b, -1, -1)
        if prefix_embeds.shape[-1] != self.cfg.lm_dim:
            raise ValueError("prefix dim")
        p = prefix_embeds.shape[1]
        x = torch.cat([prefix_embeds.to(self.tok_emb.weight.dtype), self.embed(ids)], dim=1)
        n = p + t
        allow = torch.tril(torch.ones(n, n, dtype=torch.bool)).unsqueeze(0).expand(b, -1, -1).clone()
        col_valid = torch.cat([torch.ones(b, p, dtype=torch.bool), valid], dim=1)
        allow &= col_valid[:, None, :]
        for blk in self.blocks:
            x = blk(x, allow)
        h = self.ln_f(x[:, p:])
        return h @ self.tok_emb.weight.T

    def freeze(self) -> "FrozenLM":
        self.requires_grad_(False)
        self.eval()
        return self

    def param_hash(self) -> str:
        return tensor_hash(self.state_dict())

    def save(self, path, meta: dict | None = None):
        return save_archive(path, asdict(self.cfg), self.state_dict(), {"kind": "frozen_lm", **(meta or {})})

    @classmethod
    def load(cls, path) -> "FrozenLM":
        config, tensors, _ = load_archive(path)
        lm = cls(FrozenLMConfig(**config))
        lm.load_state_dict(tensors, assign=True)
        return lm.freeze()


def join_prompt_response(prompts: Sequence[Sequence[int]], responses: Sequence[Sequence[int]]):
    """Concatenate token lists into a padded batch.

    Returns ``(ids, valid, target_mask)`` where ``target_mask[b, t]`` is True when the
    token at position ``t`` belongs to the response; it is predicted from position ``t-1``.
    """
    rows = [list(p) + list(r) for p, r in zip(prompts, responses)]
    width = max(len(r) for r in rows)
    b = len(rows)
    ids = torch.full((b, width), PAD, dtype=torch.long)
    valid = torch.zeros((b, width), dtype=torch.bool)
    target = torch.zeros((b, width), dtype=torch.bool)
    for i, (p, r) in enumerate(zip(prompts, responses)):
        if len(p) == 0:
            raise ValueError("prompt must contain at least one token")
        row = rows[i]
        ids[i, : len(row)] = torch.tensor(row, dtype=torch.long)
        valid[i, : len(row)] = True
        target[i, len(p): len(row)] = True
    return ids, valid, target


def response_log_probs(logits: torch.Tensor, ids: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-position log-probabilities of response tokens, zero elsewhere. Shape (B, T)."""
    logp = F.log_softmax(logits[:, :-1], dim=-1)
    tok = logp.gather(-1, ids[:, 1:, None]).squeeze(-1)
    tok = tok * target[:, 1:].to(tok.dtype)
    return F.pad(tok, (1, 0))


def lm_score(lm: FrozenLM, prefix_embeds, prompts: Sequence[TokenSequence], candidates: Sequence[TokenSequence]) -> torch.Tensor:
    """Summed log-likelihood of each candidate given prefix and prompt. Shape (B,)."""
    for c in candidates:
        if c.n_valid == 0:
            raise ValueError("candidate must be non-empty")
    ids, valid, target = join_prompt_response([p.tokens for p in prompts], [c.tokens for c in candidates])
    logits = lm(prefix_embeds, ids, valid)
    return response_log_probs(logits, ids, target).sum(dim=1)


@torch.no_grad()
def lm_generate_greedy(lm: FrozenLM, prefix_embeds, prompt: TokenSequence, max_new: int) -> TokenSequence:
    """Append the argmax token (lowest id on ties) until EOS or ``max_new`` tokens."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    if prefix_embeds is not None and prefix_embeds.dim() == 2:
        prefix_embeds = prefix_embeds.unsqueeze(0)
    ids = list(prompt.tokens)
    if not ids:
        raise ValueError("prompt must contain at least one token")
    out = []
    for _ in range(max_new):
        if len(ids) >= lm.cfg.max_len:
            break
        x = torch.tensor([ids], dtype=torch.long)
        logits = lm(prefix_embeds, x, torch.ones_like(x, dtype=torch.bool))
        nxt = int(torch.argmax(logits[0, -1]))
        out.append(nxt)
        ids.append(nxt)
        if nxt == EOS:
            break
    return TokenSequence.from_ids(out)


def _soft_context(lm: FrozenLM, ctx: Sequence[int], prefix_len: int, noise: float,
                  gen: torch.Generator) -> torch.Tensor:
    emb = lm.tok_emb(torch.tensor(list(ctx) or [PAD]))
    w = -torch.log(torch.rand((prefix_len, len(emb)), generator=gen).clamp_min(1e-12))  # Dirichlet(1)
    w = w / w.sum(dim=1, keepdim=True)
    out = w @ emb
    if noise > 0:
        out = out + noise * emb.detach().std() * torch.randn(out.shape, generator=gen)
    return out


def pretrain_lm(
    lm: FrozenLM,
    sequences: Sequence[Sequence[int]],
    steps: int = 300,
    lr: float = 3e-3,
    batch_size: int = 16,
    seed: int = 0,
    contexts: Sequence[Sequence[int]] | None = None,
    prefix_len: int = 8,
    context_rate: float = 0.5,
    prefix_noise: float = 0.0,
) -> list[float]:
    """Next-token training on the given id sequences. Returns the loss trace.

    With ``contexts``, a ``context_rate`` share of batches gets a ``prefix_len``-slot prefix built
    from the LM's own embeddings of that sequence's context tokens, so the LM learns to read a
    prefix before it is frozen. Each prefix slot is a random convex mixture of the
    context embeddings plus Gaussian noise of relative scale ``prefix_noise``.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(lm.parameters(), lr=lr)
    lm.train()
    keep = [i for i, s in enumerate(sequences) if len(s) > 1]
    seqs = [list(sequences[i]) for i in keep]
    ctxs = [list(contexts[i]) for i in keep] if contexts is not None else None
    losses = []
    for step in range(steps):
        pick = torch.randint(len(seqs), (batch_size,), generator=gen).tolist()
        use_ctx = ctxs is not None and float(torch.rand((), generator=gen)) < context_rate
        batch = [seqs[i] for i in pick]
        width = max(len(s) for s in batch)
        ids = torch.full((len(batch), width), PAD, dtype=torch.long)
        valid = torch.zeros_like(ids, dtype=torch.bool)
        for i, s in enumerate(batch):
            ids[i, : len(s)] = torch.tensor(s)
            valid[i, : len(s)] = True
        prefix = None
        if use_ctx:
            prefix = torch.stack([_soft_context(lm, ctxs[i], prefix_len, prefix_noise, gen) for i in pick])
        logits = lm(prefix, ids, valid)
        tgt = ids[:, 1:].masked_fill(~valid[:, 1:], -100)
        loss = F.cross_entropy(logits[:, :-1].reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=-100)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses
