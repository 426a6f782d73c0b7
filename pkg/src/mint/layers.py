"""Attention and feed-forward building blocks with explicit boolean masks."""

from __future__ import annotations

import math

import torch.nn as nn
import torch.nn.functional as F

from .masking import MASK_VALUE


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % num_heads:
            raise ValueError("hidden dim must be divisible by num_heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        kv_dim = kv_dim or dim
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, context, allow=None, return_probs=False):
        """``allow`` is bool (B, Lq, Lk) or (Lq, Lk); False entries are excluded."""
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if allow is not None:
            if allow.dim() == 2:
                allow = allow.unsqueeze(0)
            scores = scores.masked_fill(~allow.unsqueeze(1), MASK_VALUE)
        probs = scores.softmax(dim=-1)
        h = (probs @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        out = self.out(h)
        return (out, probs) if return_probs else (out, None)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Xavier linears, N(0, std) embeddings, identity layer norms."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=std)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
