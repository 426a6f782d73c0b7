"""Self-attention masks over the concatenated [queries | text] stream.

``allow[i, j]`` is True when position ``i`` may attend to position ``j``.
Rows are attenders, columns are attended. Query positions come first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

UNIMODAL = "unimodal"
BIDIRECTIONAL = "bidirectional"
CAUSAL_MULTIMODAL = "causal_multimodal"
MASK_KINDS = (UNIMODAL, BIDIRECTIONAL, CAUSAL_MULTIMODAL)

# masked attention logits are overwritten with this before the softmax
MASK_VALUE = -1e9


@dataclass(frozen=True)
class AttentionMaskPlan:
    allow: np.ndarray
    q_len: int
    t_len: int
    kind: str

    def __post_init__(self):
        n = self.q_len + self.t_len
        if self.allow.shape != (n, n):
            raise ValueError("allow matrix does not match q_len + t_len")

    def to_text(self) -> str:
        """0/1 grid, one row per attending position."""
        return "\n".join("".join("1" if v else "0" for v in row) for row in self.allow)

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.allow.copy())


def _blocks(q_len: int, text_valid: Sequence[bool]):
    if q_len < 1:
        raise ValueError("no queries")
    valid = np.asarray(list(text_valid), dtype=bool).reshape(-1)
    t_len = valid.shape[0]
    allow = np.zeros((q_len + t_len, q_len + t_len), dtype=bool)
    return allow, valid, t_len


def build_unimodal_mask(q_len: int, text_valid: Sequence[bool]) -> AttentionMaskPlan:
    """Queries and text cannot see each other (contrastive objective)."""
    allow, valid, t_len = _blocks(q_len, text_valid)
    allow[:q_len, :q_len] = True
    allow[q_len:, q_len:] = valid[None, :]
    return AttentionMaskPlan(allow, q_len, t_len, UNIMODAL)


def build_bidirectional_mask(q_len: int, text_valid: Sequence[bool]) -> AttentionMaskPlan:
    """Every position sees every valid position (matching objective)."""
    allow, valid, t_len = _blocks(q_len, text_valid)
    cols = np.concatenate([np.ones(q_len, dtype=bool), valid])
    allow[:, :] = cols[None, :]
    return AttentionMaskPlan(allow, q_len, t_len, BIDIRECTIONAL)


def build_causal_multimodal_mask(q_len: int, text_valid: Sequence[bool]) -> AttentionMaskPlan:
    """Queries see queries; text sees all queries and earlier valid text (generation objective)."""
    allow, valid, t_len = _blocks(q_len, text_valid)
    allow[:q_len, :q_len] = True
    allow[q_len:, :q_len] = True
    causal = np.tril(np.ones((t_len, t_len), dtype=bool))
    allow[q_len:, q_len:] = causal & valid[None, :]
    return AttentionMaskPlan(allow, q_len, t_len, CAUSAL_MULTIMODAL)


_BUILDERS = {
    UNIMODAL: build_unimodal_mask,
    BIDIRECTIONAL: build_bidirectional_mask,
    CAUSAL_MULTIMODAL: build_causal_multimodal_mask,
}


def build_mask(kind: str, q_len: int, text_valid: Sequence[bool]) -> AttentionMaskPlan:
    try:
        return _BUILDERS[kind](q_len, text_valid)
    except KeyError:
        raise ValueError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}") from None


def text_only_mask(text_valid: Sequence[bool]) -> np.ndarray:
    """The text block of the unimodal mask, for streams that carry no queries."""
    return build_unimodal_mask(1, text_valid).allow[1:, 1:]


def batch_masks(kind: str, q_len: int, text_valid: torch.Tensor | None) -> torch.Tensor:
    """Stack one plan per row of ``text_valid`` (B, T) into a (B, Q+T, Q+T) bool tensor."""
    if text_valid is None:
        return build_mask(kind, q_len, []).to_tensor().unsqueeze(0)
    rows = text_valid.cpu().numpy()
    return torch.from_numpy(np.stack([build_mask(kind, q_len, r).allow for r in rows]))


def batch_text_only_masks(text_valid: torch.Tensor) -> torch.Tensor:
    rows = text_valid.cpu().numpy()
    return torch.from_numpy(np.stack([text_only_mask(r) for r in rows]))
