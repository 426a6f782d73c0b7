"""Stage 2: instruction-aware query extraction, soft audio prompts and response-only LM loss."""

from __future__ import annotations

import torch
import torch.nn as nn

from .backbones import (AudioFeatureMap, FrozenLM, join_prompt_response, lm_generate_greedy,
                        response_log_probs, stack_audio)
from .bridge_net import BridgeNet
from .data import Stage2Batch
from .masking import BIDIRECTIONAL, batch_masks
from .tokenizer import DEC, TokenSequence, Vocabulary, collate, decode, encode


class InstructionTunedModel(nn.Module):
    """Bridge-Net + FC projection feeding a frozen LM.

    The LM is attached but never trained; ``trainable_state`` leaves it out.
    """

    def __init__(self, bridge: BridgeNet, lm: FrozenLM, prompt_gain: float = 0.1):
        super().__init__()
        self.bridge = bridge
        self.fc_proj = nn.Linear(bridge.cfg.hidden_dim, lm.cfg.lm_dim)
        nn.init.xavier_normal_(self.fc_proj.weight, gain=prompt_gain)
        nn.init.zeros_(self.fc_proj.bias)
        self.lm = lm.freeze()

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("lm.") and p.requires_grad]

    def trainable_state(self) -> dict[str, torch.Tensor]:
        state = {f"{k}": v for k, v in self.bridge.state_dict().items()}
        state.update({f"fc_proj.{k}": v for k, v in self.fc_proj.state_dict().items()})
        return state

    def extract_instruction_aware(self, audio, audio_valid, instr_ids, instr_valid) -> torch.Tensor:
        """Query outputs with the instruction in the self-attention stream (bidirectional mask).

        Columns that are padding in every row are dropped; an all-empty instruction gives
        exactly the instruction-free forward.
        """
        if instr_ids is not None:
            width = int(instr_valid.sum(dim=1).max()) if instr_valid.numel() else 0
            instr_ids, instr_valid = instr_ids[:, :width], instr_valid[:, :width]
            if width == 0:
                instr_ids = instr_valid = None
        mask = batch_masks(BIDIRECTIONAL, self.bridge.num_queries, instr_valid)
        return self.bridge(audio, audio_valid, instr_ids, mask).query_out

    def project_to_lm(self, query_out: torch.Tensor) -> torch.Tensor:
        if query_out.shape[-1] != self.bridge.cfg.hidden_dim:
            raise ValueError("query_out width does not match hidden_dim")
        return self.fc_proj(query_out)

    def soft_prompts(self, audio_maps, instructions) -> torch.Tensor:
        audio, audio_valid = stack_audio(audio_maps)
        ids, valid = collate(instructions)
        return self.project_to_lm(self.extract_instruction_aware(audio, audio_valid, ids, valid))

    def response_logits(self, batch: Stage2Batch):
        prompts = self.soft_prompts(batch.audio, batch.instructions)
        for r in batch.responses:
            if r.n_valid == 0:
                raise ValueError("empty response")
        ids, valid, target = join_prompt_response([p.tokens for p in batch.lm_prompts],
                                                  [r.tokens for r in batch.responses])
        return self.lm(prompts, ids, valid), ids, target


def response_loss(logits: torch.Tensor, ids: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over response tokens only."""
    n = target[:, 1:].sum()
    if int(n) == 0:
        raise ValueError("empty response")
    return -response_log_probs(logits, ids, target).sum() / n


def stage2_loss(model: InstructionTunedModel, batch: Stage2Batch) -> torch.Tensor:
    logits, ids, target = model.response_logits(batch)
    return response_loss(logits, ids, target)


@torch.no_grad()
def answer(model: InstructionTunedModel, vocab: Vocabulary, audio: AudioFeatureMap, instruction: str,
           max_new: int = 24, max_len: int = 30) -> str:
    instr = encode(vocab, instruction, None, False, max_len)
    prompt = encode(vocab, instruction, DEC, False, max_len)
    soft = model.soft_prompts([audio], [instr])
    out = lm_generate_greedy(model.lm, soft, prompt, max_new)
    return decode(vocab, out)


@torch.no_grad()
def generate_tokens(model: InstructionTunedModel, audio: AudioFeatureMap, instr: TokenSequence,
                    prompt: TokenSequence, max_new: int) -> TokenSequence:
    soft = model.soft_prompts([audio], [instr])
    return lm_generate_greedy(model.lm, soft, prompt, max_new)
