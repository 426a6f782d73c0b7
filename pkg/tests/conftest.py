import numpy as np
import pytest
import torch

from mint.backbones import AudioFeatureMap, FrozenLM, FrozenLMConfig
from mint.bridge_net import BridgeNet, BridgeNetConfig
from mint.data import Stage1Batch, Stage2Batch, encode_stage1, encode_stage2
from mint.generative import InstructionTunedModel
from mint.tokenizer import build_vocabulary

CAPTIONS = (
    "a low tone",
    "a high tone followed by a deep chirp",
    "a hissing noise burst",
    "a fast click train followed by a bright chirp",
)
PROMPTS = ("generate audio caption:", "this is a sound of")
AUDIO_DIM = 6


@pytest.fixture
def vocab():
    return build_vocabulary(list(CAPTIONS) + list(PROMPTS), 64)


def tiny_config(vocab_size, **kw):
    base = dict(num_queries=3, hidden_dim=8, num_blocks=2, num_heads=2, cross_attention_period=1,
                ffn_dim=16, contrastive_proj_dim=4, vocab_size=vocab_size, max_text_len=16,
                audio_dim=AUDIO_DIM)
    base.update(kw)
    return BridgeNetConfig(**base)


def tiny_bridge(vocab_size, seed=0, dtype=torch.float32, **kw):
    torch.manual_seed(seed)
    return BridgeNet(tiny_config(vocab_size, **kw)).to(dtype)


def tiny_lm(vocab_size, seed=1, dtype=torch.float32):
    torch.manual_seed(seed)
    return FrozenLM(FrozenLMConfig(vocab_size=vocab_size, lm_dim=8, lm_blocks=1, lm_heads=2,
                                   ffn_dim=16, max_len=32)).to(dtype).freeze()


def feature_maps(n, frames=5, dim=AUDIO_DIM, seed=0, lengths=None):
    rng = np.random.default_rng(seed)
    lengths = lengths or [frames] * n
    return [AudioFeatureMap(rng.standard_normal((k, dim)).astype(np.float32), f"clip{i}", 1.0)
            for i, k in enumerate(lengths)]


def make_stage1(vocab, captions=CAPTIONS, maps=None, seed=0):
    maps = maps or feature_maps(len(captions), seed=seed)
    enc = [encode_stage1(vocab, c, 16) for c in captions]
    return Stage1Batch(maps, [e[0] for e in enc], [e[1] for e in enc])


def make_stage2(vocab, pairs, maps=None, seed=0):
    maps = maps or feature_maps(len(pairs), seed=seed)
    enc = [encode_stage2(vocab, p, r, 16) for p, r in pairs]
    return Stage2Batch(maps, [e[0] for e in enc], [e[1] for e in enc], [e[2] for e in enc])


def tiny_model(vocab, dtype=torch.float32, gain=1.0):
    bridge = tiny_bridge(len(vocab), dtype=dtype)
    torch.manual_seed(2)
    model = InstructionTunedModel(bridge, tiny_lm(len(vocab), dtype=dtype), prompt_gain=gain)
    return model.to(dtype)


def finite_difference_errors(loss_fn, params, h=1e-5, floor=1e-6):
    """Elementwise relative error between autograd and central differences.

    rel = |analytic - numeric| / max(|analytic|, |numeric|, floor); the floor keeps
    entries whose true gradient is ~0 from dividing round-off by round-off. h sits near
    eps ** (1/3) for float64, where truncation and round-off error balance.
    """
    params = list(params)
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    errors = []
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                ana = gflat[i].item()
                errors.append(abs(ana - num) / max(abs(ana), abs(num), floor))
    return np.array(errors)


def small_run_config(out_dir, **changes):
    """A seconds-long end-to-end run: 8 train clips, 4 held out, tiny models."""
    from mint.backbones import AudioEncoderConfig
    from mint.config import RunConfig
    cfg = RunConfig(out_dir=str(out_dir))
    cfg.model = BridgeNetConfig(num_queries=4, hidden_dim=16, num_blocks=2, num_heads=2, ffn_dim=32,
                                contrastive_proj_dim=8, max_text_len=30)
    cfg.lm = FrozenLMConfig(lm_dim=16, lm_blocks=1, lm_heads=2, ffn_dim=32, max_len=64)
    cfg.audio = AudioEncoderConfig(feat_dim=8, n_bands=16)
    cfg.data.synthetic_n, cfg.data.synthetic_eval_n = 8, 4
    cfg.optim.batch_size, cfg.optim.epochs_stage1, cfg.optim.epochs_stage2 = 4, 2, 1
    cfg.optim.base_lr, cfg.optim.warmup_steps = 1e-3, 1
    cfg.lm_pretrain.steps = 20
    return cfg.replace(**changes) if changes else cfg


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
