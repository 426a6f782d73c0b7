import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from conftest import tiny_lm
from mint.backbones import (AudioEncoderConfig, FrozenAudioEncoder, FrozenLM, lm_generate_greedy, lm_score,
                            pretrain_lm, resample_linear, stack_audio)
from mint.tokenizer import DEC, EOS, TokenSequence

SR = 16000
V = 20


def tone(hz, seconds=0.5, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return 0.5 * np.sin(2 * np.pi * hz * t)


@pytest.fixture(scope="module")
def encoder():
    return FrozenAudioEncoder()


def test_silence_gives_identical_frames(encoder):
    feats = encoder.encode(np.zeros(SR), SR).frames
    assert feats.shape == (31, 32)
    assert np.array_equal(feats, np.broadcast_to(feats[0], feats.shape))


def test_different_tones_differ(encoder):
    a = encoder.encode(tone(440), SR).frames
    b = encoder.encode(tone(880), SR).frames
    assert np.abs(a - b).max() > 1e-3


def test_encoder_is_deterministic(encoder):
    x = np.random.default_rng(0).standard_normal(SR // 2)
    assert np.array_equal(encoder.encode(x, SR).frames, FrozenAudioEncoder().encode(x, SR).frames)


def test_eight_khz_input_is_resampled(encoder):
    a = encoder.encode(tone(300, sr=8000), 8000)
    b = encoder.encode(tone(300), SR)
    assert a.frames.shape == b.frames.shape
    assert a.duration_s == pytest.approx(0.5)


def test_resample_identity_and_length():
    x = np.arange(10.0)
    assert np.array_equal(resample_linear(x, SR, SR), x)
    assert len(resample_linear(np.zeros(8000), 8000)) == 16000


@pytest.mark.parametrize("wave,message", [
    (np.zeros(0), "empty audio"),
    (np.array([0.0, np.nan] * 2000), "invalid samples"),
    (np.zeros(100), "duration"),
    (np.zeros(SR * 31), "duration"),
])
def test_encoder_rejects_bad_audio(encoder, wave, message):
    with pytest.raises(ValueError, match=message):
        encoder.encode(wave, SR)


def test_encoder_save_load(tmp_path):
    enc = FrozenAudioEncoder(AudioEncoderConfig(feat_dim=16, seed=7))
    enc.save(tmp_path / "enc.zip")
    back = FrozenAudioEncoder.load(tmp_path / "enc.zip")
    assert back.param_hash() == enc.param_hash()
    assert back.feat_dim == 16


def test_stack_audio_masks_only_ragged_batches(encoder):
    a = encoder.encode(tone(440, 0.5), SR)
    b = encoder.encode(tone(440, 0.25), SR)
    x, valid = stack_audio([a, a])
    assert valid is None and x.shape == (2, 15, 32)
    x, valid = stack_audio([a, b])
    assert valid[1].sum().item() == b.frames.shape[0]
    assert not x[1, b.frames.shape[0]:].any()


# --------------------------------------------------------------------------- LM


@pytest.fixture
def lm():
    return tiny_lm(V, dtype=torch.float64)


def _seq(ids):
    return TokenSequence.from_ids(ids)


def test_lm_is_causal(lm):
    ids = torch.tensor([[DEC, 5, 6, 7, 8, 9]])
    valid = torch.ones_like(ids, dtype=torch.bool)
    prefix = torch.randn(1, 2, 8, dtype=torch.float64)
    base = lm(prefix, ids, valid)
    for i in range(5):
        other = ids.clone()
        other[0, i + 1:] = 11
        assert torch.equal(lm(prefix, other, valid)[:, : i + 1], base[:, : i + 1])


def test_lm_prefix_width_checked(lm):
    ids = torch.tensor([[DEC, 5]])
    with pytest.raises(ValueError, match="prefix dim"):
        lm(torch.zeros(1, 2, 9), ids, torch.ones_like(ids, dtype=torch.bool))


def test_lm_length_checked(lm):
    ids = torch.full((1, 33), 5)
    with pytest.raises(ValueError, match="max_len"):
        lm(None, ids, torch.ones_like(ids, dtype=torch.bool))


def oracle_score(lm, prefix, prompt, cand):
    """Re-run the LM on each growing prefix and read the next-token log-probability."""
    total = 0.0
    ctx = list(prompt)
    for tok in cand:
        x = torch.tensor([ctx])
        logp = F.log_softmax(lm(prefix, x, torch.ones_like(x, dtype=torch.bool))[0, -1], dim=-1)
        total += logp[tok].item()
        ctx.append(tok)
    return total


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.lists(st.integers(5, V - 1), min_size=0, max_size=4),
                          st.lists(st.integers(3, V - 1), min_size=1, max_size=5)), min_size=1, max_size=3),
       st.integers(0, 3))
def test_lm_score_matches_incremental_oracle(pairs, n_prefix):
    lm = tiny_lm(V, dtype=torch.float64)
    torch.manual_seed(n_prefix)
    prefix = torch.randn(len(pairs), n_prefix, 8, dtype=torch.float64) if n_prefix else None
    prompts = [_seq([DEC] + p) for p, _ in pairs]
    cands = [_seq(c) for _, c in pairs]
    with torch.no_grad():
        got = lm_score(lm, prefix, prompts, cands)
        for b, (p, c) in enumerate(pairs):
            pre = prefix[b: b + 1] if prefix is not None else None
            assert got[b].item() == pytest.approx(oracle_score(lm, pre, [DEC] + p, c), abs=1e-6)


def test_score_unaffected_by_batch_partner_padding(lm):
    with torch.no_grad():
        alone = lm_score(lm, None, [_seq([DEC, 5])], [_seq([6, 7])])
        paired = lm_score(lm, None, [_seq([DEC, 5]), _seq([DEC, 5, 6, 7, 8])], [_seq([6, 7]), _seq([9, 10, 11])])
    assert paired[0].item() == pytest.approx(alone[0].item(), abs=1e-10)


def test_empty_candidate_rejected(lm):
    with pytest.raises(ValueError, match="non-empty"):
        lm_score(lm, None, [_seq([DEC])], [_seq([])])


def test_greedy_single_step_is_argmax(lm):
    prefix = torch.randn(2, 8, dtype=torch.float64)
    out = lm_generate_greedy(lm, prefix, _seq([DEC, 5]), max_new=1)
    x = torch.tensor([[DEC, 5]])
    expected = int(lm(prefix, x, torch.ones_like(x, dtype=torch.bool))[0, -1].argmax())
    assert out.tokens == (expected,)


def test_greedy_stops_at_eos(lm):
    # the final norm emits e_0, so every logit row is tok_emb[:, 0]
    with torch.no_grad():
        lm.ln_f.weight.zero_()
        lm.ln_f.bias.zero_()
        lm.ln_f.bias[0] = 1.0
        lm.tok_emb.weight[:, 0] = -1.0
        lm.tok_emb.weight[EOS, 0] = 5.0
    assert lm_generate_greedy(lm, None, _seq([DEC]), max_new=10).tokens == (EOS,)
    with pytest.raises(ValueError, match="max_new"):
        lm_generate_greedy(lm, None, _seq([DEC]), max_new=0)


def test_freeze_and_hash_survive_backprop(lm):
    before = lm.param_hash()
    assert not any(p.requires_grad for p in lm.parameters())
    prefix = torch.randn(1, 2, 8, dtype=torch.float64, requires_grad=True)
    x = torch.tensor([[DEC, 5, 6]])
    lm(prefix, x, torch.ones_like(x, dtype=torch.bool)).sum().backward()
    assert prefix.grad is not None and prefix.grad.abs().sum() > 0
    assert all(p.grad is None for p in lm.parameters())
    assert lm.param_hash() == before


def test_lm_save_load(lm, tmp_path):
    lm.save(tmp_path / "lm.zip")
    back = FrozenLM.load(tmp_path / "lm.zip")
    assert back.param_hash() == lm.param_hash()


def test_pretraining_lowers_loss():
    lm = tiny_lm(V)
    lm.requires_grad_(True)
    seqs = [[DEC, 5 + i, 10 + i, EOS] for i in range(5)]
    losses = pretrain_lm(lm, seqs, steps=80, lr=1e-2, batch_size=8, contexts=[s[1:3] for s in seqs],
                         prefix_len=4, context_rate=0.5)
    assert len(losses) == 80
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
