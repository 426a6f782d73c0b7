import json

import numpy as np
import pytest

from mint.data import (CAPTIONING, CLASSIFICATION, PRIMITIVES, SYNTH_TEMPLATES, Component, SyntheticClipSpec,
                       Template, check_split_hygiene, generate_synthetic_corpus, load_clip, load_manifest,
                       make_batches, make_record, read_wav, register_templates, render_clip, synthetic_labels,
                       synthetic_records, write_manifest, write_wav)
from mint.tokenizer import build_vocabulary

TEMPLATE_PROMPTS = {
    "audioset": "This is a sound of",
    "vggsound": "This is a sound of",
    "openmic": "Identify the instruments in this segment of music:",
    "fmalarge": "The genre of this music is",
    "nsynth": "The most prominent instrument in this music is",
    "fsd50k": "This is a sound of",
    "music4all-key": "The key of this music is",
    "music4all-genre": "The genre of this music is",
    "gtzan": "The genre of this music is",
    "wavcaps": "Generate audio caption:",
    "freesound": "Generate audio caption:",
    "clotho": "Generate audio caption:",
}


def test_registered_prompts_are_verbatim():
    table = register_templates()
    for tid, prompt in TEMPLATE_PROMPTS.items():
        assert table[tid].prompt == prompt
    assert {t for t, v in table.items() if v.task_kind == CAPTIONING} == {"wavcaps", "freesound", "clotho",
                                                                         "synth-caption"}
    assert table["gtzan"].usage == "e" and table["nsynth"].usage == "t+e"


def test_duplicate_template_rejected():
    with pytest.raises(ValueError, match="duplicate template_id: audioset"):
        register_templates([Template("audioset", "x", CLASSIFICATION)])
    with pytest.raises(ValueError, match="bad task kind"):
        register_templates([Template("new", "x", "translation")])


def test_label_space():
    labels = synthetic_labels()
    assert len(labels) == 14 and len(set(labels)) == 14
    assert labels[0] == "tone" and labels[-1] == "chirp plus noise burst plus click train"


def test_corpus_is_deterministic_and_exhaustive():
    a = generate_synthetic_corpus(92, seed=3)
    assert a == generate_synthetic_corpus(92, seed=3)
    assert [s.caption for s in a] != [s.caption for s in generate_synthetic_corpus(92, seed=4)]
    assert len({s.caption for s in a}) == 92
    assert len(generate_synthetic_corpus(100, seed=0)) == 100
    with pytest.raises(ValueError):
        generate_synthetic_corpus(0, seed=0)


def test_captions_name_every_labelled_primitive():
    for spec in generate_synthetic_corpus(40, seed=1):
        kinds = spec.label.split(" plus ")
        assert all(k in PRIMITIVES for k in kinds)
        for k in kinds:
            assert k in spec.caption
        assert spec.caption.count("followed by") == len(spec.components) - 1
        assert spec.label in SYNTH_TEMPLATES[0].label_set


def test_spec_json_round_trip():
    spec = generate_synthetic_corpus(1, seed=2)[0]
    assert SyntheticClipSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


@pytest.mark.parametrize("sr", [8000, 16000])
def test_render_length_and_peak(sr):
    x = render_clip(generate_synthetic_corpus(1, seed=0)[0], sr)
    assert len(x) == sr
    assert np.max(np.abs(x)) == pytest.approx(0.9)


def _flatness(x):
    p = np.abs(np.fft.rfft(x)) ** 2 + 1e-20
    return np.exp(np.mean(np.log(p))) / np.mean(p)


def test_white_noise_is_flatter_than_a_tone():
    noise = render_clip(SyntheticClipSpec((Component("noise burst", "x", 0.0, 1.0, seed=5),), "noise burst", "n"))
    tone = render_clip(SyntheticClipSpec((Component("tone", "low", 0.0, 1.0, freq_hz=440.0),), "tone", "t"))
    assert _flatness(noise) > 0.3
    assert _flatness(tone) < 0.01


def test_render_rejects_bad_input():
    with pytest.raises(ValueError, match="empty spec"):
        render_clip(SyntheticClipSpec((), "", ""))
    with pytest.raises(ValueError, match="sample_rate"):
        render_clip(generate_synthetic_corpus(1, 0)[0], 22050)


def test_wav_round_trip(tmp_path):
    x = np.sin(np.linspace(0, 20, 8000)) * 0.5
    write_wav(tmp_path / "a.wav", x, 8000)
    y, sr = read_wav(tmp_path / "a.wav")
    assert sr == 8000
    assert np.abs(x - y).max() < 1 / 32767 + 1e-9


def test_clip_cache(tmp_path):
    ref = generate_synthetic_corpus(1, 0)[0].clip_ref()
    first, sr = load_clip(ref, 16000, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("*.wav"))) == 1
    second, _ = load_clip(ref, 16000, cache_dir=tmp_path)
    assert np.array_equal(first, second) and sr == 16000


# --------------------------------------------------------------------------- manifests


def test_manifest_round_trip(tmp_path):
    recs = synthetic_records(3, 2, seed=0)
    back = load_manifest(write_manifest(recs, tmp_path / "m.jsonl"))
    assert back == recs


def test_manifest_resolves_relative_paths(tmp_path):
    (tmp_path / "m.jsonl").write_text(json.dumps(
        {"clip": "clips/a.wav", "template_id": "synth-caption", "output": "a low tone", "split": "train"}) + "\n")
    rec = load_manifest(tmp_path / "m.jsonl")[0]
    assert rec.clip_ref == str((tmp_path / "clips" / "a.wav").resolve())
    assert rec.input_prompt == "Generate audio caption:"


def test_manifest_errors(tmp_path):
    good = {"clip": "synth:{}", "template_id": "synth-sound", "output": "tone", "split": "train"}
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(good) + "\n" + json.dumps({**good, "template_id": "bogus"}) + "\n")
    with pytest.raises(ValueError, match=r"unknown template: bogus \(line 2\)"):
        load_manifest(path)
    path.write_text(json.dumps({**good, "output": "dog"}) + "\n")
    with pytest.raises(ValueError, match=r"label not in template set \(line 1\)"):
        load_manifest(path)
    path.write_text("{not json\n")
    with pytest.raises(ValueError, match="malformed manifest line 1"):
        load_manifest(path)
    path.write_text(json.dumps({**good, "split": "dev"}) + "\n")
    with pytest.raises(ValueError, match="split must be"):
        load_manifest(path)


def test_split_hygiene():
    recs = synthetic_records(6, 3, seed=0)
    check_split_hygiene(recs)
    assert {r.split for r in recs} == {"train", "eval"}
    leaked = recs + [make_record(recs[0].clip_ref, register_templates()["synth-caption"], "a low tone", "eval")]
    with pytest.raises(ValueError, match="both train and eval"):
        check_split_hygiene(leaked)


# --------------------------------------------------------------------------- batching


def _features(ref):
    return ref


def test_batches_keep_short_tail_and_are_seeded():
    recs = synthetic_records(10, 0, seed=0)
    vocab = build_vocabulary([r.output_text for r in recs] + [r.input_prompt for r in recs], 128)
    b1 = list(make_batches(recs, 4, 1, seed=0, epoch=0, features=_features, vocab=vocab))
    assert [len(b) for b in b1] == [4, 4, 2]
    assert all(r.task_kind == CAPTIONING for b in b1 for r in b.records)
    again = list(make_batches(recs, 4, 1, seed=0, epoch=0, features=_features, vocab=vocab))
    assert [b.audio for b in again] == [b.audio for b in b1]
    other = list(make_batches(recs, 4, 1, seed=0, epoch=1, features=_features, vocab=vocab))
    assert [b.audio for b in other] != [b.audio for b in b1]
    s2 = list(make_batches(recs, 8, 2, seed=0, epoch=0, features=_features, vocab=vocab))
    assert [len(b) for b in s2] == [8, 8, 4]
    assert {t for b in s2 for t in b.template_ids} == {"synth-caption", "synth-sound"}


def test_batch_errors():
    recs = synthetic_records(2, 0, seed=0, template_ids=("synth-sound",))
    vocab = build_vocabulary(["a"], 16)
    with pytest.raises(ValueError, match="captioning records"):
        next(make_batches(recs, 2, 1, 0, 0, _features, vocab))
    with pytest.raises(ValueError, match="no records"):
        next(make_batches([], 2, 1, 0, 0, _features, vocab))
    with pytest.raises(ValueError, match="stage must be"):
        next(make_batches(recs, 2, 3, 0, 0, _features, vocab))
