"""Instruction templates, the synthetic clip corpus, manifests and batching."""

from __future__ import annotations

import hashlib
import itertools
import json
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .backbones import AudioFeatureMap, FrozenAudioEncoder
from .tokenizer import CLS, DEC, TokenSequence, Vocabulary, encode

CLASSIFICATION = "classification"
CAPTIONING = "captioning"
SPLITS = ("train", "eval")

SYNTH_PREFIX = "synth:"


@dataclass(frozen=True)
class Template:
    template_id: str
    prompt: str
    task_kind: str
    label_set: tuple[str, ...] | None = None  # None means an open label set
    usage: str = "t"  # "t", "e" or "t+e"


GTZAN_GENRES = ("blues", "classical", "country", "disco", "hiphop", "jazz", "metal", "pop", "reggae", "rock")
NSYNTH_FAMILIES = ("bass", "brass", "flute", "guitar", "keyboard", "mallet", "organ", "reed", "string",
                   "synth_lead", "vocal")

# Dataset rows of the instruction-template table; prompts are kept verbatim.
TABLE_TEMPLATES = (
    Template("audioset", "This is a sound of", CLASSIFICATION),
    Template("vggsound", "This is a sound of", CLASSIFICATION),
    Template("openmic", "Identify the instruments in this segment of music:", CLASSIFICATION, usage="t+e"),
    Template("fmalarge", "The genre of this music is", CLASSIFICATION, usage="t+e"),
    Template("nsynth", "The most prominent instrument in this music is", CLASSIFICATION, NSYNTH_FAMILIES, "t+e"),
    Template("fsd50k", "This is a sound of", CLASSIFICATION),
    Template("music4all-key", "The key of this music is", CLASSIFICATION),
    Template("music4all-genre", "The genre of this music is", CLASSIFICATION),
    Template("gtzan", "The genre of this music is", CLASSIFICATION, GTZAN_GENRES, "e"),
    Template("wavcaps", "Generate audio caption:", CAPTIONING),
    Template("freesound", "Generate audio caption:", CAPTIONING),
    Template("clotho", "Generate audio caption:", CAPTIONING, usage="e"),
)

# --------------------------------------------------------------------------- synthetic corpus

PRIMITIVES = ("tone", "chirp", "noise burst", "click train")
ATTRIBUTES = {
    "tone": ("low", "high"),
    "chirp": ("deep", "bright"),
    "noise burst": ("rumbling", "hissing"),
    "click train": ("slow", "fast"),
}
# Frequencies are spread so that every unit owns a distinct part of the spectrum or rhythm.
_TONE_HZ = {"low": 220.0, "high": 1200.0}
_CHIRP_HZ = {"deep": (400.0, 800.0), "bright": (2000.0, 4000.0)}
_NOISE_BAND = {"rumbling": (40.0, 160.0), "hissing": (5000.0, 8000.0)}
_CLICK_HZ = {"slow": 4.0, "fast": 25.0}
UNITS = tuple((p, a) for p in PRIMITIVES for a in ATTRIBUTES[p])
MAX_UNITS = 3

CLIP_SECONDS = 1.0
_WINDOWS = {
    1: ((0.1, 0.9),),
    2: ((0.05, 0.45), (0.55, 0.95)),
    3: ((0.03, 0.31), (0.36, 0.64), (0.69, 0.97)),
}


def synthetic_labels() -> tuple[str, ...]:
    """Every set of up to three primitives, named in canonical primitive order."""
    labels = []
    for k in range(1, MAX_UNITS + 1):
        labels += [" plus ".join(c) for c in itertools.combinations(PRIMITIVES, k)]
    return tuple(labels)


SYNTH_TEMPLATES = (
    Template("synth-sound", "This is a sound of", CLASSIFICATION, synthetic_labels(), "t+e"),
    Template("synth-caption", "Generate audio caption:", CAPTIONING, usage="t+e"),
)


def register_templates(extra: Sequence[Template] = SYNTH_TEMPLATES) -> dict[str, Template]:
    table: dict[str, Template] = {}
    for t in (*TABLE_TEMPLATES, *extra):
        if t.template_id in table:
            raise ValueError(f"duplicate template_id: {t.template_id}")
        if t.task_kind not in (CLASSIFICATION, CAPTIONING):
            raise ValueError(f"bad task kind {t.task_kind!r}")
        table[t.template_id] = t
    return table


@dataclass(frozen=True)
class Component:
    primitive: str
    attribute: str
    onset_s: float
    duration_s: float
    freq_hz: float = 0.0
    freq_end_hz: float = 0.0
    rate_hz: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class SyntheticClipSpec:
    components: tuple[Component, ...]
    label: str
    caption: str
    clip_seconds: float = CLIP_SECONDS

    def to_dict(self) -> dict:
        return {"components": [asdict(c) for c in self.components], "label": self.label,
                "caption": self.caption, "clip_seconds": self.clip_seconds}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticClipSpec":
        comps = tuple(Component(**c) for c in d["components"])
        return cls(comps, d["label"], d["caption"], d.get("clip_seconds", CLIP_SECONDS))

    def clip_ref(self) -> str:
        return SYNTH_PREFIX + json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _combos() -> list[tuple[tuple[str, str], ...]]:
    """Every set of one to three sound units, in canonical unit order (8 + 28 + 56 captions)."""
    out = []
    for k in range(1, MAX_UNITS + 1):
        out += list(itertools.combinations(UNITS, k))
    return out


def _make_component(prim: str, attr: str, window: tuple[float, float], rng: np.random.Generator) -> Component:
    start, stop = window
    start += float(rng.uniform(0.0, 0.03))
    length = stop - start
    jitter = float(rng.uniform(0.97, 1.03))
    seed = int(rng.integers(0, 2**31 - 1))
    if prim == "tone":
        return Component(prim, attr, start, length, freq_hz=_TONE_HZ[attr] * jitter, seed=seed)
    if prim == "chirp":
        f0, f1 = _CHIRP_HZ[attr]
        return Component(prim, attr, start, length, freq_hz=f0 * jitter, freq_end_hz=f1 * jitter, seed=seed)
    if prim == "noise burst":
        lo, hi = _NOISE_BAND[attr]
        return Component(prim, attr, start, length, freq_hz=lo, freq_end_hz=hi, seed=seed)
    if prim == "click train":
        return Component(prim, attr, start, length, rate_hz=_CLICK_HZ[attr] * jitter, seed=seed)
    raise ValueError(f"invalid primitive: {prim}")


def _spec_from_combo(combo, rng) -> SyntheticClipSpec:
    windows = _WINDOWS[len(combo)]
    comps = tuple(_make_component(p, a, w, rng) for (p, a), w in zip(combo, windows))
    phrases = [f"a {a} {p}" for p, a in combo]
    caption = " followed by ".join(phrases)
    kinds = sorted({p for p, _ in combo}, key=PRIMITIVES.index)
    return SyntheticClipSpec(comps, " plus ".join(kinds), caption)


def generate_synthetic_corpus(n: int, seed: int) -> list[SyntheticClipSpec]:
    """``n`` clip specs; captions are unique until the combination space is exhausted."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    combos = _combos()
    specs = []
    while len(specs) < n:
        for i in rng.permutation(len(combos)):
            if len(specs) == n:
                break
            specs.append(_spec_from_combo(combos[i], rng))
    return specs


def _fade(x: np.ndarray, sr: int, ms: float = 5.0) -> np.ndarray:
    k = min(len(x) // 2, int(sr * ms / 1000))
    if k > 0:
        ramp = np.linspace(0.0, 1.0, k)
        x[:k] *= ramp
        x[-k:] *= ramp[::-1]
    return x


def _render_component(c: Component, sr: int) -> np.ndarray:
    n = max(1, int(round(c.duration_s * sr)))
    t = np.arange(n) / sr
    if c.primitive == "tone":
        x = np.sin(2 * np.pi * c.freq_hz * t)
    elif c.primitive == "chirp":
        k = (c.freq_end_hz - c.freq_hz) / max(c.duration_s, 1e-9)
        x = np.sin(2 * np.pi * (c.freq_hz * t + 0.5 * k * t**2))
    elif c.primitive == "noise burst":
        x = np.random.default_rng(c.seed).standard_normal(n)
        if c.freq_end_hz > c.freq_hz:
            spec = np.fft.rfft(x)
            f = np.fft.rfftfreq(n, 1.0 / sr)
            spec[(f < c.freq_hz) | (f > c.freq_end_hz)] = 0.0
            x = np.fft.irfft(spec, n)
    elif c.primitive == "click train":
        x = np.zeros(n)
        click = np.exp(-np.arange(int(0.004 * sr)) / (0.0008 * sr))
        period = sr / c.rate_hz
        for start in np.arange(0.0, n, period).astype(int):
            seg = click[: n - start]
            x[start: start + len(seg)] += seg
    else:
        raise ValueError(f"invalid primitive: {c.primitive}")
    # equal loudness per component so that sparse clicks are not drowned out
    x = _fade(x, sr)
    return x * (0.5 / max(float(np.sqrt(np.mean(x**2))), 1e-12))


def render_clip(spec: SyntheticClipSpec, sample_rate: int = 16000) -> np.ndarray:
    if sample_rate not in (8000, 16000):
        raise ValueError("sample_rate must be 8000 or 16000")
    if not spec.components:
        raise ValueError("empty spec")
    total = int(round(spec.clip_seconds * sample_rate))
    out = np.zeros(total)
    for c in spec.components:
        x = _render_component(c, sample_rate)
        start = int(round(c.onset_s * sample_rate))
        end = min(total, start + len(x))
        out[start:end] += x[: end - start]
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.9 / peak
    return out


# --------------------------------------------------------------------------- records & manifests


@dataclass(frozen=True)
class TemplateRecord:
    clip_ref: str
    template_id: str
    input_prompt: str
    output_text: str
    split: str
    task_kind: str

    def to_manifest(self) -> dict:
        return {"clip": self.clip_ref, "template_id": self.template_id, "output": self.output_text,
                "split": self.split}


def make_record(clip_ref: str, template: Template, output: str, split: str) -> TemplateRecord:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    if template.task_kind == CLASSIFICATION and template.label_set is not None and output not in template.label_set:
        raise ValueError("label not in template set")
    return TemplateRecord(clip_ref, template.template_id, template.prompt, output, split, template.task_kind)


def synthetic_records(
    n_train: int,
    n_eval: int,
    seed: int,
    template_ids: Sequence[str] = ("synth-caption", "synth-sound"),
    templates: dict[str, Template] | None = None,
) -> list[TemplateRecord]:
    """Train and eval records over a synthetic corpus; eval clips are distinct clips."""
    templates = templates or register_templates()
    specs = generate_synthetic_corpus(n_train + n_eval, seed)
    records = []
    for i, spec in enumerate(specs):
        split = "train" if i < n_train else "eval"
        ref = spec.clip_ref()
        for tid in template_ids:
            t = templates[tid]
            out = spec.caption if t.task_kind == CAPTIONING else spec.label
            records.append(make_record(ref, t, out, split))
    return records


def write_manifest(records: Sequence[TemplateRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_manifest(), sort_keys=True) + "\n")
    return path


def load_manifest(path, templates: dict[str, Template] | None = None) -> list[TemplateRecord]:
    """Parse a JSON-Lines manifest of ``{clip, template_id, output, split}`` records."""
    templates = templates or register_templates()
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            clip, tid, output, split = row["clip"], row["template_id"], row["output"], row["split"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"malformed manifest line {lineno}: {exc}") from None
        if tid not in templates:
            raise ValueError(f"unknown template: {tid} (line {lineno})")
        if not clip.startswith(SYNTH_PREFIX) and not Path(clip).is_absolute():
            clip = str((path.parent / clip).resolve())
        try:
            records.append(make_record(clip, templates[tid], output, split))
        except ValueError as exc:
            raise ValueError(f"{exc} (line {lineno})") from None
    return records


def check_split_hygiene(records: Sequence[TemplateRecord]) -> None:
    train = {r.clip_ref for r in records if r.split == "train"}
    leaked = train & {r.clip_ref for r in records if r.split == "eval"}
    if leaked:
        raise ValueError(f"{len(leaked)} clip(s) appear in both train and eval splits")


# --------------------------------------------------------------------------- audio loading


def read_wav(path) -> tuple[np.ndarray, int]:
    """Mono 8/16/32-bit PCM WAV to float samples in [-1, 1]."""
    with wave.open(str(path), "rb") as wf:
        sr, width, channels = wf.getframerate(), wf.getsampwidth(), wf.getnchannels()
        raw = wf.readframes(wf.getnframes())
    dtype = {1: np.uint8, 2: np.int16, 4: np.int32}[width]
    x = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    if width == 1:
        x = (x - 128.0) / 128.0
    else:
        x /= float(2 ** (8 * width - 1))
    if channels > 1:
        x = x.reshape(-1, channels).mean(axis=1)
    return x, sr


def write_wav(path, samples: np.ndarray, sample_rate: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767).astype(np.int16)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())
    return path


def load_clip(clip_ref: str, sample_rate: int = 16000, cache_dir=None) -> tuple[np.ndarray, int]:
    if clip_ref.startswith(SYNTH_PREFIX):
        spec = SyntheticClipSpec.from_dict(json.loads(clip_ref[len(SYNTH_PREFIX):]))
        if cache_dir is not None:
            key = hashlib.sha256(clip_ref.encode()).hexdigest()[:16]
            cached = Path(cache_dir) / f"{key}.wav"
            if cached.exists():
                return read_wav(cached)
            samples = render_clip(spec, sample_rate)
            write_wav(cached, samples, sample_rate)
            return read_wav(cached)
        return render_clip(spec, sample_rate), sample_rate
    return read_wav(clip_ref)


class FeatureStore:
    """Memoised frozen-encoder features keyed by clip reference."""

    def __init__(self, encoder: FrozenAudioEncoder, sample_rate: int = 16000, cache_dir=None):
        self.encoder = encoder
        self.sample_rate = sample_rate
        self.cache_dir = cache_dir
        self._cache: dict[str, AudioFeatureMap] = {}

    def __call__(self, clip_ref: str) -> AudioFeatureMap:
        if clip_ref not in self._cache:
            wave_, sr = load_clip(clip_ref, self.sample_rate, self.cache_dir)
            self._cache[clip_ref] = self.encoder.encode(wave_, sr, clip_id=clip_ref)
        return self._cache[clip_ref]


# --------------------------------------------------------------------------- batches


@dataclass
class Stage1Batch:
    audio: list[AudioFeatureMap]
    captions_cls: list[TokenSequence]  # [CLS] caption, for contrastive/matching
    captions_dec: list[TokenSequence]  # [DEC] caption [EOS], for generation
    records: list[TemplateRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.audio)


@dataclass
class Stage2Batch:
    audio: list[AudioFeatureMap]
    instructions: list[TokenSequence]  # plain prompt tokens (Bridge-Net input)
    lm_prompts: list[TokenSequence]  # [DEC] prompt tokens (LM input)
    responses: list[TokenSequence]  # response [EOS]
    template_ids: list[str] = field(default_factory=list)
    records: list[TemplateRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.audio)


def encode_stage1(vocab: Vocabulary, caption: str, max_len: int) -> tuple[TokenSequence, TokenSequence]:
    return (encode(vocab, caption, CLS, False, max_len),
            encode(vocab, caption, DEC, True, max_len))


def encode_stage2(vocab: Vocabulary, prompt: str, response: str, max_len: int):
    return (encode(vocab, prompt, None, False, max_len),
            encode(vocab, prompt, DEC, False, max_len),
            encode(vocab, response, None, True, max_len))


def stage1_batch(records: Sequence[TemplateRecord], features: Callable[[str], AudioFeatureMap],
                 vocab: Vocabulary, max_len: int) -> Stage1Batch:
    enc = [encode_stage1(vocab, r.output_text, max_len) for r in records]
    return Stage1Batch([features(r.clip_ref) for r in records], [e[0] for e in enc], [e[1] for e in enc],
                       list(records))


def stage2_batch(records: Sequence[TemplateRecord], features: Callable[[str], AudioFeatureMap],
                 vocab: Vocabulary, max_len: int) -> Stage2Batch:
    enc = [encode_stage2(vocab, r.input_prompt, r.output_text, max_len) for r in records]
    return Stage2Batch([features(r.clip_ref) for r in records], [e[0] for e in enc], [e[1] for e in enc],
                       [e[2] for e in enc], [r.template_id for r in records], list(records))


def make_batches(
    records: Sequence[TemplateRecord],
    batch_size: int,
    stage: int,
    seed: int,
    epoch: int,
    features: Callable[[str], AudioFeatureMap],
    vocab: Vocabulary,
    max_len: int = 30,
) -> Iterator[Stage1Batch | Stage2Batch]:
    """Deterministically shuffled batches for one epoch; the final short batch is kept."""
    if not records:
        raise ValueError("no records")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if stage == 1:
        pool = [r for r in records if r.task_kind == CAPTIONING]
        if not pool:
            raise ValueError("stage 1 needs captioning records")
    elif stage == 2:
        pool = list(records)
    else:
        raise ValueError("stage must be 1 or 2")
    order = np.random.default_rng([seed, epoch]).permutation(len(pool))
    for start in range(0, len(pool), batch_size):
        chunk = [pool[i] for i in order[start: start + batch_size]]
        if stage == 1:
            yield stage1_batch(chunk, features, vocab, max_len)
        else:
            yield stage2_batch(chunk, features, vocab, max_len)
