"""Run configuration: JSON in, JSON out."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .backbones import AudioEncoderConfig, FrozenLMConfig
from .bridge_net import BridgeNetConfig
from .objectives import normalize_enabled


@dataclass
class OptimConfig:
    base_lr: float = 1e-4
    base_lr_stage2: float | None = None  # defaults to base_lr
    warmup_steps: int = 50
    stage2_bridge_lr_scale: float = 1.0  # Bridge-Net rate relative to the projection in stage 2
    schedule: str = "linear"
    batch_size: int = 8
    batch_size_stage2: int | None = None  # defaults to batch_size
    epochs_stage1: int = 5
    epochs_stage2: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class DataConfig:
    manifest: str | None = None  # JSON-Lines with train and eval records; synthetic corpus if None
    synthetic_n: int = 64
    synthetic_eval_n: int = 16
    templates: list[str] = field(default_factory=lambda: ["synth-caption", "synth-sound"])
    sample_rate: int = 16000
    max_text_len: int = 30
    vocab_max_size: int = 256
    cache_dir: str | None = None


@dataclass
class LMPretrainConfig:
    steps: int = 300
    lr: float = 3e-3
    batch_size: int = 16
    prefix_len: int = 8  # length of the text-derived prefixes shown during pretraining
    context_rate: float = 0.5  # share of pretraining batches that carry such a prefix
    prefix_noise: float = 0.5


@dataclass
class RunConfig:
    model: BridgeNetConfig = field(default_factory=BridgeNetConfig)
    lm: FrozenLMConfig = field(default_factory=FrozenLMConfig)
    audio: AudioEncoderConfig = field(default_factory=AudioEncoderConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    lm_pretrain: LMPretrainConfig = field(default_factory=LMPretrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    enabled_losses: list[str] = field(default_factory=lambda: ["alc", "alm", "atg"])
    symmetric_contrastive: bool = True
    alm_both_sides: bool = False
    prompt_gain: float = 0.1
    out_dir: str = "runs/desk"
    single_threaded: bool = True

    _SECTIONS = {"model": BridgeNetConfig, "lm": FrozenLMConfig, "audio": AudioEncoderConfig,
                 "optim": OptimConfig, "lm_pretrain": LMPretrainConfig, "data": DataConfig}

    def validate(self) -> None:
        o = self.optim
        if o.base_lr <= 0 or (o.base_lr_stage2 is not None and o.base_lr_stage2 <= 0):
            raise ValueError("base_lr must be positive")
        if o.batch_size_stage2 is not None and o.batch_size_stage2 < 1:
            raise ValueError("optim.batch_size_stage2 must be positive")
        for name in ("batch_size", "epochs_stage1", "epochs_stage2"):
            if getattr(o, name) < 1:
                raise ValueError(f"optim.{name} must be positive")
        if o.warmup_steps < 0:
            raise ValueError("optim.warmup_steps must be >= 0")
        if o.schedule not in ("linear", "constant"):
            raise ValueError("optim.schedule must be 'linear' or 'constant'")
        if self.data.manifest is None and (self.data.synthetic_n < 1 or self.data.synthetic_eval_n < 0):
            raise ValueError("synthetic corpus sizes must be positive")
        if self.data.sample_rate not in (8000, 16000):
            raise ValueError("data.sample_rate must be 8000 or 16000")
        if self.lm_pretrain.steps < 0:
            raise ValueError("lm_pretrain.steps must be >= 0")
        flags = normalize_enabled(self.enabled_losses)
        if not any(flags.values()):
            raise ValueError("enabled_losses must name at least one loss")
        m = self.model
        if m.hidden_dim % m.num_heads:
            raise ValueError("model.hidden_dim must be divisible by model.num_heads")
        if not 1 <= m.cross_attention_period <= m.num_blocks:
            raise ValueError("model.cross_attention_period must lie in [1, num_blocks]")
        if self.lm.lm_dim % self.lm.lm_heads:
            raise ValueError("lm.lm_dim must be divisible by lm.lm_heads")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        kwargs = {}
        for key, value in d.items():
            if key in cls._SECTIONS:
                kwargs[key] = cls._SECTIONS[key](**value)
            elif key in cls.__dataclass_fields__:
                kwargs[key] = value
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(**kwargs)

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
