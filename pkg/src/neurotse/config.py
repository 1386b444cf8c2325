"""Central configuration, serialized as JSON alongside checkpoints."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ParameterError


class ConfigError(ParameterError):
    pass


class _JsonConfig:
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown {cls.__name__} key(s): {', '.join(unknown)}")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{cls.__name__}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{cls.__name__}: expected a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class ModelConfig(_JsonConfig):
    # speech front-end / decoder
    sample_rate: int = 8000
    frame_len: int = 16
    frame_stride: int = 8
    d_model: int = 64
    # dual-path bidirectional Mamba
    use_speech_mamba: bool = True
    n_repeats: int = 4
    chunk_len: int = 50
    chunk_hop: int = 25
    d_state: int = 16
    expand: int = 2
    conv_width: int = 4
    scan_impl: str = "parallel"
    # EEG encoder
    eeg_encoder: str = "kan"
    eeg_channels: int = 64
    eeg_rate: int = 128
    eeg_heads: int = 2
    eeg_layers: int = 1
    n_kan_layers: int = 3
    kan_grid: int = 5
    kan_order: int = 3
    kan_range: float = 3.0
    dropout: float = 0.5
    # fusion and mask
    fusion_layers: int = 3
    fusion_heads: int = 2
    mask_layers: int = 4
    mask_activation: str = "relu"
    # optimization
    lr_max: float = 2e-4
    warmup_fraction: float = 0.05
    batch_size: int = 8
    epochs: int = 300
    grad_clip: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.eeg_encoder not in ("kan", "linear"):
            raise ConfigError(f"eeg_encoder must be 'kan' or 'linear', got {self.eeg_encoder!r}")
        if self.scan_impl not in ("sequential", "parallel"):
            raise ConfigError(f"scan_impl must be 'sequential' or 'parallel', got {self.scan_impl!r}")
        if self.d_model % self.eeg_heads or self.d_model % self.fusion_heads:
            raise ConfigError("d_model must be divisible by the attention head counts")
        if not 1 <= self.frame_stride <= self.frame_len:
            raise ConfigError("need 1 <= frame_stride <= frame_len")
        if not 1 <= self.chunk_hop <= self.chunk_len:
            raise ConfigError("need 1 <= chunk_hop <= chunk_len")
        if min(self.n_repeats, self.fusion_layers, self.batch_size, self.epochs) < 1:
            raise ConfigError("n_repeats, fusion_layers, batch_size and epochs must be >= 1")


def toy_config(**kw) -> ModelConfig:
    """Tiny configuration used by the gradient-integrity check."""
    base = dict(d_model=8, d_state=4, expand=2, n_repeats=1, chunk_len=16, chunk_hop=8,
                eeg_channels=4, eeg_heads=2, fusion_layers=1, fusion_heads=2, kan_grid=4, kan_order=3,
                mask_layers=2, batch_size=1, epochs=1)
    base.update(kw)
    return ModelConfig(**base)


def desk_config(**kw) -> ModelConfig:
    """CPU-sized configuration used by the training acceptance runs."""
    base = dict(d_model=64, n_repeats=2, d_state=4, expand=1, frame_len=32, frame_stride=16,
                chunk_len=25, chunk_hop=25, eeg_channels=16, fusion_layers=1, mask_layers=2,
                lr_max=2e-3, batch_size=8)
    base.update(kw)
    return ModelConfig(**base)


@dataclass(frozen=True)
class CorpusSpec(_JsonConfig):
    n_samples: int = 250
    duration: float = 1.0
    sample_rate: int = 8000
    n_channels: int = 16
    eeg_snr: float = 20.0
    mix_snr: tuple = field(default=(-5.0, 5.0))
    master_seed: int = 0
    split_fractions: tuple = field(default=(0.8, 0.1, 0.1))

    def __post_init__(self):
        if self.n_samples < 1 or self.duration < 0.5:
            raise ConfigError("need n_samples >= 1 and duration >= 0.5 s")
        if len(self.mix_snr) != 2 or self.mix_snr[0] > self.mix_snr[1]:
            raise ConfigError(f"mix_snr must be an increasing (low, high) pair, got {self.mix_snr}")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must be three numbers summing to 1")
