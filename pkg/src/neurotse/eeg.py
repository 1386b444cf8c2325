"""EEG encoder: channel stem, multi-head self-attention and a position-wise KAN stack."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ContractError, DataError, ParameterError
from .kan import KANStack
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor, as_tensor

EEG_RATE = 128


@dataclass
class EEGEncoderConfig:
    n_channels: int = 64
    eeg_rate: int = EEG_RATE
    d_model: int = 64
    n_heads: int = 2
    n_kan_layers: int = 3
    dropout_p: float = 0.5
    n_layers: int = 1
    kan_grid: int = 5
    kan_order: int = 3
    kan_range: float = 3.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ParameterError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ContractError(f"d_model={d_model} is not divisible by heads={n_heads}")
        self.d_model, self.n_heads = d_model, n_heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)

    def _heads(self, x):
        B, T, _ = x.shape
        return F.transpose(F.reshape(x, (B, T, self.n_heads, self.d_model // self.n_heads)), (0, 2, 1, 3))

    def forward(self, q, k, v):
        return mha_forward(q, k, v, self)


def mha_forward(q, k, v, mha: MultiHeadAttention) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated and projected."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != mha.d_model or k.shape[-1] != mha.d_model or k.shape[:2] != v.shape[:2]:
        raise ContractError(f"attention shapes q={q.shape}, k={k.shape}, v={v.shape} "
                            f"do not fit d_model={mha.d_model}")
    B, Tq, d = q.shape
    dh = d // mha.n_heads
    Q = mha._heads(mha.q_proj(q))
    K = mha._heads(mha.k_proj(k))
    V = mha._heads(mha.v_proj(v))
    scores = F.scale(F.matmul(Q, F.transpose(K, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    ctx = F.matmul(F.softmax(scores, axis=-1), V)
    ctx = F.reshape(F.transpose(ctx, (0, 2, 1, 3)), (B, Tq, d))
    return mha.out_proj(ctx)


def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d // 2 + d % 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, :d // 2])
    return pe


class EEGStem(Module):
    """Per-frame linear map from channels to d_model plus fixed sinusoidal positions."""

    def __init__(self, n_channels: int, d_model: int, rng):
        self.n_channels = n_channels
        self.proj = Linear(n_channels, d_model, rng)

    def forward(self, eeg):
        eeg = as_tensor(eeg)
        if eeg.ndim != 3 or eeg.shape[1] != self.n_channels:
            raise DataError(f"EEG has {eeg.shape[1] if eeg.ndim == 3 else eeg.shape} channels, "
                            f"encoder expects {self.n_channels}")
        x = self.proj(F.transpose(eeg, (0, 2, 1)))
        return F.add(x, sinusoidal_positions(x.shape[1], x.shape[2]))


def eeg_project(eeg, stem: EEGStem) -> Tensor:
    return stem(eeg)


class AttentionKANLayer(Module):
    def __init__(self, cfg: EEGEncoderConfig, rng):
        d = cfg.d_model
        self.p = cfg.dropout_p
        self.mha = MultiHeadAttention(d, cfg.n_heads, rng)
        self.norm1 = LayerNorm(d)
        self.kan = KANStack([d] * (cfg.n_kan_layers + 1), rng, G=cfg.kan_grid, k=cfg.kan_order,
                            grid_range=(-cfg.kan_range, cfg.kan_range))
        self.norm2 = LayerNorm(d)

    def forward(self, x, rng=None):
        return attention_kan_forward(x, self, rng)


def attention_kan_forward(x, layer: AttentionKANLayer, rng=None) -> Tensor:
    """y1 = LN(x + drop(MHA(x))); y = LN(y1 + drop(KAN3(KAN2(KAN1(y1)))))."""
    train = layer.training
    y1 = layer.norm1(F.add(x, F.dropout(layer.mha(x, x, x), layer.p, train, rng)))
    return layer.norm2(F.add(y1, F.dropout(layer.kan(y1), layer.p, train, rng)))


class EEGEncoder(Module):
    def __init__(self, cfg: EEGEncoderConfig, rng):
        self.cfg = cfg
        self.stem = EEGStem(cfg.n_channels, cfg.d_model, rng)
        self.layers = [AttentionKANLayer(cfg, rng) for _ in range(cfg.n_layers)]

    def forward(self, eeg, rng=None):
        x = self.stem(eeg)
        for layer in self.layers:
            x = layer(x, rng)
        return x


class LinearEEGEncoder(Module):
    """Ablation stand-in: the same stem followed by one linear map."""

    def __init__(self, cfg: EEGEncoderConfig, rng):
        self.cfg = cfg
        self.stem = EEGStem(cfg.n_channels, cfg.d_model, rng)
        self.proj = Linear(cfg.d_model, cfg.d_model, rng)

    def forward(self, eeg, rng=None):
        return self.proj(self.stem(eeg))
