"""Speech front-end and the bidirectional dual-path Mamba encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import functional as F
from .errors import InputTooShortError, ParameterError
from .nn import LayerNorm, Linear, Module, Parameter
from .ssm import MambaBlock
from .tensor import Tensor, as_tensor


@dataclass
class SpeechEncoderConfig:
    sample_rate: int = 8000
    frame_len: int = 16
    frame_stride: int = 8
    d_model: int = 64
    chunk_len: int = 50
    chunk_hop: int = 25
    n_repeats: int = 4

    def __post_init__(self):
        if not 1 <= self.frame_stride <= self.frame_len:
            raise ParameterError("need 1 <= frame_stride <= frame_len")
        if not 1 <= self.chunk_hop <= self.chunk_len:
            raise ParameterError("need 1 <= chunk_hop <= chunk_len")
        if self.n_repeats < 1:
            raise ParameterError("n_repeats must be >= 1")

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.frame_len) // self.frame_stride + 1


# -- segmentation ----------------------------------------------------------------

@dataclass(frozen=True)
class SegmentLayout:
    length: int
    chunk_len: int
    hop: int

    @property
    def n_chunks(self) -> int:
        return -(-self.length // self.hop)

    @property
    def padded_length(self) -> int:
        return (self.n_chunks - 1) * self.hop + self.chunk_len

    def coverage(self) -> np.ndarray:
        count = np.zeros(self.padded_length)
        for s in range(self.n_chunks):
            count[s * self.hop:s * self.hop + self.chunk_len] += 1
        return count


def _chunks(arr: np.ndarray, lay: SegmentLayout) -> np.ndarray:
    sb, st, sd = arr.strides
    view = as_strided(arr, (arr.shape[0], lay.n_chunks, lay.chunk_len, arr.shape[2]),
                      (sb, st * lay.hop, st, sd), writeable=False)
    return view.copy()


def _overlap_add_chunks(ch: np.ndarray, lay: SegmentLayout) -> np.ndarray:
    out = np.zeros((ch.shape[0], lay.padded_length, ch.shape[3]))
    for s in range(lay.n_chunks):
        out[:, s * lay.hop:s * lay.hop + lay.chunk_len] += ch[:, s]
    return out


def segment(x, K: int, P: int):
    """Split (B, T, d) into overlapping chunks (B, S, K, d) with S = ceil(T / P).

    Chunk s starts at s*P; the tail is zero-padded to (S-1)*P + K.
    Returns the chunks and the layout needed by :func:`merge`.
    """
    if not K >= P >= 1:
        raise ParameterError(f"segment needs K >= P >= 1, got K={K}, P={P}")
    x = as_tensor(x)
    lay = SegmentLayout(x.shape[1], K, P)
    padded = np.pad(x.data, ((0, 0), (0, lay.padded_length - lay.length), (0, 0)))
    T = lay.length

    def back(g):
        return (_overlap_add_chunks(g, lay)[:, :T],)

    return Tensor._make(_chunks(padded, lay), (x,), back), lay


def merge(chunks, lay: SegmentLayout) -> Tensor:
    """Overlap-add with per-position averaging; exact inverse of :func:`segment`."""
    chunks = as_tensor(chunks)
    cov = lay.coverage()[None, :, None]
    out = (_overlap_add_chunks(chunks.data, lay) / cov)[:, :lay.length]

    def back(g):
        full = np.zeros((g.shape[0], lay.padded_length, g.shape[2]))
        full[:, :lay.length] = g
        return (_chunks(full / cov, lay),)

    return Tensor._make(out, (chunks,), back)


# -- encoder -------------------------------------------------------------------------

def encode_waveform(wav, weight, stride: int) -> Tensor:
    """(B, T_samples) -> (B, T_frames, d): strided conv1d followed by ReLU."""
    wav = as_tensor(wav)
    L = weight.shape[-1]
    if wav.shape[-1] < L:
        raise InputTooShortError(f"waveform of {wav.shape[-1]} samples is shorter than frame length {L}")
    x = F.reshape(wav, (wav.shape[0], 1, wav.shape[1]))
    emb = F.relu(F.conv1d(x, weight, stride))
    return F.transpose(emb, (0, 2, 1))


class BidirectionalMamba(Module):
    """Forward and time-flipped Mamba branches joined on the feature axis and merged back to d."""

    def __init__(self, d_model, rng, **mamba_kw):
        self.fwd = MambaBlock(d_model, rng, **mamba_kw)
        self.bwd = MambaBlock(d_model, rng, **mamba_kw)
        self.merge = Linear(2 * d_model, d_model, rng)

    def forward(self, x):
        return bidirectional_mamba(x, self.fwd, self.bwd, self.merge)


def bidirectional_mamba(x, fwd, bwd, merge_proj, swap: bool = False) -> Tensor:
    """merge_proj(concat(fwd(x), flip(bwd(flip(x))))); ``swap`` reverses the concat order."""
    x = as_tensor(x)
    t_axis = x.ndim - 2
    a = fwd(x)
    b = F.flip(bwd(F.flip(x, t_axis)), t_axis)
    parts = [b, a] if swap else [a, b]
    return merge_proj(F.concat(parts, axis=-1))


class DualPathBlock(Module):
    def __init__(self, d_model, rng, **mamba_kw):
        self.intra = BidirectionalMamba(d_model, rng, **mamba_kw)
        self.intra_norm = LayerNorm(d_model)
        self.inter = BidirectionalMamba(d_model, rng, **mamba_kw)
        self.inter_norm = LayerNorm(d_model)

    def forward(self, x, K, P):
        B, T, d = x.shape
        chunks, lay = segment(x, K, P)
        S = lay.n_chunks
        local = F.reshape(chunks, (B * S, K, d))
        local = F.add(local, self.intra_norm(self.intra(local)))
        glob = F.reshape(F.transpose(F.reshape(local, (B, S, K, d)), (0, 2, 1, 3)), (B * K, S, d))
        glob = F.add(glob, self.inter_norm(self.inter(glob)))
        chunks = F.transpose(F.reshape(glob, (B, K, S, d)), (0, 2, 1, 3))
        return merge(chunks, lay)


class DualPathMamba(Module):
    def __init__(self, cfg: SpeechEncoderConfig, rng, **mamba_kw):
        self.cfg = cfg
        self.blocks = [DualPathBlock(cfg.d_model, rng, **mamba_kw) for _ in range(cfg.n_repeats)]

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x, self.cfg.chunk_len, self.cfg.chunk_hop)
        return x


def dual_path_forward(x, enc: DualPathMamba, cfg: SpeechEncoderConfig | None = None) -> Tensor:
    return enc(x)


class SpeechEncoder(Module):
    """Conv front-end plus (optionally) the dual-path bidirectional Mamba stack.

    ``forward`` returns both the front-end embedding (which the mask is applied
    to) and the contextual features used for fusion.
    """

    def __init__(self, cfg: SpeechEncoderConfig, rng, use_mamba: bool = True, **mamba_kw):
        self.cfg = cfg
        self.weight = Parameter(rng.uniform(-1, 1, (cfg.d_model, 1, cfg.frame_len)) / np.sqrt(cfg.frame_len))
        self.dual_path = DualPathMamba(cfg, rng, **mamba_kw) if use_mamba else None

    def forward(self, wav):
        emb = encode_waveform(wav, self.weight, self.cfg.frame_stride)
        feats = self.dual_path(emb) if self.dual_path is not None else emb
        return emb, feats
