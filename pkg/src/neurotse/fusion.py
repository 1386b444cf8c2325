"""Cross-modal fusion, mask estimation and waveform decoding."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .eeg import MultiHeadAttention
from .errors import ContractError, DataError, ParameterError
from .nn import LayerNorm, Linear, Module, PReLU
from .tensor import Tensor, as_tensor


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear-interpolation weights; both endpoints map exactly."""
    if n_out == n_in:
        return np.eye(n_in)
    pos = np.linspace(0.0, n_in - 1, n_out)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    M = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    M[rows, lo] = 1.0 - frac
    M[rows, lo + 1] += frac
    return M


def time_align(eeg_emb, n_frames: int) -> Tensor:
    """Resample (B, T_eeg, d) to (B, n_frames, d) by linear interpolation in time."""
    eeg_emb = as_tensor(eeg_emb)
    if eeg_emb.shape[1] < 2:
        raise DataError(f"need at least 2 EEG frames to align, got {eeg_emb.shape[1]}")
    if eeg_emb.shape[1] == n_frames:
        return eeg_emb
    return F.matmul(Tensor(interp_matrix(eeg_emb.shape[1], n_frames)), eeg_emb)


class CrossAttentionLayer(Module):
    def __init__(self, d_model, n_heads, rng):
        self.s_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.e_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.s_norm = LayerNorm(d_model)
        self.e_norm = LayerNorm(d_model)

    def forward(self, s, e):
        s_next = self.s_norm(F.add(s, self.s_attn(s, e, e)))
        e_next = self.e_norm(F.add(e, self.e_attn(e, s, s)))
        return s_next, e_next


class CrossModalFusion(Module):
    """Stacked bidirectional cross-attention with layer-wise sums and a final splice.

    Output = Linear(concat(sum_l s_l, sum_l e_l, speech, eeg)) back to d_model.
    """

    def __init__(self, d_model: int, rng, n_layers: int = 3, n_heads: int = 2):
        if n_layers < 1:
            raise ParameterError("CrossModalFusion needs at least one layer")
        self.layers = [CrossAttentionLayer(d_model, n_heads, rng) for _ in range(n_layers)]
        self.out_proj = Linear(4 * d_model, d_model, rng)

    def forward(self, speech, eeg):
        return cross_modal_fuse(speech, eeg, self)


def cross_modal_fuse(speech_emb, eeg_aligned, fusion: CrossModalFusion) -> Tensor:
    speech_emb, eeg_aligned = as_tensor(speech_emb), as_tensor(eeg_aligned)
    if speech_emb.shape[:2] != eeg_aligned.shape[:2]:
        raise ContractError(f"speech {speech_emb.shape} and EEG {eeg_aligned.shape} are not "
                            "time-aligned; call time_align first")
    s, e = speech_emb, eeg_aligned
    sum_s = sum_e = None
    for layer in fusion.layers:
        s, e = layer(s, e)
        sum_s = s if sum_s is None else F.add(sum_s, s)
        sum_e = e if sum_e is None else F.add(sum_e, e)
    return fusion.out_proj(F.concat([sum_s, sum_e, speech_emb, eeg_aligned], axis=-1))


class MaskNet(Module):
    """Pointwise conv + PReLU + LayerNorm blocks, then a pointwise conv and a non-negative output map."""

    def __init__(self, d_model: int, rng, n_blocks: int = 4, activation: str = "relu"):
        if activation not in ("relu", "sigmoid"):
            raise ParameterError(f"mask activation must be 'relu' or 'sigmoid', got {activation!r}")
        self.activation = activation
        self.convs = [Linear(d_model, d_model, rng) for _ in range(n_blocks)]
        self.acts = [PReLU(d_model) for _ in range(n_blocks)]
        self.norms = [LayerNorm(d_model) for _ in range(n_blocks)]
        self.out = Linear(d_model, d_model, rng)

    def forward(self, x):
        return estimate_mask(x, self)


def estimate_mask(fused, net: MaskNet) -> Tensor:
    x = as_tensor(fused)
    for conv, act, norm in zip(net.convs, net.acts, net.norms):
        x = norm(act(conv(x)))
    x = net.out(x)
    return F.relu(x) if net.activation == "relu" else F.sigmoid(x)


def apply_and_decode(speech_emb, mask, decoder_weight, stride: int, n_samples: int) -> Tensor:
    """Mask the (B, T_frames, d) embedding and map it back to (B, n_samples)."""
    speech_emb, mask = as_tensor(speech_emb), as_tensor(mask)
    if speech_emb.shape != mask.shape:
        raise ContractError(f"mask shape {mask.shape} differs from embedding shape {speech_emb.shape}")
    masked = F.transpose(F.mul(speech_emb, mask), (0, 2, 1))
    wav = F.conv_transpose1d(masked, decoder_weight, stride)
    wav = F.reshape(wav, (wav.shape[0], wav.shape[2]))
    length = wav.shape[1]
    if length < n_samples:
        return F.pad(wav, 1, 0, n_samples - length)
    if length > n_samples:
        return F.slice_axis(wav, 1, 0, n_samples)
    return wav
