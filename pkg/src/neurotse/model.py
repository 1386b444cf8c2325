"""The end-to-end EEG-cued target speaker extractor."""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .eeg import EEGEncoder, EEGEncoderConfig, LinearEEGEncoder
from .errors import DataError
from .fusion import CrossModalFusion, MaskNet, apply_and_decode, time_align
from .nn import Module, Parameter
from .speech import SpeechEncoder, SpeechEncoderConfig
from .tensor import Tensor, as_tensor


class Extractor(Module):
    """mixture (B, T) + EEG (B, C, T_eeg) -> estimate of the attended source (B, T)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        scfg = SpeechEncoderConfig(cfg.sample_rate, cfg.frame_len, cfg.frame_stride, cfg.d_model,
                                   cfg.chunk_len, cfg.chunk_hop, cfg.n_repeats)
        self.speech = SpeechEncoder(scfg, rng, use_mamba=cfg.use_speech_mamba, d_state=cfg.d_state,
                                    expand=cfg.expand, conv_width=cfg.conv_width,
                                    scan_impl=cfg.scan_impl)
        ecfg = EEGEncoderConfig(cfg.eeg_channels, cfg.eeg_rate, cfg.d_model, cfg.eeg_heads,
                                cfg.n_kan_layers, cfg.dropout, cfg.eeg_layers, cfg.kan_grid,
                                cfg.kan_order, cfg.kan_range)
        self.eeg = EEGEncoder(ecfg, rng) if cfg.eeg_encoder == "kan" else LinearEEGEncoder(ecfg, rng)
        self.fusion = CrossModalFusion(cfg.d_model, rng, cfg.fusion_layers, cfg.fusion_heads)
        self.mask_net = MaskNet(cfg.d_model, rng, cfg.mask_layers, cfg.mask_activation)
        bound = 1.0 / np.sqrt(cfg.d_model)
        self.decoder = Parameter(rng.uniform(-bound, bound, (cfg.d_model, 1, cfg.frame_len)))

    def forward(self, mixture, eeg, rng: np.random.Generator | None = None) -> Tensor:
        mixture, eeg = as_tensor(mixture), as_tensor(eeg)
        if mixture.shape[0] != eeg.shape[0]:
            raise DataError(f"batch sizes differ: mixture {mixture.shape}, EEG {eeg.shape}")
        emb, feats = self.speech(mixture)
        e = time_align(self.eeg(eeg, rng), emb.shape[1])
        mask = self.mask_net(self.fusion(feats, e))
        return apply_and_decode(emb, mask, self.decoder, self.cfg.frame_stride, mixture.shape[1])


def build_model(cfg: ModelConfig) -> Extractor:
    return Extractor(cfg, np.random.default_rng(cfg.seed))
