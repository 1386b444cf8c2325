"""Finite-difference gradient suite: every layer type in isolation, then the whole extractor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .config import ModelConfig, toy_config
from .eeg import EEGEncoderConfig, AttentionKANLayer, EEGStem, MultiHeadAttention
from .fusion import CrossModalFusion, MaskNet, apply_and_decode
from .gradcheck import check_parameters
from .kan import KANLayer
from .metrics import neg_si_sdr_loss
from .model import Extractor
from .nn import Linear, LayerNorm, Module, Parameter, PReLU
from .speech import DualPathBlock, SpeechEncoder, SpeechEncoderConfig
from .ssm import MambaBlock

LAYER_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class SuiteResult:
    group: str
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


class _Decoder(Module):
    def __init__(self, d, L, rng):
        self.weight = Parameter(rng.uniform(-1, 1, (d, 1, L)) / np.sqrt(d))


def _away_from_kinks(rng, shape, weight, stride, margin=1e-3):
    """Draw a waveform whose framed pre-activations all sit at least ``margin`` from the ReLU kink."""
    while True:
        wav = rng.standard_normal(shape)
        pre = F.conv1d(wav[:, None, :], weight, stride).data
        if np.abs(pre).min() > margin:
            return wav


def _layer_cases(cfg: ModelConfig, rng: np.random.Generator):
    """(label, module, forward(module) -> Tensor) triples at toy sizes."""
    d, B, T = cfg.d_model, 2, 12
    x = rng.standard_normal((B, T, d))
    e = rng.standard_normal((B, T, d))
    ecfg = EEGEncoderConfig(cfg.eeg_channels, cfg.eeg_rate, d, cfg.eeg_heads, cfg.n_kan_layers,
                            cfg.dropout, 1, cfg.kan_grid, cfg.kan_order, cfg.kan_range)
    scfg = SpeechEncoderConfig(cfg.sample_rate, cfg.frame_len, cfg.frame_stride, d,
                               cfg.chunk_len, cfg.chunk_hop, 1)
    mkw = dict(d_state=cfg.d_state, expand=cfg.expand, conv_width=cfg.conv_width)
    conv_enc = SpeechEncoder(scfg, rng, use_mamba=False)
    wav = _away_from_kinks(rng, (B, 8 * cfg.frame_len), conv_enc.weight.data, cfg.frame_stride)
    eeg = rng.standard_normal((B, cfg.eeg_channels, T))
    mask = np.abs(rng.standard_normal((B, T, d)))
    cases = [
        ("linear", Linear(d, d, rng), lambda m: m(x)),
        ("layer_norm", LayerNorm(d), lambda m: m(x)),
        ("prelu", PReLU(d), lambda m: m(x)),
        ("mamba_block", MambaBlock(d, rng, **mkw), lambda m: m(x)),
        ("dual_path_block", DualPathBlock(d, rng, **mkw), lambda m: m(x, 5, 3)),
        ("conv_encoder", conv_enc, lambda m: m(wav)[0]),
        ("kan_layer", KANLayer(d, d, rng, cfg.kan_grid, cfg.kan_order, (-2.0, 2.0)), lambda m: m(x)),
        ("attention", MultiHeadAttention(d, cfg.eeg_heads, rng), lambda m: m(x, e, e)),
        ("eeg_stem", EEGStem(cfg.eeg_channels, d, rng), lambda m: m(eeg)),
        ("attention_kan_layer", AttentionKANLayer(ecfg, rng), lambda m: m(x, np.random.default_rng(5))),
        ("fusion", CrossModalFusion(d, rng, 2, cfg.fusion_heads), lambda m: m(x, e)),
        ("mask_net", MaskNet(d, rng, 2, "sigmoid"), lambda m: m(x)),
        ("decoder", _Decoder(d, cfg.frame_len, rng),
         lambda m: apply_and_decode(x, mask, m.weight, cfg.frame_stride, T * cfg.frame_stride + 3)),
    ]
    return cases


def layer_suite(cfg: ModelConfig | None = None, seed: int = 0) -> list:
    cfg = cfg or toy_config()
    rng = np.random.default_rng(seed)
    results = []
    for label, module, fwd in _layer_cases(cfg, rng):
        module.train()
        w = {}

        def loss_fn(module=module, fwd=fwd):
            y = fwd(module)
            if "w" not in w:
                w["w"] = np.random.default_rng(seed + 1).standard_normal(y.shape)
            return F.sum(F.mul(y, w["w"]))

        for chk in check_parameters(loss_fn, module.named_parameters(), rng):
            results.append(SuiteResult(label, chk.name, chk.max_error, LAYER_TOL))
    return results


def model_suite(cfg: ModelConfig | None = None, n_samples: int = 512, seed: int = 0) -> list:
    """Whole-extractor check: negative SI-SDR of a random batch w.r.t. a random reference."""
    cfg = cfg or toy_config()
    rng = np.random.default_rng(seed)
    model = Extractor(cfg, np.random.default_rng(cfg.seed))
    model.train()
    n_eeg = int(round(n_samples / cfg.sample_rate * cfg.eeg_rate))
    mix = rng.standard_normal((1, n_samples))
    eeg = rng.standard_normal((1, cfg.eeg_channels, max(2, n_eeg)))
    ref = rng.standard_normal((1, n_samples))

    def loss_fn():
        return neg_si_sdr_loss(model(mix, eeg, np.random.default_rng(seed + 7)), ref)

    return [SuiteResult("model", c.name, c.max_error, MODEL_TOL)
            for c in check_parameters(loss_fn, model.named_parameters(), rng)]


def run_suite(cfg: ModelConfig | None = None, n_samples: int = 512, seed: int = 0) -> list:
    return layer_suite(cfg, seed) + model_suite(cfg, n_samples, seed)
