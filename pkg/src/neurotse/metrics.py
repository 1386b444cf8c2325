"""Separation metrics: SI-SDR (reported and differentiable forms) and STOI."""

from __future__ import annotations

import warnings
from math import gcd

import numpy as np
from scipy.signal import resample_poly

from . import functional as F
from .errors import ContractError
from .tensor import Tensor, as_tensor

SISDR_CLAMP_DB = 60.0
SISDR_EPS = 1e-12
# Smooth floor in the loss: each energy is padded by this fraction of the other,
# which bounds the value to +/-60 dB while keeping it homogeneous in scale.
LOSS_FLOOR = 1e-6
_ABS_EPS = 1e-30


def si_sdr(est, ref, zero_mean: bool = True) -> float:
    """Scale-invariant SDR in dB, clamped to [-60, 60]."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ContractError(f"estimate shape {est.shape} differs from reference shape {ref.shape}")
    if zero_mean:
        est = est - est.mean()
        ref = ref - ref.mean()
    ref_energy = np.dot(ref, ref)
    if ref_energy <= 0.0:
        raise ContractError("reference signal has zero energy")
    target = (np.dot(est, ref) / ref_energy) * ref
    residual = est - target
    pt = max(np.dot(target, target), SISDR_EPS)
    pe = max(np.dot(residual, residual), SISDR_EPS)
    return float(np.clip(10.0 * np.log10(pt / pe), -SISDR_CLAMP_DB, SISDR_CLAMP_DB))


def si_sdr_batch(est, ref, zero_mean: bool = True) -> np.ndarray:
    est = np.atleast_2d(np.asarray(est.data if isinstance(est, Tensor) else est))
    ref = np.atleast_2d(np.asarray(ref.data if isinstance(ref, Tensor) else ref))
    return np.array([si_sdr(e, r, zero_mean) for e, r in zip(est, ref)])


def neg_si_sdr_loss(est, ref, zero_mean: bool = True) -> Tensor:
    """Mean over the batch of -SI-SDR; est is a (B, T) Tensor, ref a (B, T) array."""
    est = as_tensor(est)
    ref = np.asarray(ref.data if isinstance(ref, Tensor) else ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ContractError(f"estimate shape {est.shape} differs from reference shape {ref.shape}")
    if zero_mean:
        est = F.sub(est, F.mean(est, axis=-1, keepdims=True))
        ref = ref - ref.mean(axis=-1, keepdims=True)
    ref_energy = (ref * ref).sum(axis=-1, keepdims=True)
    if np.any(ref_energy <= 0.0):
        raise ContractError("reference signal has zero energy")
    alpha = F.div(F.sum(F.mul(est, ref), axis=-1, keepdims=True), ref_energy)
    target = F.mul(alpha, ref)
    residual = F.sub(est, target)
    pt = F.sum(F.square(target), axis=-1)
    pe = F.sum(F.square(residual), axis=-1)
    num = F.add(F.add(pt, F.scale(pe, LOSS_FLOOR)), _ABS_EPS)
    den = F.add(F.add(pe, F.scale(pt, LOSS_FLOOR)), _ABS_EPS)
    db = F.scale(F.sub(F.log(num), F.log(den)), 10.0 / np.log(10.0))
    return F.scale(F.mean(db), -1.0)


# -- STOI ----------------------------------------------------------------------

STOI_FS = 10000
_FRAME = 256
_NFFT = 512
_BANDS = 15
_MIN_FREQ = 150.0
_SEGMENT = 30
_BETA_DB = -15.0
_DYN_RANGE = 40.0


def _third_octave_matrix(fs=STOI_FS, nfft=_NFFT, n_bands=_BANDS, min_freq=_MIN_FREQ):
    freqs = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands, dtype=np.float64)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, freqs.size))
    for i in range(n_bands):
        a = int(np.argmin((freqs - lo[i]) ** 2))
        b = int(np.argmin((freqs - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _window():
    return np.hanning(_FRAME + 2)[1:-1]


def _frames(x):
    hop = _FRAME // 2
    n = (len(x) - _FRAME) // hop + 1
    idx = np.arange(_FRAME)[None, :] + hop * np.arange(n)[:, None]
    return x[idx] * _window()


def _drop_silent(x, y):
    """Remove frames whose clean energy is more than 40 dB below the loudest frame."""
    fx, fy = _frames(x), _frames(y)
    energy = 20 * np.log10(np.linalg.norm(fx, axis=1) + np.finfo(float).eps)
    keep = energy - energy.max() + _DYN_RANGE > 0
    fx, fy = fx[keep], fy[keep]
    hop = _FRAME // 2
    total = (len(fx) - 1) * hop + _FRAME if len(fx) else 0
    xs, ys = np.zeros(total), np.zeros(total)
    for i in range(len(fx)):
        xs[i * hop:i * hop + _FRAME] += fx[i]
        ys[i * hop:i * hop + _FRAME] += fy[i]
    return xs, ys


def _band_envelopes(x):
    spec = np.fft.rfft(_frames(x), n=_NFFT, axis=1)
    return np.sqrt(_third_octave_matrix() @ (np.abs(spec) ** 2).T)


def stoi(est, ref, sample_rate: int) -> float:
    """Short-time objective intelligibility of ``est`` against clean ``ref``, in [0, 1]-ish."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape or est.ndim != 1:
        raise ContractError("stoi expects two 1-D signals of equal length")
    if sample_rate < 8000:
        raise ContractError(f"stoi needs sample_rate >= 8000, got {sample_rate}")
    if len(ref) / sample_rate < 0.384:
        raise ContractError(f"stoi needs at least 384 ms of signal, got {1000 * len(ref) / sample_rate:.0f} ms")
    if sample_rate != STOI_FS:
        g = gcd(STOI_FS, sample_rate)
        ref = resample_poly(ref, STOI_FS // g, sample_rate // g)
        est = resample_poly(est, STOI_FS // g, sample_rate // g)
    ref, est = _drop_silent(ref, est)
    if len(ref) < _FRAME + (_SEGMENT - 1) * (_FRAME // 2):
        # fewer non-silent frames than one segment: the reference implementation
        # warns and reports this floor value
        warnings.warn("not enough non-silent frames for a STOI segment; returning 1e-5")
        return 1e-5
    X, Y = _band_envelopes(ref), _band_envelopes(est)
    clip = 10 ** (-_BETA_DB / 20)
    scores = []
    eps = np.finfo(float).eps
    for m in range(_SEGMENT, X.shape[1] + 1):
        xs = X[:, m - _SEGMENT:m]
        ys = Y[:, m - _SEGMENT:m]
        ys = ys * (np.linalg.norm(xs, axis=1, keepdims=True) / (np.linalg.norm(ys, axis=1, keepdims=True) + eps))
        ys = np.minimum(ys, xs * (1 + clip))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = ys - ys.mean(axis=1, keepdims=True)
        corr = (xc * yc).sum(1) / (np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1) + eps)
        scores.append(corr.mean())
    return float(np.mean(scores))
